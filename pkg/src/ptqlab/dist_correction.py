"""Correct full-precision calibration activations toward batch-norm running statistics.

For a block input ``a_fp`` we optimize ``a_dc`` (initialized to ``a_fp``) on::

    lambda_c * sum_i (||mean_i(a_dc) - mu_i||^2 + ||std_i(a_dc) - sigma_i||^2)
        + mean((a_dc - a_fp)^2)

where ``mean_i``/``std_i`` are per-channel population statistics of the input
of the i-th batch-norm layer of the block and ``mu_i``/``sigma_i`` are its
running mean and sqrt(running variance).  The anchor term is averaged over
elements.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .model_graph import Block
from .optim import Adam
from .tensor_core import NonFiniteError

log = logging.getLogger(__name__)

DEFAULT_STEPS = 500
DEFAULT_LR = 1e-3
LAMBDA_C_DEFAULTS = {"resnet": 0.02, "mobilenet": 0.005, "mnasnet": 0.001}


def channel_stats(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel (dim 1) mean and population std."""
    if x.shape[0] < 2:
        raise ValueError("batch statistics need at least 2 samples")
    dims = [d for d in range(x.dim()) if d != 1]
    mean = x.mean(dim=dims)
    var = x.var(dim=dims, unbiased=False)
    return mean, var.clamp_min(1e-12).sqrt() * (var > 0)


def collect_bn_inputs(block: Block, a: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
    with torch.no_grad():
        return [channel_stats(x) for x in block.bn_inputs(a)]


@dataclass
class BNStatTarget:
    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def of_block(cls, block: Block) -> list["BNStatTarget"]:
        return [cls(bn.running_mean.detach().clone(), bn.running_var.detach().sqrt()) for bn in block.batchnorms()]


@dataclass
class CorrectionState:
    a_fp: torch.Tensor
    lambda_c: float = 0.02
    lr: float = DEFAULT_LR
    steps: int = DEFAULT_STEPS
    a_dc: Optional[torch.Tensor] = None
    history: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.a_fp = self.a_fp.detach().clone()
        if self.a_dc is None:
            self.a_dc = self.a_fp.clone()


def dc_objective(
    block: Block, a_dc: torch.Tensor, a_fp: torch.Tensor, targets: list[BNStatTarget], lambda_c: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """(statistic term before lambda_c, anchor term)."""
    stat = a_dc.new_zeros(())
    for x, t in zip(block.bn_inputs(a_dc), targets):
        dims = [d for d in range(x.dim()) if d != 1]
        mean = x.mean(dim=dims)
        std = x.var(dim=dims, unbiased=False).clamp_min(1e-12).sqrt()
        stat = stat + (mean - t.mean).pow(2).sum() + (std - t.std).pow(2).sum()
    anchor = (a_dc - a_fp).pow(2).mean()
    return stat, anchor


def correct_distribution(block: Block, state: CorrectionState) -> torch.Tensor:
    """Run ``state.steps`` Adam steps on the corrected activation and return it."""
    targets = BNStatTarget.of_block(block)
    if not targets or state.lambda_c == 0.0:
        state.a_dc = state.a_fp.clone()
        return state.a_dc
    if state.a_fp.shape[0] < 2:
        raise ValueError("batch statistics need at least 2 samples")
    was_training = block.training
    block.eval()
    a = state.a_dc.clone().requires_grad_(True)
    opt = Adam([(a, state.lr)])
    try:
        for _ in range(state.steps + 1):
            stat, anchor = dc_objective(block, a, state.a_fp, targets, state.lambda_c)
            loss = state.lambda_c * stat + anchor
            if not bool(torch.isfinite(loss)):
                raise NonFiniteError("distribution correction diverged")
            state.history.append((stat.item(), anchor.item()))
            if len(state.history) > state.steps:
                break
            (g,) = torch.autograd.grad(loss, a)
            a.grad = g
            opt.step()
    except NonFiniteError:
        log.warning("distribution correction diverged; keeping the original activations")
        state.a_dc = state.a_fp.clone()
        return state.a_dc
    finally:
        block.train(was_training)
    state.a_dc = a.detach()
    return state.a_dc


def correct_in_chunks(
    block: Block, a_fp: torch.Tensor, lambda_c: float, lr: float = DEFAULT_LR, steps: int = DEFAULT_STEPS, chunk: int = 256
) -> torch.Tensor:
    """Correct a calibration tensor chunk by chunk (each chunk is one statistics batch)."""
    if not block.batchnorms() or lambda_c == 0.0:
        return a_fp.clone()
    out = []
    for start in range(0, a_fp.shape[0], chunk):
        st = CorrectionState(a_fp[start : start + chunk], lambda_c, lr, steps)
        out.append(correct_distribution(block, st))
    return torch.cat(out)


def histogram_rows(before: torch.Tensor, after: torch.Tensor, bins: int = 50) -> list[dict]:
    """Rows of ``bin_left, bin_right, count_before, count_after`` on a shared binning."""
    b = before.detach().reshape(-1).numpy()
    a = after.detach().reshape(-1).numpy()
    lo, hi = float(min(b.min(), a.min())), float(max(b.max(), a.max()))
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    cb, _ = np.histogram(b, edges)
    ca, _ = np.histogram(a, edges)
    return [
        {"bin_left": float(edges[i]), "bin_right": float(edges[i + 1]), "count_before": int(cb[i]), "count_after": int(ca[i])}
        for i in range(bins)
    ]
