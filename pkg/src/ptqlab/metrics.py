"""Local and prediction-difference metrics for scoring quantization parameters.

Local metrics compare an activation with its quantized counterpart.  The
``pd_*`` metrics compare the softmax predictions of the full-precision model
with those obtained after quantization; ``pd_kl`` is KL(fp || quantized).
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .tensor_core import ShapeError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class MetricKind(str, enum.Enum):
    LOCAL_MSE = "local_mse"
    LOCAL_COSINE = "local_cosine"
    PD_MSE = "pd_mse"
    PD_COSINE = "pd_cosine"
    PD_KL = "pd_kl"

    @property
    def is_global(self) -> bool:
        return self.value.startswith("pd_")


@dataclass(frozen=True)
class Prediction:
    logits: torch.Tensor
    temperature: float = 1.0

    @property
    def probs(self) -> torch.Tensor:
        return F.softmax(self.logits / self.temperature, dim=-1)

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log(self.probs.clamp_min(PROB_FLOOR))

    @property
    def num_classes(self) -> int:
        return self.logits.shape[-1]


def _per_sample(a: torch.Tensor) -> torch.Tensor:
    # 1-D input is a single sample
    return a.reshape(1, -1) if a.dim() == 1 else a.reshape(a.shape[0], -1)


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"metric inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def local_mse(a: torch.Tensor, a_q: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance per sample, averaged over the batch."""
    _check_pair(a, a_q)
    return (_per_sample(a) - _per_sample(a_q)).pow(2).sum(dim=1).mean()


def local_cosine(a: torch.Tensor, a_q: torch.Tensor) -> torch.Tensor:
    """1 - cos(a, a_q) per flattened sample, averaged over the batch.

    A zero vector on either side has distance 1.
    """
    _check_pair(a, a_q)
    x, y = _per_sample(a), _per_sample(a_q)
    nx, ny = x.norm(dim=1), y.norm(dim=1)
    degenerate = (nx == 0) | (ny == 0)
    if bool(degenerate.any()):
        log.warning("local_cosine: %d zero-norm sample(s), distance set to 1", int(degenerate.sum()))
    cos = (x * y).sum(dim=1) / (nx * ny).clamp_min(torch.finfo(x.dtype).tiny)
    dist = torch.where(degenerate, torch.ones_like(cos), 1.0 - cos)
    return dist.clamp_min(0.0).mean()


def _check_predictions(fp: Prediction, q: Prediction) -> None:
    if fp.num_classes != q.num_classes:
        raise ShapeError(f"class counts differ: {fp.num_classes} vs {q.num_classes}")
    if fp.temperature != q.temperature:
        raise ValueError("predictions use different temperatures")


def pd_kl(fp: Prediction, q: Prediction) -> torch.Tensor:
    """KL(fp || q) per sample, batch mean, scaled by T**2."""
    _check_predictions(fp, q)
    p = fp.probs.clamp_min(PROB_FLOOR)
    kl = (p * (torch.log(p) - q.log_probs)).sum(dim=-1)
    return kl.mean() * fp.temperature**2


def pd_mse(fp: Prediction, q: Prediction) -> torch.Tensor:
    _check_predictions(fp, q)
    return local_mse(fp.probs, q.probs)


def pd_cosine(fp: Prediction, q: Prediction) -> torch.Tensor:
    _check_predictions(fp, q)
    return local_cosine(fp.probs, q.probs)


LOCAL_METRICS = {MetricKind.LOCAL_MSE: local_mse, MetricKind.LOCAL_COSINE: local_cosine}
GLOBAL_METRICS = {MetricKind.PD_MSE: pd_mse, MetricKind.PD_COSINE: pd_cosine, MetricKind.PD_KL: pd_kl}


def task_loss(q: Prediction, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against real labels; analysis-only oracle, never used to fit parameters."""
    return F.cross_entropy(q.logits / q.temperature, labels)
