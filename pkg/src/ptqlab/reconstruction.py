"""Block-wise reconstruction of rounding variables and activation scales.

Stages (stem first, then each body block) are quantized shallow to deep.  For
stage ``l`` the optimized objective is::

    pd_kl(O_fp, f_{l+1}(A~_l))  +  lambda_r * ||A_l - A~_l||^2  +  w_round * sum(1 - |2h - 1|^beta)

``A~_l`` is the quantized stage applied to the quantized input ``A~_{l-1}``;
``f_{l+1}`` is the rest of the full-precision network; ``A_l`` is the FP stage
applied to the FP input (optionally distribution-corrected).  Random drop
only affects the forward pass that feeds the regularization term.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import torch

from . import dist_correction as dc
from .metrics import MetricKind, Prediction, local_mse, pd_kl
from .model_graph import ModelGraph, QuantLayer, forward_partial, stage_name
from .optim import Adam, optimizer_step  # noqa: F401  (re-exported)
from .quantizer import (
    ActQuantizer,
    BetaSchedule,
    WeightQuantizer,
    random_drop_mix,  # noqa: F401  (re-exported)
    rounding_regularizer,
)
from .scale_search import ScaleGrid, search_activation_scale
from .tensor_core import NonFiniteError

log = logging.getLogger(__name__)

LAMBDA_R_RESNET = 0.2
LAMBDA_R_OTHER = 0.1
SCALE_FLOOR = 1e-8


class ReconstructionError(RuntimeError):
    def __init__(self, msg: str, snapshot: Optional[dict] = None):
        super().__init__(msg)
        self.snapshot = snapshot or {}


class ConfigError(ValueError):
    pass


@dataclass
class ReconConfig:
    w_bits: int = 4
    a_bits: int = 4
    # bits for the first and last conv/linear (weights and input activation); None disables
    first_last_bits: Optional[int] = 8
    # additionally keep the input of the second quantized layer at 8 bits
    first_output_8bit: bool = False
    lambda_r: float = LAMBDA_R_OTHER
    drop_prob: float = 0.5
    lr_scale: float = 4e-5
    lr_round: float = 3e-3
    iterations: int = 20000
    batch_size: int = 32
    round_weight: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2
    temperature: float = 1.0
    lambda_c: float = 0.02
    lr_dc: float = dc.DEFAULT_LR
    dc_steps: int = dc.DEFAULT_STEPS
    dc_chunk: int = 256
    weight_scale_method: str = "mse"
    # 'auto': pd_kl when the PD term is used, local_mse otherwise
    act_init_metric: str = "auto"
    act_init_grid: int = 64
    act_init_samples: int = 256
    # evaluate the PD term every k-th iteration only
    pd_every: int = 1
    log_every: int = 100

    def validate(self) -> None:
        if self.lambda_r < 0:
            raise ConfigError("lambda_r must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError("drop_prob must lie in [0, 1]")
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ConfigError("iterations and batch_size must be positive")
        if min(self.w_bits, self.a_bits) < 2:
            raise ConfigError("bit widths must be >= 2")
        if self.pd_every < 1:
            raise ConfigError("pd_every must be >= 1")


@dataclass
class QuantOptions:
    use_pd: bool = True
    use_reg: bool = True
    use_dc: bool = True
    use_drop: bool = True

    @property
    def optimizes(self) -> bool:
        return self.use_pd or self.use_reg

    @property
    def label(self) -> str:
        parts = [n for n, on in (("PD", self.use_pd), ("Reg", self.use_reg), ("DC", self.use_dc), ("Drop", self.use_drop)) if on]
        return "+".join(parts) or "none"


@dataclass
class BlockState:
    stage: int
    layers: list[str]
    trajectory: list[dict] = field(default_factory=list)
    saturated_fraction: float = 1.0
    soft_hard_rel_change: float = 0.0
    finalized: bool = False


# --------------------------------------------------------------------------


def _chunks(fn: Callable, x: torch.Tensor, size: int = 256) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([fn(x[i : i + size]) for i in range(0, len(x), size)])


def layer_bits(cfg: ReconConfig, index: int, count: int) -> tuple[int, int]:
    """(weight bits, input-activation bits) for the index-th of ``count`` quantized layers."""
    w, a = cfg.w_bits, cfg.a_bits
    if cfg.first_last_bits is not None and index in (0, count - 1):
        w = a = cfg.first_last_bits
    if cfg.first_output_8bit and index == 1 and count > 2:
        a = 8
    return w, a


def attach_quantizers(model: ModelGraph, cfg: ReconConfig) -> None:
    """Give every conv/linear a weight and an input quantizer (both disabled)."""
    layers = list(model.quant_layers())
    for i, (_, layer) in enumerate(layers):
        wb, ab = layer_bits(cfg, i, len(layers))
        layer.weight_quantizer = WeightQuantizer.calibrate(layer.weight, wb, cfg.weight_scale_method)
        layer.act_quantizer = ActQuantizer(ab)
        layer.quant_weight = layer.quant_act = False


def stage_activation_quantizers(stage) -> list[ActQuantizer]:
    return [l.act_quantizer for l in stage.quant_layers() if l.act_quantizer is not None and not l.act_quantizer.passthrough]


def set_drop(stage, p: float, generator: Optional[torch.Generator]) -> None:
    for aq in stage_activation_quantizers(stage):
        aq.drop_prob = p
        aq.generator = generator


class Reconstructor:
    """Holds calibration caches and quantizes one stage at a time."""

    def __init__(
        self,
        fp_model: ModelGraph,
        calib: torch.Tensor,
        cfg: ReconConfig,
        options: QuantOptions,
        seed: int = 0,
        progress: Optional[Callable[[dict], None]] = None,
    ):
        cfg.validate()
        if options.use_dc and not options.use_reg:
            raise ConfigError("distribution correction only affects the regularization target; enable use_reg")
        has_bn = any(st.batchnorms() for st in fp_model.stages)
        if options.use_dc and not has_bn:
            raise ConfigError("distribution correction needs batch-norm layers")
        self.fp = fp_model.eval()
        for p in self.fp.parameters():
            p.requires_grad_(False)
        self.q = copy.deepcopy(self.fp)
        attach_quantizers(self.q, cfg)
        self.cfg = cfg
        self.options = options
        self.seed = seed
        self.progress = progress
        self.calib = calib
        self.q_in = calib
        self.fp_in = calib
        # FP predictions are only materialized when the PD term is on
        self._o_fp = None
        self.states: list[BlockState] = []

    @property
    def o_fp(self) -> torch.Tensor:
        if not self.options.use_pd:
            raise RuntimeError("FP predictions are not available without the PD term")
        if self._o_fp is None:
            self._o_fp = _chunks(self.fp, self.calib)
        return self._o_fp

    def _generator(self, stage: int, salt: int) -> torch.Generator:
        return torch.Generator().manual_seed(self.seed * 1_000_003 + stage * 101 + salt)

    def _init_stage(self, s: int) -> list[str]:
        cfg = self.cfg
        stage = self.q.stages[s]
        prefix = stage_name(self.q, s)
        names = []
        metric = cfg.act_init_metric
        if metric == "auto":
            metric = MetricKind.PD_KL.value if self.options.use_pd else MetricKind.LOCAL_MSE.value
        g = self._generator(s, 7)
        n = len(self.calib)
        sub = torch.randperm(n, generator=g)[: min(cfg.act_init_samples, n)].sort().values
        sample = self.calib[sub]
        for i, layer in enumerate(stage.layers):
            if not isinstance(layer, QuantLayer):
                continue
            name = f"{prefix}.layers.{i}"
            names.append(name)
            wq = layer.weight_quantizer
            if self.options.optimizes:
                wq.init_rounding(layer.weight)
            layer.quant_weight = True
            aq = layer.act_quantizer
            if not aq.passthrough:
                p = search_activation_scale(self.q, name, sample, ScaleGrid.uniform(cfg.act_init_grid), metric, aq.bits)
                aq.set_params(p)
            layer.quant_act = True
        return names

    def reconstruct_block(self, s: int) -> BlockState:
        cfg, opt = self.cfg, self.options
        q_stage, fp_stage = self.q.stages[s], self.fp.stages[s]
        state = BlockState(s, self._init_stage(s))

        if opt.optimizes:
            reg_in = self.fp_in
            if opt.use_dc:
                reg_in = dc.correct_in_chunks(fp_stage, self.fp_in, cfg.lambda_c, cfg.lr_dc, cfg.dc_steps, cfg.dc_chunk)
            target = _chunks(fp_stage, reg_in) if opt.use_reg else None
            self._optimize(s, state, target)
            self._measure_finalization(s, state)

        for layer in q_stage.quant_layers():
            layer.weight_quantizer.finalize(layer.weight)
            layer.act_quantizer.scale.requires_grad_(False)
        set_drop(q_stage, 0.0, None)
        state.finalized = True

        self.q_in = _chunks(q_stage, self.q_in)
        self.fp_in = _chunks(fp_stage, self.fp_in)
        self.states.append(state)
        return state

    def _optimize(self, s: int, state: BlockState, target: Optional[torch.Tensor]) -> None:
        cfg, opt = self.cfg, self.options
        q_stage = self.q.stages[s]
        rounding = [l.weight_quantizer.rounding for l in q_stage.quant_layers() if l.weight_quantizer.rounding is not None]
        scales = [aq.scale for aq in stage_activation_quantizers(q_stage)]
        for sc in scales:
            sc.requires_grad_(True)
        adam = Adam([(r.theta, cfg.lr_round) for r in rounding] + [(sc, cfg.lr_scale) for sc in scales])
        schedule = BetaSchedule(cfg.iterations, cfg.warmup, cfg.beta_start, cfg.beta_end)
        batch_gen = self._generator(s, 1)
        drop_gen = self._generator(s, 2)
        drop = cfg.drop_prob if opt.use_drop else 0.0
        o_fp = self.o_fp if opt.use_pd else None
        n = len(self.q_in)
        q_stage.train(False)

        for it in range(cfg.iterations):
            idx = torch.randint(n, (cfg.batch_size,), generator=batch_gen)
            x = self.q_in[idx]
            zero = x.new_zeros(())
            reg = pd = zero
            out_plain = None
            if opt.use_reg:
                set_drop(q_stage, drop, drop_gen)
                out_reg = q_stage(x)
                set_drop(q_stage, 0.0, None)
                reg = local_mse(out_reg, target[idx])
                if drop == 0.0:
                    out_plain = out_reg
            if opt.use_pd and it % cfg.pd_every == 0:
                if out_plain is None:
                    out_plain = q_stage(x)
                pred = forward_partial(self.fp, s, out_plain)
                pd = pd_kl(Prediction(o_fp[idx], cfg.temperature), pred)
            beta = schedule(it)
            rnd = zero
            if rounding and schedule.active(it):
                rnd = cfg.round_weight * sum(rounding_regularizer(r, beta) for r in rounding)
            loss = pd + cfg.lambda_r * reg + rnd if opt.use_reg else pd + rnd
            if not bool(torch.isfinite(loss)):
                raise ReconstructionError(
                    f"stage {s}: loss became non-finite at iteration {it}",
                    {"stage": s, "iteration": it, "pd": pd.item(), "reg": reg.item(), "round": rnd.item(),
                     "recent": state.trajectory[-5:]},
                )
            adam.zero_grad()
            if loss.requires_grad:
                loss.backward()
                try:
                    adam.step()
                except NonFiniteError as exc:
                    raise ReconstructionError(f"stage {s}: non-finite gradient at iteration {it}", {"stage": s, "iteration": it}) from exc
            with torch.no_grad():
                for sc in scales:
                    sc.clamp_(min=SCALE_FLOOR)
            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                entry = {"stage": s, "iteration": it, "pd": pd.item(), "reg": reg.item(), "round": rnd.item(),
                         "beta": beta, "loss": loss.item()}
                state.trajectory.append(entry)
                if self.progress is not None:
                    self.progress(entry)
        for r in rounding:
            r.optimized = True
        for sc in scales:
            sc.requires_grad_(False)

    def _measure_finalization(self, s: int, state: BlockState) -> None:
        q_stage = self.q.stages[s]
        hs = [l.weight_quantizer.rounding.h().detach().reshape(-1)
              for l in q_stage.quant_layers() if l.weight_quantizer.rounding is not None]
        if not hs:
            return
        h = torch.cat(hs)
        state.saturated_fraction = float(((2 * h - 1).abs() > 0.99).float().mean())
        x = self.q_in[: min(256, len(self.q_in))]
        with torch.no_grad():
            soft = q_stage(x)
            for l in q_stage.quant_layers():
                if l.weight_quantizer.rounding is not None:
                    l.weight_quantizer.mode = "hard"
            hard = q_stage(x)
            for l in q_stage.quant_layers():
                if l.weight_quantizer.rounding is not None:
                    l.weight_quantizer.mode = "soft"
        denom = float(soft.norm())
        state.soft_hard_rel_change = float((hard - soft).norm()) / denom if denom > 0 else float((hard - soft).norm())

    def run(self) -> ModelGraph:
        for s in range(len(self.q.stages)):
            self.reconstruct_block(s)
        return self.q.eval()


def reconstruct_block(recon: Reconstructor, l: int) -> BlockState:
    return recon.reconstruct_block(l)


def quantize_model(
    model: ModelGraph,
    calib: torch.Tensor,
    cfg: ReconConfig,
    options: QuantOptions = QuantOptions(),
    seed: int = 0,
    progress: Optional[Callable[[dict], None]] = None,
) -> tuple[ModelGraph, list[BlockState]]:
    """Quantize every stage in order; returns the quantized model and per-stage states."""
    recon = Reconstructor(model, calib, cfg, options, seed, progress)
    qmodel = recon.run()
    return qmodel, recon.states


def smoothed_non_increasing(trajectory: list[dict], key: str = "loss", window: int = 100, tol: float = 0.05) -> bool:
    """Whether the windowed mean of ``key`` over the second half never rises by more than ``tol`` (relative)."""
    vals = [e[key] for e in trajectory]
    half = vals[len(vals) // 2 :]
    if len(half) < 2:
        return True
    w = max(1, min(window, len(half)))
    means = [sum(half[i : i + w]) / w for i in range(0, len(half) - w + 1, w)]
    return all(b <= a * (1 + tol) + 1e-12 for a, b in zip(means, means[1:]))


def config_dict(cfg: ReconConfig) -> dict:
    return asdict(cfg)
