"""Uniform affine fake quantization, learned rounding and scale gradients.

Grid: q_min = 0, q_max = 2**bits - 1, zero point Z in [q_min, q_max].
Rounding is half-away-from-zero everywhere so results are bit-reproducible.
Bit widths of 32 or more are treated as pass-through (no quantization).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .tensor_core import DTYPE, NonFiniteError, ShapeError, check_finite

log = logging.getLogger(__name__)

GAMMA = -0.1
ZETA = 1.1
PASS_THROUGH_BITS = 32
DEGENERATE_SCALE = 1e-8


class DegenerateRangeError(ValueError):
    pass


def round_half_away(t: torch.Tensor) -> torch.Tensor:
    # trunc + fractional test avoids the |t| + 0.5 rounding hazard in float32
    whole = torch.trunc(t)
    frac = t - whole
    return whole + torch.where(frac.abs() >= 0.5, torch.sign(t), torch.zeros_like(t))


@dataclass
class QuantParams:
    """Scale and zero point for one quantizer.

    ``scale``/``zero_point`` are 0-d for per-tensor quantization or 1-D along
    ``axis`` for per-channel quantization.
    """

    scale: torch.Tensor
    zero_point: torch.Tensor
    bits: int
    axis: Optional[int] = None

    q_min = 0

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if self.scale.shape != self.zero_point.shape:
            raise ShapeError("scale and zero_point shapes differ")
        if (self.axis is None) != (self.scale.dim() == 0):
            raise ShapeError("per-channel params need an axis and 1-D scale")
        with torch.no_grad():
            if bool((self.scale <= 0).any()) or not bool(torch.isfinite(self.scale).all()):
                raise ValueError("scale must be positive and finite")
            if bool(((self.zero_point < self.q_min) | (self.zero_point > self.q_max)).any()):
                raise ValueError("zero point outside the integer grid")

    @property
    def q_max(self) -> int:
        return 2**self.bits - 1

    def broadcast(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.axis is None:
            return self.scale, self.zero_point
        shape = [1] * x.dim()
        shape[self.axis] = -1
        return self.scale.reshape(shape), self.zero_point.reshape(shape)


def _reduce_dims(x: torch.Tensor, axis: Optional[int]) -> list[int]:
    return [d for d in range(x.dim()) if d != axis]


def range_params(
    x_min: torch.Tensor,
    x_max: torch.Tensor,
    bits: int,
    axis: Optional[int] = None,
    allow_degenerate: bool = False,
) -> QuantParams:
    """Min-max params for the given range, widened to contain zero."""
    lo = torch.minimum(x_min.double(), torch.zeros_like(x_min, dtype=torch.float64))
    hi = torch.maximum(x_max.double(), torch.zeros_like(x_max, dtype=torch.float64))
    levels = 2**bits - 1
    width = hi - lo
    if bool((width <= 0).any()):
        if not allow_degenerate:
            raise DegenerateRangeError("quantization range has zero width")
        width = torch.where(width > 0, width, torch.full_like(width, DEGENERATE_SCALE * levels))
    scale = width / levels
    zp = round_half_away(-lo * levels / width).clamp(0, levels)
    return QuantParams(scale.to(DTYPE), zp.to(DTYPE), bits, axis)


def compute_range_scale(
    x: torch.Tensor,
    bits: int,
    axis: Optional[int] = None,
    allow_degenerate: bool = False,
) -> QuantParams:
    if x.numel() == 0:
        raise ValueError("cannot compute a range for an empty tensor")
    if axis is None:
        x_min, x_max = x.min(), x.max()
    else:
        dims = _reduce_dims(x, axis)
        x_min, x_max = x.amin(dim=dims), x.amax(dim=dims)
    if bool((x_max == x_min).any()) and not allow_degenerate:
        raise DegenerateRangeError("constant tensor: x_max == x_min")
    return range_params(x_min, x_max, bits, axis, allow_degenerate)


def _scale_grad_terms(u: torch.Tensor, zp: torch.Tensor, q_min: int, q_max: int) -> torch.Tensor:
    # d(dequantized)/dS per element with straight-through rounding
    lo, hi = q_min - zp, q_max - zp
    mid = round_half_away(u) - u
    return torch.where(u >= hi, hi.expand_as(u), torch.where(u <= lo, lo.expand_as(u), mid))


def scale_gradient(x: torch.Tensor, p: QuantParams, upstream: torch.Tensor) -> torch.Tensor:
    """dL/dS given dL/d(fake_quantize(x)); summed per quantization group."""
    if tuple(upstream.shape) != tuple(x.shape):
        raise ShapeError("upstream gradient must match x")
    if bool((p.scale <= 0).any()):
        raise ValueError("scale must be positive")
    s, z = p.broadcast(x)
    terms = upstream * _scale_grad_terms(x / s, z, p.q_min, p.q_max)
    if p.axis is None:
        return terms.sum()
    return terms.sum(dim=_reduce_dims(x, p.axis))


class _FakeQuantFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale, zp, q_min, q_max, axis):
        u = x / scale
        q = torch.clamp(round_half_away(u) + zp, q_min, q_max)
        ctx.save_for_backward(u, zp)
        ctx.bounds = (q_min, q_max, axis, scale.shape)
        return (q - zp) * scale

    @staticmethod
    def backward(ctx, grad):
        u, zp = ctx.saved_tensors
        q_min, q_max, axis, scale_shape = ctx.bounds
        grad_x = grad_s = None
        if ctx.needs_input_grad[0]:
            inside = (u > q_min - zp) & (u < q_max - zp)
            grad_x = grad * inside.to(grad.dtype)
        if ctx.needs_input_grad[1]:
            terms = grad * _scale_grad_terms(u, zp, q_min, q_max)
            if axis is None:
                grad_s = terms.sum().reshape(scale_shape)
            else:
                grad_s = terms.sum(dim=_reduce_dims(u, axis), keepdim=True).reshape(scale_shape)
        return grad_x, grad_s, None, None, None, None


def fake_quantize(x: torch.Tensor, p: QuantParams) -> torch.Tensor:
    """Quantize-dequantize ``x``: S * (clamp(round(x / S) + Z, q_min, q_max) - Z)."""
    check_finite(x, "fake_quantize input")
    if p.bits >= PASS_THROUGH_BITS:
        return x
    s, z = p.broadcast(x)
    return _FakeQuantFn.apply(x, s, z, p.q_min, p.q_max, p.axis)


def random_drop_mix(
    a_q: torch.Tensor, a_fp: torch.Tensor, p: float, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Per element: full-precision value with probability ``p``, else the quantized one."""
    if tuple(a_q.shape) != tuple(a_fp.shape):
        raise ShapeError("drop mix operands differ in shape")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability {p} outside [0, 1]")
    if p == 0.0:
        return a_q
    take_fp = torch.rand(a_q.shape, generator=generator, dtype=a_q.dtype) < p
    return torch.where(take_fp, a_fp, a_q)


# --------------------------------------------------------------------------
# learned rounding


class RoundingVars(nn.Module):
    """Per-weight rounding variables theta and the rectified sigmoid h(theta)."""

    def __init__(self, theta: torch.Tensor, beta: float = 20.0, gamma: float = GAMMA, zeta: float = ZETA):
        super().__init__()
        self.theta = nn.Parameter(theta.to(DTYPE).clone())
        self.beta = beta
        self.gamma = gamma
        self.zeta = zeta
        self.optimized = False

    @classmethod
    def from_weight(cls, w: torch.Tensor, p: QuantParams, **kw) -> "RoundingVars":
        # theta such that h(theta) equals the fractional part of w / S
        s, _ = p.broadcast(w)
        u = (w / s).detach()
        rest = u - torch.floor(u)
        gamma, zeta = kw.get("gamma", GAMMA), kw.get("zeta", ZETA)
        sig = (rest - gamma) / (zeta - gamma)
        return cls(torch.log(sig / (1 - sig)), **kw)

    def h(self) -> torch.Tensor:
        return torch.clamp(torch.sigmoid(self.theta) * (self.zeta - self.gamma) + self.gamma, 0, 1)

    def hard(self) -> torch.Tensor:
        return (self.h() >= 0.5).to(DTYPE)


def adaround_fake_quantize(
    w: torch.Tensor, p: QuantParams, r: Optional[RoundingVars], mode: str = "soft", mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Dequantized S * (clamp(floor(w / S) + h + Z) - Z) with h from theta.

    ``mode='hard'`` binarizes h at 0.5 (or uses a stored ``mask``).
    """
    if p.bits >= PASS_THROUGH_BITS:
        return w
    s, z = p.broadcast(w)
    base = torch.floor(w / s)
    if mode == "soft":
        if r is None or tuple(r.theta.shape) != tuple(w.shape):
            raise ShapeError("rounding variables must match the weight")
        up = r.h()
    elif mode == "hard":
        if mask is not None:
            up = mask.to(DTYPE)
        else:
            if r is None:
                raise ValueError("hard rounding needs theta or a stored mask")
            if not r.optimized:
                log.info("hard rounding requested before theta optimization finished")
            up = r.hard()
    else:
        raise ValueError(f"unknown rounding mode {mode!r}")
    q = torch.clamp(base + up + z, p.q_min, p.q_max)
    return (q - z) * s


def rounding_regularizer(r: RoundingVars, beta: Optional[float] = None) -> torch.Tensor:
    beta = r.beta if beta is None else beta
    if beta <= 0:
        raise ValueError("beta must be positive")
    return (1 - (2 * r.h() - 1).abs().pow(beta)).sum()


@dataclass
class BetaSchedule:
    """Warm-up without rounding penalty, then beta decays linearly start -> end."""

    iterations: int
    warmup: float = 0.2
    start: float = 20.0
    end: float = 2.0

    @property
    def warmup_iters(self) -> int:
        return int(self.warmup * self.iterations)

    def active(self, it: int) -> bool:
        return it >= self.warmup_iters

    def __call__(self, it: int) -> float:
        w = self.warmup_iters
        if it < w:
            return self.start
        span = max(self.iterations - 1 - w, 1)
        rel = min((it - w) / span, 1.0)
        return self.end + (self.start - self.end) * (1.0 - rel)


# --------------------------------------------------------------------------
# stateful quantizers attached to conv / linear layers


def mse_channel_params(w: torch.Tensor, bits: int, axis: int = 0, steps: int = 100) -> QuantParams:
    """Per-channel clipping search: shrink [min, max] by n/steps, keep the lowest error."""
    dims = _reduce_dims(w, axis)
    w_min, w_max = w.amin(dim=dims), w.amax(dim=dims)
    best = range_params(w_min, w_max, bits, axis, allow_degenerate=True)
    best_err = (w - fake_quantize(w, best)).pow(2).sum(dim=dims)
    for i in range(1, steps):
        ratio = i / steps
        cand = range_params(w_min * ratio, w_max * ratio, bits, axis, allow_degenerate=True)
        err = (w - fake_quantize(w, cand)).pow(2).sum(dim=dims)
        better = err < best_err
        if bool(better.any()):
            best = QuantParams(
                torch.where(better, cand.scale, best.scale),
                torch.where(better, cand.zero_point, best.zero_point),
                bits,
                axis,
            )
            best_err = torch.minimum(err, best_err)
    return best


class WeightQuantizer(nn.Module):
    """Per-output-channel weight quantizer with optional learned rounding.

    mode: 'nearest' (plain fake quantization), 'soft' (continuous h) or
    'hard' (binary rounding, from theta or a stored mask).
    """

    def __init__(self, bits: int, scale: torch.Tensor, zero_point: torch.Tensor, axis: int = 0):
        super().__init__()
        self.bits = bits
        self.axis = axis
        self.register_buffer("scale", scale.to(DTYPE).clone())
        self.register_buffer("zero_point", zero_point.to(DTYPE).clone())
        self.register_buffer("mask", None)
        self.rounding: Optional[RoundingVars] = None
        self.mode = "nearest"

    @classmethod
    def calibrate(cls, weight: torch.Tensor, bits: int, method: str = "mse") -> "WeightQuantizer":
        w = weight.detach()
        if bits >= PASS_THROUGH_BITS:
            c = w.shape[0]
            return cls(bits, torch.ones(c), torch.zeros(c))
        if method == "mse":
            p = mse_channel_params(w, bits)
        elif method == "minmax":
            p = compute_range_scale(w, bits, axis=0, allow_degenerate=True)
        else:
            raise ValueError(f"unknown weight scale method {method!r}")
        return cls(bits, p.scale, p.zero_point)

    @property
    def params(self) -> QuantParams:
        return QuantParams(self.scale, self.zero_point, min(self.bits, PASS_THROUGH_BITS), self.axis)

    @property
    def passthrough(self) -> bool:
        return self.bits >= PASS_THROUGH_BITS

    def init_rounding(self, weight: torch.Tensor) -> None:
        if self.passthrough:
            return
        self.rounding = RoundingVars.from_weight(weight.detach(), self.params)
        self.mode = "soft"

    def finalize(self, weight: torch.Tensor) -> None:
        """Freeze rounding to a binary mask; ``nearest`` mode is frozen as nearest rounding."""
        if self.passthrough:
            return
        with torch.no_grad():
            if self.rounding is not None:
                m = self.rounding.hard()
            else:
                s, _ = self.params.broadcast(weight)
                u = weight / s
                m = (round_half_away(u) - torch.floor(u)).to(DTYPE)
        self.mask = m.to(torch.uint8)
        self.rounding = None
        self.mode = "hard"

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        if self.passthrough:
            return w
        if self.mode == "nearest":
            return fake_quantize(w, self.params)
        if self.mode == "hard" and self.mask is not None:
            return adaround_fake_quantize(w, self.params, None, "hard", mask=self.mask)
        return adaround_fake_quantize(w, self.params, self.rounding, self.mode)


class ActQuantizer(nn.Module):
    """Per-tensor activation quantizer with a learnable scale and optional random drop."""

    def __init__(self, bits: int, scale: float = 1.0, zero_point: float = 0.0):
        super().__init__()
        self.bits = bits
        self.scale = nn.Parameter(torch.tensor(float(scale), dtype=DTYPE), requires_grad=False)
        self.register_buffer("zero_point", torch.tensor(float(zero_point), dtype=DTYPE))
        self.enabled = True
        self.drop_prob = 0.0
        self.generator: Optional[torch.Generator] = None

    @property
    def passthrough(self) -> bool:
        return self.bits >= PASS_THROUGH_BITS

    @property
    def params(self) -> QuantParams:
        return QuantParams(self.scale, self.zero_point, min(self.bits, PASS_THROUGH_BITS))

    def set_params(self, p: QuantParams) -> None:
        if p.axis is not None:
            raise ShapeError("activation quantizers are per-tensor")
        with torch.no_grad():
            self.scale.copy_(p.scale)
            self.zero_point.copy_(p.zero_point)
        self.bits = p.bits

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.enabled or self.passthrough:
            return x
        xq = fake_quantize(x, self.params)
        if self.drop_prob > 0:
            xq = random_drop_mix(xq, x, self.drop_prob, self.generator)
        return xq


__all__ = [
    "QuantParams",
    "RoundingVars",
    "BetaSchedule",
    "WeightQuantizer",
    "ActQuantizer",
    "DegenerateRangeError",
    "NonFiniteError",
    "round_half_away",
    "range_params",
    "compute_range_scale",
    "fake_quantize",
    "scale_gradient",
    "adaround_fake_quantize",
    "rounding_regularizer",
    "random_drop_mix",
    "mse_channel_params",
]
