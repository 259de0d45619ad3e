"""Adam update used for scales, rounding variables and corrected activations."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .tensor_core import NonFiniteError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: torch.Tensor | None = None
    v: torch.Tensor | None = None


def optimizer_step(param: torch.Tensor, grad: torch.Tensor, state: AdamState, lr: float) -> torch.Tensor:
    """One bias-corrected Adam update; returns the new parameter value."""
    if tuple(param.shape) != tuple(grad.shape):
        raise ValueError("parameter and gradient shapes differ")
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteError("non-finite gradient")
    if state.m is None:
        state.m = torch.zeros_like(param)
        state.v = torch.zeros_like(param)
    state.step += 1
    state.m = BETA1 * state.m + (1 - BETA1) * grad
    state.v = BETA2 * state.v + (1 - BETA2) * grad * grad
    m_hat = state.m / (1 - BETA1**state.step)
    v_hat = state.v / (1 - BETA2**state.step)
    return param - lr * m_hat / (torch.sqrt(v_hat) + EPS)


@dataclass
class Adam:
    """In-place Adam over a list of leaf tensors, each with its own learning rate."""

    groups: list[tuple[torch.Tensor, float]]
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        self.states = [AdamState() for _ in self.groups]

    def zero_grad(self) -> None:
        for p, _ in self.groups:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for (p, lr), st in zip(self.groups, self.states):
            if p.grad is None:
                continue
            p.copy_(optimizer_step(p, p.grad, st, lr))
