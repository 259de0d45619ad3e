"""Checked tensor primitives.

Tensors are plain ``torch.Tensor`` objects in float32; reverse-mode
differentiation is torch autograd, whose graph is built per step and freed by
``backward``.  The functions here add the shape contracts and the finiteness
guard that the rest of the package relies on.
"""
from __future__ import annotations

import operator
from typing import Callable, Union

import torch
import torch.nn.functional as F

DTYPE = torch.float32

Scalar = Union[int, float]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_ELEMENTWISE: dict[str, Callable] = {
    "add": operator.add,
    "sub": operator.sub,
    "mul": operator.mul,
    "div": operator.truediv,
}


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def _is_scalar(b) -> bool:
    return isinstance(b, (int, float)) or (isinstance(b, torch.Tensor) and b.dim() == 0)


def elementwise(kind: str, a: torch.Tensor, b: Union[torch.Tensor, Scalar]) -> torch.Tensor:
    """Apply ``kind`` in {add, sub, mul, div} to equal shapes or tensor-with-scalar."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    if not _is_scalar(b) and tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{kind}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return check_finite(fn(a, b), kind)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape[1]} vs {b.shape[0]}")
    return check_finite(a @ b, "matmul")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(
    x: torch.Tensor,
    w: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride/pad: stride={stride}, pad={pad}")
    if x.dim() != 4 or w.dim() != 4:
        raise ShapeError("conv2d expects x[B,Cin,H,W] and w[Cout,Cin,kh,kw]")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    kh, kw = w.shape[2:]
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeError("kernel does not fit the padded input")
    return check_finite(F.conv2d(x, w, bias, stride=stride, padding=pad), "conv2d")


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/dt into ``.grad`` of every reachable leaf with requires_grad."""
    if loss.dim() != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    check_finite(loss, "loss")
    loss.backward()
