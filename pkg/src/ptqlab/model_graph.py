"""Small feed-forward networks partitioned into reconstruction blocks.

A :class:`ModelGraph` is ``stem -> blocks[0] -> ... -> blocks[-1] -> head``.
The stem and every body block are :class:`Block` objects; the head is a
parameter-free softmax producing a :class:`~ptqlab.metrics.Prediction`.
For reconstruction the stem is stage 0 and ``blocks[k]`` is stage ``k + 1``,
so the FP continuation after stage ``s`` is ``forward_partial(model, s, a)``.

File format (all integers little-endian)::

    magic    4 bytes   b"PTQG"
    version  uint32    FORMAT_VERSION
    hlen     uint32    length of the JSON header in bytes
    header   hlen      UTF-8 JSON: {"topology": ..., "tensors": [...]}
    payload            raw little-endian tensor bytes, in header order
    digest   32 bytes  SHA-256 of everything above

Each tensor entry is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with
``offset`` relative to the start of the payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import tensor_core as tc
from .metrics import Prediction
from .quantizer import ActQuantizer, WeightQuantizer

MAGIC = b"PTQG"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


# --------------------------------------------------------------------------
# layers


class QuantLayer(nn.Module):
    """Conv or linear layer with optional input-activation and weight quantizers."""

    kind = ""

    def __init__(self):
        super().__init__()
        self.weight_quantizer: Optional[WeightQuantizer] = None
        self.act_quantizer: Optional[ActQuantizer] = None
        self.quant_weight = False
        self.quant_act = False

    def effective_weight(self) -> torch.Tensor:
        if self.quant_weight and self.weight_quantizer is not None:
            return self.weight_quantizer(self.weight)
        return self.weight

    def quantize_input(self, x: torch.Tensor) -> torch.Tensor:
        if self.quant_act and self.act_quantizer is not None:
            return self.act_quantizer(x)
        return x


class Conv(QuantLayer):
    kind = "conv"

    def __init__(self, weight: torch.Tensor, bias: Optional[torch.Tensor] = None, stride: int = 1, pad: int = 0):
        super().__init__()
        self.weight = nn.Parameter(weight.to(tc.DTYPE))
        self.bias = None if bias is None else nn.Parameter(bias.to(tc.DTYPE))
        self.stride = stride
        self.pad = pad

    @classmethod
    def init(cls, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0, bias: bool = False, generator=None):
        fan_in = cin * k * k
        w = torch.randn(cout, cin, k, k, generator=generator) * (2.0 / fan_in) ** 0.5
        return cls(w, torch.zeros(cout) if bias else None, stride, pad)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        return tc.conv2d(self.quantize_input(x), self.effective_weight(), self.bias, self.stride, self.pad)

    def attrs(self):
        return {"stride": self.stride, "pad": self.pad}


class Linear(QuantLayer):
    kind = "linear"

    def __init__(self, weight: torch.Tensor, bias: Optional[torch.Tensor] = None):
        super().__init__()
        self.weight = nn.Parameter(weight.to(tc.DTYPE))
        self.bias = None if bias is None else nn.Parameter(bias.to(tc.DTYPE))

    @classmethod
    def init(cls, fin: int, fout: int, bias: bool = True, generator=None):
        w = torch.randn(fout, fin, generator=generator) * (2.0 / fin) ** 0.5
        return cls(w, torch.zeros(fout) if bias else None)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        y = tc.matmul(self.quantize_input(x), self.effective_weight().t())
        return y if self.bias is None else y + self.bias

    def attrs(self):
        return {}


class BatchNorm(nn.Module):
    """Batch norm over channel dim 1 with explicit running statistics.

    Training mode normalizes with biased batch variance and updates the
    running variance with the unbiased estimate.
    """

    kind = "batchnorm"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def _shape(self, x):
        return [1, -1] + [1] * (x.dim() - 2)

    def forward(self, x):
        dims = [d for d in range(x.dim()) if d != 1]
        if self.training:
            mean = x.mean(dim=dims)
            var = x.var(dim=dims, unbiased=False)
            n = x.numel() // x.shape[1]
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1 - m).add_(m * mean)
                self.running_var.mul_(1 - m).add_(m * var * n / max(n - 1, 1))
        else:
            mean, var = self.running_mean, self.running_var
        shape = self._shape(x)
        xn = (x - mean.reshape(shape)) / torch.sqrt(var.reshape(shape) + self.eps)
        return tc.check_finite(xn * self.weight.reshape(shape) + self.bias.reshape(shape), "batchnorm")

    def attrs(self):
        return {"eps": self.eps, "momentum": self.momentum}


class ReLU(nn.Module):
    kind = "relu"

    def forward(self, x):
        return torch.relu(x)

    def attrs(self):
        return {}


class AddResidual(nn.Module):
    """Adds the block input to the running activation."""

    kind = "add"

    def forward(self, x, block_input):
        if block_input is None:
            raise ValueError("residual add needs the block input")
        return tc.elementwise("add", x, block_input)

    def attrs(self):
        return {}


class AvgPool(nn.Module):
    """Global average pool: [B, C, H, W] -> [B, C]."""

    kind = "avgpool"

    def forward(self, x):
        return x.mean(dim=(2, 3))

    def attrs(self):
        return {}


class SoftmaxHead(nn.Module):
    kind = "softmax"

    def __init__(self, temperature: float = 1.0):
        super().__init__()
        self.temperature = temperature

    def forward(self, logits):
        return Prediction(logits, self.temperature)


# --------------------------------------------------------------------------
# blocks and graph


class Block(nn.Module):
    def __init__(self, layers: Sequence[nn.Module], skip: bool = False):
        super().__init__()
        self.layers = nn.ModuleList(layers)
        self.skip = skip
        has_add = any(isinstance(l, AddResidual) for l in layers)
        if has_add != skip:
            raise ValueError("a block has a residual add iff its skip flag is set")

    def forward(self, x, start: int = 0, block_input: Optional[torch.Tensor] = None):
        """Run layers[start:]; when resuming mid-block pass the original block input."""
        if start == 0:
            block_input = x
        for layer in self.layers[start:]:
            x = layer(x, block_input) if isinstance(layer, AddResidual) else layer(x)
        return x

    def bn_inputs(self, x) -> list[torch.Tensor]:
        """Inputs seen by every batch-norm layer, in order (differentiable)."""
        seen = []
        block_input = x
        last_bn = max((i for i, l in enumerate(self.layers) if isinstance(l, BatchNorm)), default=-1)
        for i, layer in enumerate(self.layers[: last_bn + 1]):
            if isinstance(layer, BatchNorm):
                seen.append(x)
            x = layer(x, block_input) if isinstance(layer, AddResidual) else layer(x)
        return seen

    def batchnorms(self) -> list[BatchNorm]:
        return [l for l in self.layers if isinstance(l, BatchNorm)]

    def quant_layers(self) -> list[QuantLayer]:
        return [l for l in self.layers if isinstance(l, QuantLayer)]


class ModelGraph(nn.Module):
    def __init__(
        self,
        stem: Block,
        blocks: Sequence[Block],
        input_shape: Sequence[int],
        num_classes: int,
        temperature: float = 1.0,
    ):
        super().__init__()
        self.stem = stem
        self.blocks = nn.ModuleList(blocks)
        self.head = SoftmaxHead(temperature)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes

    @property
    def stages(self) -> list[Block]:
        return [self.stem, *self.blocks]

    def check_input(self, x: torch.Tensor) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise tc.ShapeError(f"input shape {tuple(x.shape[1:])} != model input {self.input_shape}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        if x.shape[-1] != self.num_classes or x.dim() != 2:
            raise tc.ShapeError(f"network produced {tuple(x.shape)}, expected [B, {self.num_classes}]")
        return x

    def run_stages(self, x: torch.Tensor, stop: int) -> torch.Tensor:
        """Output of stages [0, stop)."""
        for stage in self.stages[:stop]:
            x = stage(x)
        return x

    def quant_layers(self) -> Iterator[tuple[str, QuantLayer]]:
        for name, m in self.named_modules():
            if isinstance(m, QuantLayer):
                yield name, m

    def locate(self, layer_name: str) -> tuple[int, int]:
        """(stage index, index within the stage) of a named layer."""
        for s, stage in enumerate(self.stages):
            for i, layer in enumerate(stage.layers):
                if stage_name(self, s) + f".layers.{i}" == layer_name:
                    return s, i
        raise KeyError(f"no layer named {layer_name!r}")


def stage_name(model: ModelGraph, s: int) -> str:
    return "stem" if s == 0 else f"blocks.{s - 1}"


def forward_fp(model: ModelGraph, x: torch.Tensor) -> Prediction:
    return model.head(model(x))


def forward_partial(model: ModelGraph, from_block: int, a: torch.Tensor) -> Prediction:
    """FP continuation from the input of ``blocks[from_block]`` to the prediction.

    ``from_block == len(model.blocks)`` treats ``a`` as the logits.
    """
    if not 0 <= from_block <= len(model.blocks):
        raise IndexError(f"block index {from_block} outside [0, {len(model.blocks)}]")
    for block in model.blocks[from_block:]:
        a = block(a)
    if a.dim() != 2 or a.shape[-1] != model.num_classes:
        raise tc.ShapeError(f"activation {tuple(a.shape)} does not map to {model.num_classes} logits")
    return model.head(a)


# --------------------------------------------------------------------------
# serialization

_LAYER_TYPES = {cls.kind: cls for cls in (Conv, Linear, BatchNorm, ReLU, AddResidual, AvgPool)}


def _layer_topology(layer: nn.Module) -> dict:
    entry = {"kind": layer.kind, "attrs": layer.attrs()}
    if isinstance(layer, BatchNorm):
        entry["channels"] = layer.channels
    if isinstance(layer, QuantLayer):
        entry["has_bias"] = layer.bias is not None
        entry["weight_shape"] = list(layer.weight.shape)
        wq, aq = layer.weight_quantizer, layer.act_quantizer
        entry["quant"] = {
            "weight": None
            if wq is None
            else {"bits": wq.bits, "mode": wq.mode, "enabled": layer.quant_weight, "has_mask": wq.mask is not None},
            "act": None if aq is None else {"bits": aq.bits, "enabled": layer.quant_act},
        }
        if wq is not None and wq.mode == "soft":
            raise ModelFormatError("finalize soft rounding before saving")
    return entry


def model_topology(model: ModelGraph) -> dict:
    return {
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "temperature": model.head.temperature,
        "stages": [
            {"skip": st.skip, "layers": [_layer_topology(l) for l in st.layers]} for st in model.stages
        ],
    }


def _state_tensors(model: ModelGraph) -> list[tuple[str, torch.Tensor]]:
    out = []
    for name, t in model.state_dict().items():
        out.append((name, t.detach().cpu().contiguous()))
    return out


_DTYPES = {"float32": (torch.float32, "<f4"), "uint8": (torch.uint8, "|u1")}


def _dtype_name(t: torch.Tensor) -> str:
    for name, (td, _) in _DTYPES.items():
        if t.dtype == td:
            return name
    raise ModelFormatError(f"unsupported tensor dtype {t.dtype}")


def save_model(model: ModelGraph, path) -> None:
    tensors = _state_tensors(model)
    table, chunks, offset = [], [], 0
    for name, t in tensors:
        dname = _dtype_name(t)
        raw = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes()
        table.append({"name": name, "dtype": dname, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"topology": model_topology(model), "tensors": table}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def _build_layer(entry: dict) -> nn.Module:
    kind = entry["kind"]
    if kind not in _LAYER_TYPES:
        raise ModelFormatError(f"unknown layer kind {kind!r}")
    attrs = entry.get("attrs", {})
    if kind == "conv":
        shape = entry["weight_shape"]
        bias = torch.zeros(shape[0]) if entry["has_bias"] else None
        layer = Conv(torch.zeros(shape), bias, **attrs)
    elif kind == "linear":
        shape = entry["weight_shape"]
        bias = torch.zeros(shape[0]) if entry["has_bias"] else None
        layer = Linear(torch.zeros(shape), bias)
    elif kind == "batchnorm":
        layer = BatchNorm(entry["channels"], **attrs)
    else:
        layer = _LAYER_TYPES[kind]()
    quant = entry.get("quant")
    if quant:
        c = entry["weight_shape"][0]
        if quant["weight"] is not None:
            wq = WeightQuantizer(quant["weight"]["bits"], torch.ones(c), torch.zeros(c))
            wq.mode = quant["weight"]["mode"]
            if quant["weight"]["has_mask"]:
                wq.mask = torch.zeros(entry["weight_shape"], dtype=torch.uint8)
            layer.weight_quantizer = wq
            layer.quant_weight = quant["weight"]["enabled"]
        if quant["act"] is not None:
            layer.act_quantizer = ActQuantizer(quant["act"]["bits"])
            layer.quant_act = quant["act"]["enabled"]
    return layer


def model_from_topology(topo: dict) -> ModelGraph:
    stages = [Block([_build_layer(e) for e in st["layers"]], st["skip"]) for st in topo["stages"]]
    return ModelGraph(stages[0], stages[1:], topo["input_shape"], topo["num_classes"], topo["temperature"])


def load_model(path) -> ModelGraph:
    data = Path(path).read_bytes()
    if len(data) < 12 + 32 or data[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic or truncated)")
    body, digest = data[:-32], data[-32:]
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch: file is corrupt or truncated")
    header = json.loads(body[12 : 12 + hlen].decode())
    payload = memoryview(body)[12 + hlen :]
    model = model_from_topology(header["topology"])
    state = {}
    for entry in header["tensors"]:
        td, npd = _DTYPES[entry["dtype"]]
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(npd)).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy()).to(td)
    model.load_state_dict(state, strict=True)
    for st in model.stages:
        for bn in st.batchnorms():
            if not bool((bn.running_var > 0).all()):
                raise ModelFormatError("batch-norm running variance must be strictly positive")
    return model.eval()
