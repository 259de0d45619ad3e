"""Grid search of normalized activation (and weight) scaling factors.

A candidate factor ``n_s`` quantizes with the min-max range shrunk by
``n_s``, i.e. scale ``n_s * (x_max - x_min) / (2**b - 1)``; the zero point is
recomputed from the shrunk range.  Local metrics compare the layer input with
its quantized version.  Global (``pd_*``) metrics feed the quantized input
through the target layer and the rest of the full-precision network and
compare against the same path without quantizing that input.
"""
from __future__ import annotations

import contextlib
import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import torch

from . import metrics as M
from .metrics import MetricKind, Prediction
from .model_graph import AddResidual, ModelGraph, QuantLayer, forward_partial
from .quantizer import ActQuantizer, QuantParams, WeightQuantizer, fake_quantize, range_params

TASK_LOSS = "task_ce"
CSV_HEADER = ["layer", "n_s", "metric", "value", "value_normalized"]


@dataclass(frozen=True)
class ScaleGrid:
    factors: tuple[float, ...]

    def __post_init__(self):
        f = self.factors
        if not f:
            raise ValueError("empty scale grid")
        if any(x <= 0 or x > 1 for x in f):
            raise ValueError("grid factors must lie in (0, 1]")
        if any(b <= a for a, b in zip(f, f[1:])):
            raise ValueError("grid must be strictly ascending")

    @classmethod
    def uniform(cls, n: int = 64) -> "ScaleGrid":
        return cls(tuple((i + 1) / n for i in range(n)))

    def __len__(self):
        return len(self.factors)

    def params(self, x_min, x_max, bits: int, axis=None) -> list[QuantParams]:
        return [range_params(x_min * f, x_max * f, bits, axis) for f in self.factors]


@dataclass
class SweepRecord:
    layer: str
    n_s: float
    values: dict[str, float] = field(default_factory=dict)
    normalized: dict[str, float] = field(default_factory=dict)


def normalize_min(values: Sequence[float]) -> list[float]:
    """Divide by the minimum so the best candidate reads 1.0 (shift instead if the minimum is 0)."""
    lo = min(values)
    if lo > 0:
        return [v / lo for v in values]
    return [1.0 + (v - lo) for v in values]


def select_index(values: Sequence[float]) -> int:
    """argmin, ties toward the later (larger) grid factor."""
    best = 0
    for i, v in enumerate(values):
        if v <= values[best]:
            best = i
    return best


def _batches(n: int, size: int) -> Iterable[slice]:
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


@contextlib.contextmanager
def _quant_flags(layers: Iterable[QuantLayer], act: bool, weight: bool):
    layers = list(layers)
    saved = [(l.quant_act, l.quant_weight) for l in layers]
    try:
        for l in layers:
            l.quant_act, l.quant_weight = act, weight
        yield
    finally:
        for l, (a, w) in zip(layers, saved):
            l.quant_act, l.quant_weight = a, w


class LayerProbe:
    """Cached inputs of one layer so candidates can be scored cheaply.

    Layers before the target keep their current quantization state; layers
    after it (in the same stage and beyond) run in full precision.
    """

    def __init__(self, model: ModelGraph, layer: str, calib: torch.Tensor, batch_size: int = 256):
        self.model = model
        self.name = layer
        self.stage, self.index = model.locate(layer)
        self.block = model.stages[self.stage]
        self.layer: QuantLayer = self.block.layers[self.index]
        if not isinstance(self.layer, QuantLayer):
            raise TypeError(f"{layer} is not a conv/linear layer")
        self.batch_size = batch_size
        self._later = [l for l in self.block.layers[self.index + 1 :] if isinstance(l, QuantLayer)]
        with torch.no_grad():
            self.stage_in = model.run_stages(calib, self.stage)
            x = self.stage_in
            for j in range(self.index):
                sub = self.block.layers[j]
                x = sub(x, self.stage_in) if isinstance(sub, AddResidual) else sub(x)
            self.x_in = x
            self._saved = (self.layer.quant_act, self.layer.quant_weight)
            with self.fp_rest(act=False):
                self.reference = [self._predict(sl) for sl in _batches(len(calib), batch_size)]

    @contextlib.contextmanager
    def fp_rest(self, act: bool, weight: Optional[bool] = None):
        weight = self._saved[1] if weight is None else weight
        with _quant_flags(self._later, False, False), _quant_flags([self.layer], act, weight):
            yield

    def _predict(self, sl: slice) -> Prediction:
        out = self.block.forward(self.x_in[sl], start=self.index, block_input=self.stage_in[sl])
        return forward_partial(self.model, self.stage, out)

    @torch.no_grad()
    def score(self, kinds: Sequence[str], labels: Optional[torch.Tensor] = None) -> dict:
        """Mean of each metric over the calibration set, for the current quantizer state."""
        totals = {k: 0.0 for k in kinds}
        n = len(self.x_in)
        need_pred = any(k == TASK_LOSS or MetricKind(k).is_global for k in kinds)
        for sl, ref in zip(_batches(n, self.batch_size), self.reference):
            w = (sl.stop - sl.start) / n
            pred = self._predict(sl) if need_pred else None
            for k in kinds:
                if k == TASK_LOSS:
                    v = M.task_loss(pred, labels[sl])
                elif MetricKind(k).is_global:
                    v = M.GLOBAL_METRICS[MetricKind(k)](ref, pred)
                else:
                    xin = self.x_in[sl]
                    v = M.LOCAL_METRICS[MetricKind(k)](xin, self.layer.act_quantizer(xin))
                totals[k] += float(v) * w
        return totals


def _act_range(x: torch.Tensor):
    return x.min(), x.max()


def _ensure_act_quantizer(layer: QuantLayer, bits: int) -> ActQuantizer:
    if layer.act_quantizer is None:
        layer.act_quantizer = ActQuantizer(bits)
    return layer.act_quantizer


def _sweep_act(probe: LayerProbe, grid: ScaleGrid, bits: int, kinds: Sequence[str], labels=None) -> list[dict]:
    aq = _ensure_act_quantizer(probe.layer, bits)
    saved = (QuantParams(aq.scale.detach().clone(), aq.zero_point.clone(), aq.bits), aq.drop_prob, aq.enabled)
    x_min, x_max = _act_range(probe.x_in)
    rows = []
    try:
        aq.drop_prob, aq.enabled = 0.0, True
        with probe.fp_rest(act=True):
            for p in grid.params(x_min, x_max, bits):
                aq.set_params(p)
                rows.append(probe.score(kinds, labels))
    finally:
        aq.set_params(saved[0])
        aq.drop_prob, aq.enabled = saved[1], saved[2]
    return rows


def search_activation_scale(
    model: ModelGraph,
    layer: str,
    calib: torch.Tensor,
    grid: ScaleGrid,
    metric: MetricKind | str,
    bits: int,
    batch_size: int = 256,
) -> QuantParams:
    """Grid factor minimizing ``metric`` for the input-activation quantizer of ``layer``."""
    kind = MetricKind(metric).value
    probe = LayerProbe(model, layer, calib, batch_size)
    rows = _sweep_act(probe, grid, bits, [kind])
    best = select_index([r[kind] for r in rows])
    x_min, x_max = _act_range(probe.x_in)
    return grid.params(x_min, x_max, bits)[best]


def _records(layer: str, grid: ScaleGrid, rows: list[dict]) -> list[SweepRecord]:
    recs = [SweepRecord(layer, f, dict(r)) for f, r in zip(grid.factors, rows)]
    for k in rows[0]:
        for rec, v in zip(recs, normalize_min([r[k] for r in rows])):
            rec.normalized[k] = v
    return recs


def sweep_metrics(
    model: ModelGraph,
    layer: str,
    calib: torch.Tensor,
    grid: ScaleGrid,
    metrics: Sequence[MetricKind | str],
    bits: int,
    labels: Optional[torch.Tensor] = None,
    batch_size: int = 256,
) -> list[SweepRecord]:
    """Every metric at every grid factor for one activation quantizer; min-normalized columns."""
    kinds = [MetricKind(m).value for m in metrics]
    if labels is not None:
        kinds.append(TASK_LOSS)
    probe = LayerProbe(model, layer, calib, batch_size)
    return _records(layer, grid, _sweep_act(probe, grid, bits, kinds, labels))


def sweep_weight_scale(
    model: ModelGraph,
    layer: str,
    calib: torch.Tensor,
    grid: ScaleGrid,
    metrics: Sequence[MetricKind | str],
    bits: int,
    labels: Optional[torch.Tensor] = None,
    per_channel: bool = True,
    batch_size: int = 256,
) -> list[SweepRecord]:
    """Weight-only sweep: the target layer's weights quantized (nearest rounding), activations FP.

    Local metrics compare the weight tensor with its quantized version.
    """
    kinds = [MetricKind(m).value for m in metrics]
    if labels is not None:
        kinds.append(TASK_LOSS)
    probe = LayerProbe(model, layer, calib, batch_size)
    target = probe.layer
    w = target.weight.detach()
    axis = 0 if per_channel else None
    if per_channel:
        dims = list(range(1, w.dim()))
        w_min, w_max = w.amin(dim=dims), w.amax(dim=dims)
    else:
        w_min, w_max = w.min(), w.max()
    saved = target.weight_quantizer
    rows = []
    try:
        with probe.fp_rest(act=False, weight=True):
            for p in grid.params(w_min, w_max, bits, axis):
                c = w.shape[0]
                scale = p.scale if per_channel else p.scale.expand(c)
                zp = p.zero_point if per_channel else p.zero_point.expand(c)
                target.weight_quantizer = WeightQuantizer(bits, scale, zp)
                row = {}
                glob = [k for k in kinds if k == TASK_LOSS or MetricKind(k).is_global]
                if glob:
                    row.update(probe.score(glob, labels))
                for k in kinds:
                    if k not in row:
                        row[k] = float(M.LOCAL_METRICS[MetricKind(k)](w, fake_quantize(w, p)))
                rows.append({k: row[k] for k in kinds})
    finally:
        target.weight_quantizer = saved
    return _records(layer, grid, rows)


def argmin_factor(records: Sequence[SweepRecord], metric: str) -> float:
    return records[select_index([r.values[metric] for r in records])].n_s


def write_sweep_csv(records: Sequence[SweepRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for rec in records:
            for k, v in rec.values.items():
                w.writerow([rec.layer, repr(rec.n_s), k, repr(v), repr(rec.normalized[k])])


def read_sweep_csv(path) -> list[SweepRecord]:
    recs: dict[tuple[str, float], SweepRecord] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected sweep CSV header {reader.fieldnames}")
        for row in reader:
            key = (row["layer"], float(row["n_s"]))
            rec = recs.setdefault(key, SweepRecord(row["layer"], float(row["n_s"])))
            rec.values[row["metric"]] = float(row["value"])
            rec.normalized[row["metric"]] = float(row["value_normalized"])
    return list(recs.values())
