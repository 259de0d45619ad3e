"""End-to-end runs: calibration sampling, quantization, evaluation and artifact emission."""
from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import torch

from .. import dist_correction as dc
from ..metrics import MetricKind
from ..model_graph import ModelGraph, load_model, save_model
from ..reconstruction import BlockState, ConfigError, QuantOptions, ReconConfig, quantize_model
from ..scale_search import ScaleGrid, SweepRecord, sweep_metrics, sweep_weight_scale, write_sweep_csv
from .data import ToyDataset, sample_calibration
from .train import accuracy

log = logging.getLogger(__name__)

INCOMPLETE = "INCOMPLETE"
MODEL_FILE = "quantized.ptqg"
REPORT_FILE = "report.json"
PROGRESS_FILE = "progress.jsonl"
TRAJECTORY_FILE = "trajectory.csv"
CONFIG_FILE = "run_config.json"

# the option grid of the ablation table, in display order
ABLATION_GRID = {
    "Reg": QuantOptions(use_pd=False, use_reg=True, use_dc=False, use_drop=True),
    "PD": QuantOptions(use_pd=True, use_reg=False, use_dc=False, use_drop=False),
    "PD+Reg": QuantOptions(use_pd=True, use_reg=True, use_dc=False, use_drop=True),
    "PD+Reg+DC": QuantOptions(use_pd=True, use_reg=True, use_dc=True, use_drop=True),
}

CALIB_PRESETS = (256, 1024, 4096)


@dataclass
class RunConfig:
    model: str
    data: str
    w_bits: int = 4
    a_bits: int = 4
    recon: dict = field(default_factory=dict)
    options: dict = field(default_factory=lambda: asdict(QuantOptions()))
    # metric used to initialize activation scales ("auto" follows the PD option)
    metric: str = "auto"
    seed: int = 0
    out_dir: str = "run"
    calib_size: int = 1024
    # torch intra-op threads; results are reproducible at a fixed value
    workers: int = 1

    def recon_config(self) -> ReconConfig:
        known = {f.name for f in fields(ReconConfig)}
        unknown = set(self.recon) - known
        if unknown:
            raise ConfigError(f"unknown recon fields: {sorted(unknown)}")
        return ReconConfig(**{**self.recon, "w_bits": self.w_bits, "a_bits": self.a_bits, "act_init_metric": self.metric})

    def quant_options(self) -> QuantOptions:
        return QuantOptions(**self.options)

    def validate(self) -> None:
        if self.metric != "auto":
            MetricKind(self.metric)
        if self.calib_size <= 0:
            raise ConfigError("calib_size must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.recon_config().validate()
        self.quant_options()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EvalReport:
    label: str
    seed: int
    calib_acc: float
    val_acc: float
    fp_val_acc: float
    wall_clock: float
    ablation: list[dict] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.calib_acc - self.val_acc

    def to_dict(self) -> dict:
        return {**asdict(self), "gap": self.gap}


def _write_trajectory(states: Sequence[BlockState], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "iteration", "pd", "reg", "round", "beta", "loss"])
        for st in states:
            for e in st.trajectory:
                w.writerow([e["stage"], e["iteration"], repr(e["pd"]), repr(e["reg"]), repr(e["round"]), repr(e["beta"]), repr(e["loss"])])


def run_pipeline(cfg: RunConfig, fp_model: Optional[ModelGraph] = None, ds: Optional[ToyDataset] = None) -> EvalReport:
    """Quantize, evaluate and write every artifact into ``cfg.out_dir``.

    The directory carries an INCOMPLETE marker until the report is written.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE
    marker.write_text("run started\n")
    (out / CONFIG_FILE).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    torch.set_num_threads(cfg.workers)
    try:
        fp_model = fp_model if fp_model is not None else load_model(cfg.model)
        ds = ds if ds is not None else ToyDataset.load(cfg.data)
        options = cfg.quant_options()
        x_cal, y_cal = sample_calibration(ds, cfg.calib_size, cfg.seed)
        t0 = time.perf_counter()
        with open(out / PROGRESS_FILE, "w") as prog:
            def progress(entry):
                prog.write(json.dumps(entry) + "\n")

            # labels stay here: the quantizer only ever sees x_cal
            qmodel, states = quantize_model(fp_model, x_cal, cfg.recon_config(), options, cfg.seed, progress)
        elapsed = time.perf_counter() - t0
        save_model(qmodel, out / MODEL_FILE)
        _write_trajectory(states, out / TRAJECTORY_FILE)
        report = EvalReport(
            label=options.label,
            seed=cfg.seed,
            calib_acc=accuracy(qmodel, x_cal, y_cal),
            val_acc=accuracy(qmodel, ds.x_val, ds.y_val),
            fp_val_acc=accuracy(fp_model, ds.x_val, ds.y_val),
            wall_clock=elapsed,
        )
        summary = report.to_dict()
        summary["blocks"] = [
            {"stage": s.stage, "layers": s.layers, "saturated_fraction": s.saturated_fraction,
             "soft_hard_rel_change": s.soft_hard_rel_change}
            for s in states
        ]
        (out / REPORT_FILE).write_text(json.dumps(summary, indent=2))
    except BaseException as exc:
        marker.write_text(f"run failed: {type(exc).__name__}: {exc}\n")
        raise
    marker.unlink()
    return report


# -- ablation ---------------------------------------------------------------

ABLATION_HEADER = ["option", "seed", "calib_acc", "val_acc", "gap", "wall_clock"]
SUMMARY_HEADER = ["option", "runs", "val_mean", "val_std", "calib_mean", "gap_mean", "gap_std"]


def _std(xs: Sequence[float]) -> float:
    return statistics.stdev(xs) if len(xs) > 1 else 0.0


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Per-option mean/std over seeds, in first-seen option order."""
    order = list(dict.fromkeys(r["option"] for r in rows))
    out = []
    for opt in order:
        sel = [r for r in rows if r["option"] == opt]
        vals = [r["val_acc"] for r in sel]
        gaps = [r["gap"] for r in sel]
        out.append({
            "option": opt, "runs": len(sel),
            "val_mean": statistics.fmean(vals), "val_std": _std(vals),
            "calib_mean": statistics.fmean(r["calib_acc"] for r in sel),
            "gap_mean": statistics.fmean(gaps), "gap_std": _std(gaps),
        })
    return out


def _write_rows(rows: Sequence[dict], header: Sequence[str], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def ablate(
    base: RunConfig,
    seeds: Sequence[int],
    option_names: Sequence[str] = tuple(ABLATION_GRID),
    fp_model: Optional[ModelGraph] = None,
    ds: Optional[ToyDataset] = None,
) -> tuple[list[dict], list[dict]]:
    """Run every option set for every seed; each run gets its own subdirectory.

    Returns (per-run rows, per-option summary); both are also written as CSV.
    """
    unknown = [o for o in option_names if o not in ABLATION_GRID]
    if unknown:
        raise ConfigError(f"unknown ablation options {unknown}; expected a subset of {list(ABLATION_GRID)}")
    fp_model = fp_model if fp_model is not None else load_model(base.model)
    ds = ds if ds is not None else ToyDataset.load(base.data)
    root = Path(base.out_dir)
    rows = []
    for seed in seeds:
        for name in option_names:
            cfg = RunConfig(**{**base.to_dict(), "seed": seed, "options": asdict(ABLATION_GRID[name]),
                               "out_dir": str(root / f"{name.replace('+', '_')}_seed{seed}")})
            rep = run_pipeline(cfg, fp_model, ds)
            rows.append({"option": name, "seed": seed, "calib_acc": rep.calib_acc, "val_acc": rep.val_acc,
                         "gap": rep.gap, "wall_clock": rep.wall_clock})
            log.info("%s seed %d: calib %.2f val %.2f", name, seed, rep.calib_acc, rep.val_acc)
    summary = summarize(rows)
    _write_rows(rows, ABLATION_HEADER, root / "ablation_runs.csv")
    _write_rows(summary, SUMMARY_HEADER, root / "ablation_summary.csv")
    return rows, summary


# -- sweeps and histograms --------------------------------------------------

SWEEP_METRICS = tuple(m.value for m in MetricKind)


def sweep_cli(
    model: ModelGraph,
    x: torch.Tensor,
    labels: Optional[torch.Tensor],
    out_dir,
    layers: Optional[Sequence[str]] = None,
    bits: int = 2,
    mode: str = "act",
    grid: ScaleGrid = ScaleGrid.uniform(),
    metrics: Sequence[str] = SWEEP_METRICS,
) -> dict[str, list[SweepRecord]]:
    """One CSV per layer of every metric against the normalized scale factor.

    ``mode='act'`` quantizes only the layer's input (W32A<bits>); ``mode='weight'``
    only its weights (W<bits>A32).  Labels add the task-loss column.
    """
    if mode not in ("act", "weight"):
        raise ValueError(f"mode must be 'act' or 'weight', got {mode!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(layers) if layers else [n for n, _ in model.quant_layers()]
    results = {}
    for name in names:
        fn = sweep_metrics if mode == "act" else sweep_weight_scale
        recs = fn(model, name, x, grid, metrics, bits, labels=labels)
        tag = "W32A%d" % bits if mode == "act" else "W%dA32" % bits
        write_sweep_csv(recs, out / f"sweep_{tag}_{name}.csv")
        results[name] = recs
    return results


def dc_preview(model: ModelGraph, x: torch.Tensor, stage: int, out_dir, lambda_c: float = 0.02,
               lr: float = dc.DEFAULT_LR, steps: int = dc.DEFAULT_STEPS, bins: int = 50) -> tuple[list[dict], list[tuple[float, float]]]:
    """Histogram of a stage's FP input before and after distribution correction."""
    if not 0 <= stage < len(model.stages):
        raise ValueError(f"stage {stage} out of range [0, {len(model.stages)})")
    if not model.stages[stage].batchnorms():
        raise ConfigError(f"stage {stage} has no batch-norm layer to correct against")
    with torch.no_grad():
        a_fp = model.run_stages(x, stage)
    state = dc.CorrectionState(a_fp, lambda_c=lambda_c, lr=lr, steps=steps)
    a_dc = dc.correct_distribution(model.stages[stage], state)
    rows = dc.histogram_rows(a_fp, a_dc, bins)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(rows, ["bin_left", "bin_right", "count_before", "count_after"], out / f"dc_hist_stage{stage}.csv")
    with open(out / f"dc_objective_stage{stage}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "stat", "anchor"])
        for i, (s, a) in enumerate(state.history):
            w.writerow([i, repr(s), repr(a)])
    return rows, state.history
