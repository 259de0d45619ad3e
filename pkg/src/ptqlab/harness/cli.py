"""Command-line entry point: ``ptqlab <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import torch

from ..model_graph import load_model, save_model
from ..reconstruction import ReconConfig
from ..scale_search import ScaleGrid
from . import pipeline, plotting
from .data import TASKS, ToyDataset, make_dataset, sample_calibration
from .train import TrainSpec, accuracy, train_toy_fp

log = logging.getLogger("ptqlab")

_RECON_FIELDS = {f.name: f for f in fields(ReconConfig)}
# set by the bits / metric flags of RunConfig rather than through --set
_RECON_OWNED = {"w_bits", "a_bits", "act_init_metric"}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key = key.strip().replace("-", "_")
        if key not in _RECON_FIELDS or key in _RECON_OWNED:
            raise SystemExit(f"--set: unknown reconstruction field {key!r}")
        out[key] = _parse_value(val)
    return out


def _load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SystemExit(f"config {path}: not valid JSON ({exc})")
    if not isinstance(data, dict):
        raise SystemExit(f"config {path}: expected a JSON object")
    return data


def build_run_config(args) -> pipeline.RunConfig:
    """Config file first, then every flag the user actually passed."""
    d = _load_config_file(args.config) if args.config else {}
    for key in ("model", "data", "w_bits", "a_bits", "metric", "out_dir", "calib_size", "workers", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    options = dict(d.get("options", {}))
    for flag in ("pd", "reg", "dc", "drop"):
        val = getattr(args, flag, None)
        if val is not None:
            options[f"use_{flag}"] = val
    if options:
        d["options"] = {**asdict(pipeline.QuantOptions()), **options}
    d["recon"] = {**d.get("recon", {}), **_overrides(args.set)}
    missing = [k for k in ("model", "data") if k not in d]
    if missing:
        raise SystemExit(f"missing required settings: {', '.join(missing)} (flag or config file)")
    try:
        cfg = pipeline.RunConfig.from_dict(d)
        cfg.validate()
    except ValueError as exc:
        raise SystemExit(f"invalid run config: {exc}")
    return cfg


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--model", help="FP model file")
    p.add_argument("--data", help="dataset .npz from gen-data")
    p.add_argument("--w-bits", dest="w_bits", type=int)
    p.add_argument("--a-bits", dest="a_bits", type=int)
    p.add_argument("--metric", help="activation-scale init metric (auto, local_mse, pd_kl, ...)")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--calib-size", dest="calib_size", type=int, help=f"presets: {pipeline.CALIB_PRESETS}")
    p.add_argument("--workers", type=int)
    for flag in ("pd", "reg", "dc", "drop"):
        p.add_argument(f"--{flag}", dest=flag, action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="reconstruction setting, e.g. --set iterations=2000 --set lambda_r=0.2")


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    ds = make_dataset(args.task, args.seed)
    ds.save(args.out)
    print(f"wrote {args.out}: {len(ds.x_train)} train / {len(ds.x_val)} val, {ds.num_classes} classes")
    return 0


def cmd_train_fp(args) -> int:
    ds = ToyDataset.load(args.data)
    torch.set_num_threads(args.workers)
    spec = TrainSpec(epochs=args.epochs, lr=args.lr, floor=args.floor)
    model = train_toy_fp(ds, args.seed, spec)
    save_model(model, args.out)
    print(f"wrote {args.out}: val accuracy {accuracy(model, ds.x_val, ds.y_val):.2f}%")
    return 0


def cmd_quantize(args) -> int:
    cfg = build_run_config(args)
    rep = pipeline.run_pipeline(cfg)
    print(json.dumps(rep.to_dict(), indent=2))
    return 0


def cmd_eval(args) -> int:
    ds = ToyDataset.load(args.data)
    model = load_model(args.model)
    if args.split == "calib":
        x, y = sample_calibration(ds, args.calib_size, args.seed)
    else:
        x, y = ds.split(args.split)
    acc = accuracy(model, x, y)
    out = {"model": args.model, "split": args.split, "accuracy": acc, "n": len(y)}
    if args.json:
        Path(args.json).write_text(json.dumps(out, indent=2))
    print(f"{args.split}: {acc:.2f}% ({len(y)} samples)")
    return 0


def cmd_sweep(args) -> int:
    ds = ToyDataset.load(args.data)
    model = load_model(args.model)
    g = torch.Generator().manual_seed(args.seed)
    idx = torch.randperm(len(ds.x_val), generator=g)[: args.samples].sort().values
    x, y = ds.x_val[idx], ds.y_val[idx]
    results = pipeline.sweep_cli(model, x, y, args.out_dir, args.layer, args.bits, args.mode, ScaleGrid.uniform(args.grid))
    tag = "W32A%d" % args.bits if args.mode == "act" else "W%dA32" % args.bits
    for name, recs in results.items():
        if not args.no_plots:
            plotting.plot_sweep(recs, Path(args.out_dir) / f"sweep_{tag}_{name}.png", f"{name} ({tag})")
        print(f"{name}: {len(recs)} grid points")
    return 0


def cmd_ablate(args) -> int:
    cfg = build_run_config(args)
    seeds = [args.seed + i for i in range(args.runs)]
    rows, summary = pipeline.ablate(cfg, seeds, args.options.split(","))
    if not args.no_plots:
        plotting.plot_ablation(summary, Path(cfg.out_dir) / "ablation.png", f"W{cfg.w_bits}A{cfg.a_bits}, {len(seeds)} seeds")
    for s in summary:
        print(f"{s['option']:>10}: val {s['val_mean']:.2f} ± {s['val_std']:.2f}  gap {s['gap_mean']:.2f}")
    return 0


def cmd_dc_preview(args) -> int:
    ds = ToyDataset.load(args.data)
    model = load_model(args.model)
    x, _ = sample_calibration(ds, args.calib_size, args.seed)
    rows, history = pipeline.dc_preview(model, x, args.stage, args.out_dir, args.lambda_c, args.lr, args.steps, args.bins)
    if not args.no_plots:
        plotting.plot_histogram(rows, Path(args.out_dir) / f"dc_hist_stage{args.stage}.png", f"stage {args.stage} input")
    (s0, a0), (s1, a1) = history[0], history[-1]
    print(f"stat term {s0:.4g} -> {s1:.4g}, anchor {a0:.4g} -> {a1:.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ptqlab", description="Post-training quantization on toy tasks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a seeded synthetic dataset")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-fp", help="train the full-precision teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=TrainSpec.epochs)
    p.add_argument("--lr", type=float, default=TrainSpec.lr)
    p.add_argument("--floor", type=float, help="val accuracy floor in percent (task default otherwise)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_fp)

    p = sub.add_parser("quantize", help="quantize a model and write the run directory")
    _add_run_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("eval", help="top-1 accuracy of a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "calib"), default="val")
    p.add_argument("--calib-size", dest="calib_size", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0, help="calibration sampling seed for --split calib")
    p.add_argument("--json", help="also write the result here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="metric-vs-scale sweeps with the task-loss oracle column")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", action="append", help="layer name (repeatable); all conv/linear layers by default")
    p.add_argument("--bits", type=int, default=2)
    p.add_argument("--mode", choices=("act", "weight"), default="act")
    p.add_argument("--grid", type=int, default=64, help="number of scale factors")
    p.add_argument("--samples", type=int, default=512, help="labeled val samples used")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="run the option grid over several seeds")
    _add_run_flags(p)
    p.add_argument("--seed", type=int, required=True, help="first seed")
    p.add_argument("--runs", type=int, default=10, help="number of consecutive seeds")
    p.add_argument("--options", default=",".join(pipeline.ABLATION_GRID), help="comma-separated subset of the grid")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("dc-preview", help="histograms of a stage input before/after distribution correction")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stage", type=int, default=1)
    p.add_argument("--lambda-c", dest="lambda_c", type=float, default=0.02)
    p.add_argument("--lr", type=float, default=pipeline.dc.DEFAULT_LR)
    p.add_argument("--steps", type=int, default=pipeline.dc.DEFAULT_STEPS)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--calib-size", dest="calib_size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(fn=cmd_dc_preview)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
