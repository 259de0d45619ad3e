"""Seeded synthetic classification tasks standing in for a real dataset."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

TASKS = ("gaussian", "shapes")


@dataclass
class ToyDataset:
    name: str
    x_train: torch.Tensor
    y_train: torch.Tensor
    x_val: torch.Tensor
    y_val: torch.Tensor
    spec: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return int(self.spec["num_classes"])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])

    def split(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        if name == "train":
            return self.x_train, self.y_train
        if name == "val":
            return self.x_val, self.y_val
        raise KeyError(f"unknown split {name!r}")

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            x_train=self.x_train.numpy(),
            y_train=self.y_train.numpy(),
            x_val=self.x_val.numpy(),
            y_val=self.y_val.numpy(),
            spec=np.array(json.dumps({"name": self.name, **self.spec})),
        )

    @classmethod
    def load(cls, path) -> "ToyDataset":
        with np.load(path) as z:
            spec = json.loads(str(z["spec"]))
            name = spec.pop("name")
            return cls(
                name,
                torch.from_numpy(z["x_train"]),
                torch.from_numpy(z["y_train"]),
                torch.from_numpy(z["x_val"]),
                torch.from_numpy(z["y_val"]),
                spec,
            )


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if n % k:
        raise ValueError(f"split size {n} is not a multiple of {k} classes")
    y = np.repeat(np.arange(k), n // k)
    rng.shuffle(y)
    return y


def gaussian_clusters(
    seed: int, n_train: int = 8000, n_val: int = 2000, num_classes: int = 8, dim: int = 16, spread: float = 0.9
) -> ToyDataset:
    """Isotropic unit-variance clusters around random centres."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, spread, size=(num_classes, dim))

    def draw(n):
        y = _balanced_labels(n, num_classes, rng)
        x = centres[y] + rng.normal(size=(n, dim))
        return torch.from_numpy(x.astype(np.float32)), torch.from_numpy(y.astype(np.int64))

    xt, yt = draw(n_train)
    xv, yv = draw(n_val)
    spec = {"task": "gaussian", "seed": seed, "num_classes": num_classes, "dim": dim, "spread": spread,
            "n_train": n_train, "n_val": n_val}
    return ToyDataset("gaussian", xt, yt, xv, yv, spec)


SHAPES = ("disk", "square", "triangle", "plus", "cross", "hbar", "vbar", "ring", "frame", "diamond")


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    t = max(1.0, r / 3)
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= r - t)
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "frame":
        a = np.maximum(np.abs(dy), np.abs(dx))
        return (a <= r * 0.85) & (a >= r * 0.85 - t)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "triangle":
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "plus":
        return ((np.abs(dy) <= t / 2 + 0.3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t / 2 + 0.3) & (np.abs(dy) <= r))
    if kind == "cross":
        return (np.abs(dy - dx) <= t * 0.8) & (np.abs(dy) <= r * 0.8) | (np.abs(dy + dx) <= t * 0.8) & (np.abs(dy) <= r * 0.8)
    if kind == "hbar":
        return (np.abs(dy) <= t * 0.7) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= t * 0.7) & (np.abs(dy) <= r)
    raise ValueError(kind)


def rendered_shapes(seed: int, n_train: int = 6000, n_val: int = 2000, size: int = 16, noise: float = 0.35) -> ToyDataset:
    """Noisy 1-channel renders of ten shape classes with jittered position, size and contrast."""
    rng = np.random.default_rng(seed)
    k = len(SHAPES)

    def draw(n):
        y = _balanced_labels(n, k, rng)
        x = np.empty((n, 1, size, size), dtype=np.float64)
        for i, c in enumerate(y):
            r = rng.uniform(3.5, 6.0)
            cy, cx = size / 2 - 0.5 + rng.uniform(-2, 2, size=2)
            img = _shape_mask(SHAPES[c], size, cy, cx, r).astype(np.float64) * rng.uniform(0.6, 1.0)
            x[i, 0] = img + rng.normal(0.0, noise, size=(size, size))
        return x, y

    xt, yt = draw(n_train)
    xv, yv = draw(n_val)
    mu, sd = xt.mean(), xt.std()
    spec = {"task": "shapes", "seed": seed, "num_classes": k, "size": size, "noise": noise,
            "n_train": n_train, "n_val": n_val}
    to_t = lambda a: torch.from_numpy(((a - mu) / sd).astype(np.float32))
    return ToyDataset("shapes", to_t(xt), torch.from_numpy(yt), to_t(xv), torch.from_numpy(yv), spec)


def make_dataset(task: str, seed: int, **kw) -> ToyDataset:
    if task == "gaussian":
        return gaussian_clusters(seed, **kw)
    if task == "shapes":
        return rendered_shapes(seed, **kw)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def sample_calibration(ds: ToyDataset, size: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Class-balanced random subset of the training split (labels returned for analysis only)."""
    k = ds.num_classes
    g = np.random.default_rng(seed)
    y = ds.y_train.numpy()
    per, extra = divmod(size, k)
    picks = []
    for c in range(k):
        idx = np.flatnonzero(y == c)
        take = per + (1 if c < extra else 0)
        if take > len(idx):
            raise ValueError(f"not enough training samples of class {c} for a calibration set of {size}")
        picks.append(g.choice(idx, size=take, replace=False))
    sel = np.sort(np.concatenate(picks))
    return ds.x_train[sel], ds.y_train[sel]
