"""Training and evaluation of the full-precision teachers."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..model_graph import ModelGraph
from .data import ToyDataset
from .models import build_cnn, build_mlp

log = logging.getLogger(__name__)

# val-accuracy floors (percent) a trained teacher must reach
ACCURACY_FLOORS = {"gaussian": 90.0, "shapes": 90.0}


class TrainingError(RuntimeError):
    def __init__(self, msg: str, curve: list[dict]):
        super().__init__(msg)
        self.curve = curve


@dataclass
class TrainSpec:
    epochs: int = 12
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 1e-4
    floor: float | None = None


def build_for(ds: ToyDataset, seed: int) -> ModelGraph:
    if ds.name == "gaussian":
        return build_mlp(dim=ds.input_shape[0], num_classes=ds.num_classes, seed=seed)
    if ds.name == "shapes":
        return build_cnn(num_classes=ds.num_classes, size=ds.input_shape[-1], seed=seed)
    raise ValueError(f"no architecture for task {ds.name!r}")


@torch.no_grad()
def predict_labels(model: ModelGraph, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    return torch.cat([model(x[i : i + batch_size]).argmax(dim=1) for i in range(0, len(x), batch_size)])


def accuracy(model: ModelGraph, x: torch.Tensor, y: torch.Tensor) -> float:
    """Top-1 accuracy in percent."""
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return 100.0 * float((predict_labels(model, x) == y).sum()) / len(y)


def train_toy_fp(ds: ToyDataset, seed: int, spec: TrainSpec = TrainSpec()) -> ModelGraph:
    """Train the task's architecture; raise TrainingError when val accuracy misses the floor."""
    torch.manual_seed(seed)
    model = build_for(ds, seed)
    g = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, spec.epochs)
    n = len(ds.x_train)
    curve = []
    for epoch in range(spec.epochs):
        model.train()
        perm = torch.randperm(n, generator=g)
        total = 0.0
        # drop the ragged tail so every batch-norm batch has the same size
        for i in range(0, n - spec.batch_size + 1, spec.batch_size):
            idx = perm[i : i + spec.batch_size]
            loss = F.cross_entropy(model(ds.x_train[idx]), ds.y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        val = accuracy(model, ds.x_val, ds.y_val)
        curve.append({"epoch": epoch, "train_loss": total / n, "val_acc": val})
        log.info("epoch %d loss %.4f val %.2f", epoch, total / n, val)
    model.eval()
    floor = spec.floor if spec.floor is not None else ACCURACY_FLOORS.get(ds.name, 0.0)
    if curve[-1]["val_acc"] < floor:
        raise TrainingError(f"val accuracy {curve[-1]['val_acc']:.2f}% below floor {floor}%", curve)
    for p in model.parameters():
        p.requires_grad_(False)
    return model
