"""Toy full-precision architectures."""
from __future__ import annotations

import numpy as np
import torch

from ..model_graph import AddResidual, AvgPool, BatchNorm, Block, Conv, Linear, ModelGraph, ReLU


def build_mlp(dim: int = 16, hidden: int = 64, num_classes: int = 8, seed: int = 0) -> ModelGraph:
    """Stem + two hidden blocks + classifier block, batch norm after every hidden linear."""
    g = torch.Generator().manual_seed(seed)
    stem = Block([Linear.init(dim, hidden, generator=g), BatchNorm(hidden), ReLU()])
    blocks = [
        Block([Linear.init(hidden, hidden, generator=g), BatchNorm(hidden), ReLU()]),
        Block([Linear.init(hidden, hidden, generator=g), BatchNorm(hidden), ReLU()]),
        Block([Linear.init(hidden, num_classes, generator=g)]),
    ]
    return ModelGraph(stem, blocks, (dim,), num_classes)


def build_cnn(num_classes: int = 10, size: int = 16, width: int = 16, seed: int = 0) -> ModelGraph:
    """Conv stem, a strided block, one residual block and a strided block ending in the classifier."""
    g = torch.Generator().manual_seed(seed)
    w1, w2, w3 = width, 2 * width, 4 * width
    stem = Block([Conv.init(1, w1, 3, 1, 1, generator=g), BatchNorm(w1), ReLU()])
    blocks = [
        Block([Conv.init(w1, w2, 3, 2, 1, generator=g), BatchNorm(w2), ReLU()]),
        Block(
            [
                Conv.init(w2, w2, 3, 1, 1, generator=g), BatchNorm(w2), ReLU(),
                Conv.init(w2, w2, 3, 1, 1, generator=g), BatchNorm(w2), AddResidual(), ReLU(),
            ],
            skip=True,
        ),
        Block([Conv.init(w2, w3, 3, 2, 1, generator=g), BatchNorm(w3), ReLU(), AvgPool(),
               Linear.init(w3, num_classes, generator=g)]),
    ]
    return ModelGraph(stem, blocks, (1, size, size), num_classes)


def heavy_tailed_task(
    seed: int,
    n: int = 2048,
    dim: int = 16,
    classes: int = 4,
    df: float = 3.0,
    threshold: float = 6.0,
    gain: float = 6.0,
) -> tuple[ModelGraph, torch.Tensor, torch.Tensor]:
    """Synthetic probe for activation-scale selection.

    The stem is an identity linear map plus ReLU, so the head sees
    non-negative student-t activations.  Channel ``k < classes`` votes for
    class ``k``; an extra "quiet" class wins unless some voting channel
    exceeds ``threshold``.  The label therefore lives in the tail, while
    element-wise error is dominated by the bulk.  Labels are the
    full-precision argmax.  Returns ``(model, inputs, labels)``; the layer
    under study is ``HEAVY_TAILED_LAYER``.
    """
    g = torch.Generator().manual_seed(seed)
    x = torch.from_numpy(np.random.default_rng(seed).standard_t(df, size=(n, dim))).float()
    stem = Block([Linear(torch.eye(dim), torch.zeros(dim)), ReLU()])
    w = torch.zeros(classes + 1, dim)
    w[:classes, :classes] = torch.eye(classes)
    w[:classes] += 0.05 * torch.randn(classes, dim, generator=g)
    b = torch.zeros(classes + 1)
    b[classes] = threshold
    head = Linear(gain * w, gain * b)
    model = ModelGraph(stem, [Block([head])], (dim,), classes + 1).eval()
    with torch.no_grad():
        labels = model(x).argmax(dim=1)
    return model, x, labels


HEAVY_TAILED_LAYER = "blocks.0.layers.0"
