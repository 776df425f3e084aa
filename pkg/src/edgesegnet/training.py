"""Minibatch training loop and evaluation helpers."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import grad as G
from .analysis import SegMetrics, seg_metrics
from .data import Dataset
from .errors import ArgumentError, DataError, NumericalError
from .network import NetworkGraph

log = logging.getLogger(__name__)


@dataclass
class TrainHistory:
    epoch_loss: List[float] = field(default_factory=list)
    steps: int = 0
    diverged: bool = False

    def to_dict(self):
        return {
            "kind": "train_history",
            "epoch_loss": self.epoch_loss,
            "steps": self.steps,
            "diverged": self.diverged,
        }


def train(
    graph: NetworkGraph,
    dataset: Dataset,
    epochs: int,
    lr: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 8,
    seed: int = 0,
    flip_augment: bool = False,
    ignore_label: Optional[int] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainHistory:
    """Momentum SGD on per-pixel cross-entropy, updating ``graph`` in place.

    Each epoch visits the samples in an order drawn from
    ``default_rng(seed)``; with ``flip_augment`` every batch is mirrored
    horizontally with probability 1/2.  Stops early (``diverged=True``) on a
    non-finite loss or non-finite parameters at the end of an epoch.
    """
    if epochs < 0:
        raise ArgumentError(f"epochs must be >= 0, got {epochs}")
    if batch_size < 1:
        raise ArgumentError(f"batch size must be >= 1, got {batch_size}")
    hist = TrainHistory()
    if epochs == 0:
        return hist
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    state = G.OptimState(lr, momentum)
    images, labels = dataset.images(), dataset.labels()
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x, y = images[idx], labels[idx]
            if flip_augment and rng.random() < 0.5:
                x, y = x[..., ::-1], y[..., ::-1]
            logits = graph.forward(x, training=True)
            loss, dlogits = G.cross_entropy_loss(logits, y, ignore_label)
            if not math.isfinite(loss):
                graph.clear()
                hist.diverged = True
                log.warning("non-finite loss at epoch %d step %d", epoch, hist.steps)
                return hist
            G.sgd_step(graph, graph.backward(dlogits), state)
            hist.steps += 1
            total += loss * len(idx)
            seen += len(idx)
        hist.epoch_loss.append(total / seen)
        # the last update of an epoch can overflow without any loss seeing it
        if not all(np.isfinite(v).all() for v in graph.parameters().values()):
            hist.diverged = True
            log.warning("non-finite parameters after epoch %d", epoch)
            return hist
        log.info("epoch %d loss %.4f", epoch + 1, total / seen)
        if on_epoch is not None:
            on_epoch(epoch + 1, total / seen)
    return hist


def predict(graph: NetworkGraph, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Inference-mode labels, shape (n, h, w).

    Raises NumericalError if any logit is non-finite.
    """
    out = []
    for start in range(0, images.shape[0], batch_size):
        with np.errstate(over="ignore", invalid="ignore"):
            logits = graph.forward(images[start : start + batch_size], training=False)
        if not np.isfinite(logits).all():
            raise NumericalError("non-finite logits in inference")
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out, axis=0) if out else np.zeros((0,) + images.shape[2:], dtype=np.int64)


def evaluate_dataset(graph: NetworkGraph, dataset: Dataset, ignore_label: Optional[int] = None) -> SegMetrics:
    k = graph.config.num_classes
    if len(dataset) == 0:
        return SegMetrics(np.zeros((k, k), dtype=np.int64), k)
    pred = predict(graph, dataset.images())
    return seg_metrics(pred, dataset.labels(), k, ignore_label)
