"""Desk-scale SGD training and evaluation.

Softmax cross-entropy on the final logits, classic momentum, L2 weight
decay, piecewise-constant learning rate. Shuffling and therefore the
whole run is deterministic for a given seed; updates are computed in
float64 and stored back in the parameters' own dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, TrainingDivergedError
from .graph import ModelGraph, backward, forward, named_params
from .model_io import Dataset
from .util import rng_for, write_csv


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-2
    # (start_epoch, lr) pairs; None derives [ (0, lr), (2/3 epochs, lr/10) ]
    lr_schedule: tuple[tuple[int, float], ...] | None = None
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def resolved_schedule(self) -> tuple[tuple[int, float], ...]:
        if self.lr_schedule is not None:
            sched = tuple(sorted((int(e), float(r)) for e, r in self.lr_schedule))
            if not sched or sched[0][0] != 0:
                raise ValueError(f"lr schedule must start at epoch 0, got {sched}")
            return sched
        drop_at = max(1, (2 * self.epochs) // 3)
        return ((0, self.lr), (drop_at, self.lr / 10.0))

    def lr_at(self, epoch: int) -> float:
        lr = None
        for start, value in self.resolved_schedule():
            if epoch >= start:
                lr = value
        return lr


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)

    def to_csv(self, path) -> None:
        write_csv(path, ("epoch", "loss", "accuracy"),
                  [(e.epoch, e.loss, e.accuracy) for e in self.epochs])


def _logits_output(model: ModelGraph):
    """Model whose output are logits: drop a trailing softmax if present."""
    out_id = model.output_id()
    if model.layer(out_id).kind != "softmax":
        return model, out_id
    trimmed = ModelGraph(
        [spec for spec in model.layers if spec.id != out_id],
        model.blobs,
        model.input_shape,
        model.class_count,
    )
    return trimmed, trimmed.output_id()


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean loss and logits gradient for integer labels.

    logits: (N, classes, 1, 1); returns (loss, dlogits) with the gradient
    already divided by the batch size.
    """
    n = logits.shape[0]
    z = logits.reshape(n, -1).astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    probs = np.exp(z - logsum[:, None])
    probs[np.arange(n), labels] -= 1.0
    dlogits = (probs / n).reshape(logits.shape)
    return loss, dlogits


def train(model: ModelGraph, dataset: Dataset, config: TrainConfig) -> tuple[ModelGraph, TrainHistory]:
    """SGD with momentum and weight decay; returns (trained copy, history)."""
    if dataset.labels.max() >= model.class_count:
        raise GraphError(
            f"dataset labels reach {dataset.labels.max()} but model has {model.class_count} classes"
        )
    work = model.copy_params()
    net, _ = _logits_output(work)
    velocity = {
        (lid, name): np.zeros(arr.shape, dtype=np.float64)
        for lid, name, arr in named_params(net)
    }
    rng = rng_for(config.seed, "shuffle")
    history = TrainHistory()
    n = len(dataset)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            x = dataset.images[idx]
            y = dataset.labels[idx]
            logits, _ = forward(net, x)
            loss, dlogits = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            total_loss += loss * len(idx)
            correct += int(np.sum(logits.reshape(len(idx), -1).argmax(axis=1) == y))
            grads, _ = backward(net, x, dlogits)
            _sgd_step(net, grads, velocity, lr, config.momentum, config.weight_decay)
        history.epochs.append(EpochStats(epoch, total_loss / n, correct / n))
    return work, history


def _sgd_step(net, grads, velocity, lr, momentum, weight_decay):
    for lid, name, param in named_params(net):
        g_entry = grads.get(lid)
        if g_entry is None or name not in g_entry:
            continue
        g = g_entry[name].astype(np.float64)
        if weight_decay:
            g = g + weight_decay * param.astype(np.float64)
        v = velocity[(lid, name)]
        v *= momentum
        v += g
        param[...] = (param.astype(np.float64) - lr * v).astype(param.dtype)


def evaluate(model: ModelGraph, dataset: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy loss over the dataset."""
    net, _ = _logits_output(model)
    n = len(dataset)
    correct = 0
    total_loss = 0.0
    for lo in range(0, n, batch_size):
        x = dataset.images[lo : lo + batch_size]
        y = dataset.labels[lo : lo + batch_size]
        logits, _ = forward(net, x)
        loss, _ = softmax_cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += int(np.sum(logits.reshape(len(y), -1).argmax(axis=1) == y))
    return correct / n, total_loss / n
