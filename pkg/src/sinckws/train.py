"""Weighted cross-entropy training with Adam and step learning-rate decay."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .data import ClipStore, DatasetManifest, batch_iterator
from .model import KWSModel
from .tensor import NonFiniteError, Tape, Tensor, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.5
    decay_every: int = 10
    batch_size: int = 64
    seed: int = 0
    silence_fraction: float = 1.0 / 12.0
    eval_seed: int = 1234
    prefetch: int = 0
    cache_size: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must be in (0, 1]")
        if self.decay_every < 1 or self.batch_size < 1:
            raise ValueError("decay_every and batch_size must be >= 1")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def create(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place.  A non-finite gradient aborts before any change."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {p.name}")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        p.data = (p.data - update).astype(p.data.dtype)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.decay ** (epoch // config.decay_every)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows: true class, columns: predicted
    total: int

    @property
    def per_class_counts(self) -> np.ndarray:
        return self.confusion.sum(axis=1)


def evaluate(model: KWSModel, manifest: DatasetManifest, split: str, batch_size: int = 64,
             silence_fraction: float = 1.0 / 12.0, seed: int = 1234,
             store: Optional[ClipStore] = None) -> EvalResult:
    """Eval-mode accuracy and confusion matrix; synthesized silence uses a fixed ``seed``."""
    rng = np.random.default_rng(seed)
    k = model.config.n_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for clips, labels in batch_iterator(manifest, split, batch_size, silence_fraction, rng, store):
        pred = np.argmax(model.forward(clips, training=False).data, axis=1)
        np.add.at(confusion, (labels, pred), 1)
    total = int(confusion.sum())
    return EvalResult(float(np.trace(confusion)) / total, confusion, total)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    lr: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    step_losses: list[float]
    best_val_accuracy: float
    best_epoch: int
    checkpoint: Optional[Path]
    saved_accuracies: list[float] = field(default_factory=list)


def train(model: KWSModel, manifest: DatasetManifest, config: TrainConfig,
          checkpoint_path=None, history_path=None,
          on_epoch_end: Optional[Callable[[EpochRecord], bool]] = None,
          store: Optional[ClipStore] = None) -> TrainResult:
    """Run the training loop, saving a checkpoint whenever validation accuracy improves.

    ``on_epoch_end`` may return True to stop early.
    """
    if not manifest.split("train") or not manifest.split("val"):
        raise ValueError("training needs non-empty train and val splits")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    data_rng, drop_rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])
    weights = manifest.class_weights()
    params = model.parameters()
    state = AdamState.create(params)
    store = store or ClipStore(manifest, config.cache_size)
    checkpoint_path = Path(checkpoint_path) if checkpoint_path else None

    history: list[EpochRecord] = []
    step_losses: list[float] = []
    saved: list[float] = []
    best, best_epoch = -math.inf, -1
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        total, count = 0.0, 0
        batches = batch_iterator(manifest, "train", config.batch_size, config.silence_fraction,
                                 data_rng, store, config.prefetch)
        for clips, labels in batches:
            try:
                with Tape() as tape:
                    logits = model.forward(clips, training=True, rng=drop_rng)
                    loss = ops.weighted_softmax_cross_entropy(logits, labels, weights)
                grads = backward(tape, loss, params)
                adam_step(params, grads, state, lr, config.beta1, config.beta2, config.eps)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch + 1}: {exc}; last good checkpoint: {checkpoint_path}") from exc
            finally:
                for p in params:
                    p.zero_grad()
            value = loss.item()
            step_losses.append(value)
            total += value * len(labels)
            count += len(labels)

        val = evaluate(model, manifest, "val", config.batch_size, config.silence_fraction,
                       config.eval_seed, store).accuracy
        rec = EpochRecord(epoch + 1, total / count, val, lr)
        history.append(rec)
        log.info("epoch %d  loss %.6f  val_acc %.4f  lr %.2e", rec.epoch, rec.train_loss, val, lr)
        if val > best:
            best, best_epoch = val, epoch + 1
            saved.append(val)
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, {"epoch": epoch + 1, "best_val_accuracy": val,
                                                         "seed": config.seed})
        if history_path is not None:
            write_history_csv(history, history_path)
        if on_epoch_end is not None and on_epoch_end(rec):
            break
    return TrainResult(history, step_losses, best, best_epoch, checkpoint_path, saved)


def write_history_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_accuracy", "lr"])
        for r in history:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_accuracy), repr(r.lr)])
