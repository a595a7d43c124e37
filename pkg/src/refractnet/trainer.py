"""Training protocol: L1 objective, momentum SGD, tune-set early stopping, ensembles."""

from __future__ import annotations

import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .fundus.loader import ImageBatch
from .model import AttentionResNet, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training aborted, e.g. because the loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    min_delta: float = 0.001
    ensemble_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    tune_mae: float
    is_best: bool


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_reason: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,tune_mae,is_best\n")
        for e in self.epochs:
            buf.write(f"{e.epoch},{e.train_loss!r},{e.tune_mae!r},{int(e.is_best)}\n")
        return buf.getvalue()


def l1_loss(predictions: Tensor, targets: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at an exact tie is 0."""
    if predictions.shape != targets.shape:
        raise T.ShapeError(f"l1_loss shape mismatch: {predictions.shape} vs {targets.shape}")
    if predictions.ndim != 1 or predictions.shape[0] == 0:
        raise ValueError("l1_loss needs a non-empty 1-D batch")
    return T.mean_over_axes(T.abs_(T.sub(predictions, targets)))


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    learning_rate: float,
    momentum: float,
    velocity: Sequence[np.ndarray],
) -> Sequence[np.ndarray]:
    """In-place heavy-ball update: ``v = momentum * v + g``; ``p -= lr * v``.

    A ``None`` gradient counts as zero.
    """
    if not len(params) == len(grads) == len(velocity):
        raise T.ShapeError("params, grads and velocity must have equal length")
    for p, g, v in zip(params, grads, velocity):
        if v.shape != p.shape or (g is not None and g.shape != p.shape):
            raise T.ShapeError(f"sgd_step shape mismatch: param {p.shape}, grad {None if g is None else g.shape}")
        v *= momentum
        if g is not None:
            v += g
        p -= learning_rate * v
    return params


class EarlyStopping:
    """Tracks the best tune MAE and signals a stop after ``patience`` stale epochs.

    An epoch counts as an improvement when its MAE is below the best so far by
    more than ``min_delta``; the first epoch is always the best.
    """

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, tune_mae: float) -> bool:
        """Record an epoch; returns whether it is the new best."""
        if self.best_epoch == 0 or tune_mae < self.best - self.min_delta:
            self.best, self.best_epoch, self.stale = tune_mae, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def _targets(batch: ImageBatch, target: str) -> np.ndarray:
    y = batch.targets(target) if len(batch) else np.zeros(0)
    if len(batch) and not np.all(np.isfinite(y)):
        raise ValueError(f"some records lack a {target} label")
    return y


def train_one(
    model_config: ModelConfig,
    train: ImageBatch,
    tune: ImageBatch,
    train_config: TrainConfig,
) -> tuple[AttentionResNet, TrainLog]:
    """Train one model and return it restored to its best tune-MAE epoch."""
    if len(train) == 0 or len(tune) == 0:
        raise ValueError(f"train and tune sets must be non-empty (got {len(train)} and {len(tune)})")
    overlap = {r.image_path for r in train.records} & {r.image_path for r in tune.records}
    if overlap:
        raise ValueError(f"{len(overlap)} images are in both train and tune sets")

    target = model_config.target
    y_train = _targets(train, target)
    y_tune = _targets(tune, target)
    model = AttentionResNet(model_config)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    stopper = EarlyStopping(train_config.patience, train_config.min_delta)
    tlog = TrainLog()
    best_state = model.copy_state()
    n = len(train)
    bs = train_config.batch_size

    for epoch in range(1, train_config.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            try:
                out = model.forward(train.pixels[idx], training=True)
                loss = l1_loss(out.predictions, Tensor(y_train[idx]))
            except T.NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            T.zero_grad(params)
            T.backward(loss)
            sgd_step([p.data for p in params], [p.grad for p in params],
                     train_config.learning_rate, train_config.momentum, velocity)
            losses.append(value * len(idx))

        train_loss = float(np.sum(losses) / n)
        tune_mae = float(np.mean(np.abs(model.predict(tune.pixels) - y_tune)))
        if not math.isfinite(tune_mae):
            raise TrainingError(f"non-finite tune MAE at epoch {epoch}")
        is_best = stopper.update(epoch, tune_mae)
        if is_best:
            best_state = model.copy_state()
        tlog.epochs.append(EpochRecord(epoch, train_loss, tune_mae, is_best))
        log.info("seed %d epoch %d: train L1 %.4f, tune MAE %.4f%s (%.1fs)", train_config.seed, epoch,
                 train_loss, tune_mae, " *" if is_best else "", time.perf_counter() - t0)
        if stopper.should_stop:
            tlog.stopped_reason = "early"
            break
    else:
        tlog.stopped_reason = "max_epochs"

    tlog.best_epoch = stopper.best_epoch
    model.load_state(best_state)
    return model, tlog


def member_configs(model_config: ModelConfig, train_config: TrainConfig) -> list[tuple[ModelConfig, TrainConfig]]:
    """Per-member configs: member ``i`` offsets both seeds by ``i``."""
    return [
        (replace(model_config, seed=model_config.seed + i), replace(train_config, seed=train_config.seed + i))
        for i in range(train_config.ensemble_size)
    ]


def train_ensemble(
    model_config: ModelConfig,
    train: ImageBatch,
    tune: ImageBatch,
    train_config: TrainConfig,
    workers: int = 1,
) -> list[tuple[AttentionResNet, TrainLog]]:
    """Train ``ensemble_size`` members on identical data; members may run in parallel threads."""
    configs = member_configs(model_config, train_config)
    if workers > 1 and len(configs) > 1:
        with ThreadPoolExecutor(min(workers, len(configs))) as pool:
            return list(pool.map(lambda c: train_one(c[0], train, tune, c[1]), configs))
    return [train_one(mc, train, tune, tc) for mc, tc in configs]
