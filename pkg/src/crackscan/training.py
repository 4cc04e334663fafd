"""Training loop: optimizer choice, categorical cross-entropy, LR-on-plateau."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from pathlib import Path
from typing import Callable

import keras
import numpy as np

from crackscan.augment import AugmentationPolicy, augment
from crackscan.dataset import ImageSample, TestCaseSplit, load_images
from crackscan.errors import ConfigurationError, TrainingError
from crackscan.zoo import ClassifierModel, Optimizer

log = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 50
    lr: float | None = None  # None: backbone default
    batch_size: int = 8
    val_fraction: float = 0.2
    lr_patience: int = 5
    lr_factor: float = 0.5
    min_lr: float | None = None  # None: lr / 100
    min_delta: float = 1e-4
    momentum: float = 0.9  # SGD only
    seed: int = 0
    restore_best: bool = True
    augmentation: AugmentationPolicy = dataclasses.field(default_factory=AugmentationPolicy)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not 0 < self.lr_factor < 1:
            raise ConfigurationError("lr_factor must be in (0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ConfigurationError("val_fraction must be in (0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr is not None and self.lr <= 0:
            raise ConfigurationError("lr must be positive")

    def resolved(self, default_lr: float) -> "TrainConfig":
        lr = self.lr if self.lr is not None else default_lr
        min_lr = self.min_lr if self.min_lr is not None else lr / 100
        return dataclasses.replace(self, lr=lr, min_lr=min_lr)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        aug = d.pop("augmentation", None)
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if aug is not None:
            cfg.augmentation = aug if isinstance(aug, AugmentationPolicy) else AugmentationPolicy(**aug)
        return cfg

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclasses.dataclass
class PlateauState:
    lr: float
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 0.0
    min_delta: float = 1e-4
    best: float = math.inf
    wait: int = 0


def reduce_lr_on_plateau(state: PlateauState, val_loss: float) -> float:
    """Advance the schedule by one epoch and return the learning rate to use next.

    A loss below ``best - min_delta`` resets the wait counter. The ``patience``-th
    consecutive epoch without such an improvement multiplies the rate by
    ``factor`` (never below ``min_lr``) and restarts the count.
    """
    if val_loss < state.best - state.min_delta:
        state.best = val_loss
        state.wait = 0
        return state.lr
    state.wait += 1
    if state.wait >= state.patience:
        state.lr = max(state.lr * state.factor, state.min_lr)
        state.wait = 0
    return state.lr


@dataclasses.dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


@dataclasses.dataclass
class TrainRecord:
    epochs: list[EpochLog]
    wall_time_seconds: float
    best_epoch: int
    backbone: str = ""
    regime: str = ""
    case_id: int | None = None
    config: dict = dataclasses.field(default_factory=dict)

    @property
    def lrs(self) -> list[float]:
        return [e.lr for e in self.epochs]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRecord":
        d = dict(d)
        d["epochs"] = [EpochLog(**e) for e in d["epochs"]]
        return cls(**d)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def plot(self, path: str | Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        ep = [e.epoch + 1 for e in self.epochs]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
        ax1.plot(ep, [e.train_acc for e in self.epochs], label="training accuracy")
        ax1.plot(ep, [e.val_acc for e in self.epochs], label="validation accuracy")
        ax1.set_xlabel("epoch")
        ax1.set_title("accuracy")
        ax1.legend()
        ax2.plot(ep, [e.train_loss for e in self.epochs], label="training loss")
        ax2.plot(ep, [e.val_loss for e in self.epochs], label="validation loss")
        ax2.set_xlabel("epoch")
        ax2.set_title("loss")
        ax2.legend()
        fig.suptitle(f"{self.backbone} {self.regime.lower()}" + (f" (case {self.case_id})" if self.case_id is not None else ""))
        fig.tight_layout()
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)


def stratified_holdout(y: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (train, val), holding out ``fraction`` of each label.

    A label keeps at least one training example; it contributes a validation
    example only if it has two or more.
    """
    train, val = [], []
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        idx = idx[rng.permutation(len(idx))]
        n_val = 0 if len(idx) < 2 else min(len(idx) - 1, max(1, int(round(len(idx) * fraction))))
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(val, dtype=np.int64))


class AugmentedBatches(keras.utils.PyDataset):
    """Shuffled, augmented, preprocessed batches; content depends only on (seed, epoch, batch)."""

    def __init__(self, images, labels, model: ClassifierModel, config: TrainConfig):
        super().__init__(workers=1, use_multiprocessing=False)
        self.images = images
        self.onehot = keras.utils.to_categorical(labels, 2).astype(np.float32)
        self.model = model
        self.config = config
        self.epoch = 0

    def __len__(self):
        return math.ceil(len(self.images) / self.config.batch_size)

    def _order(self) -> np.ndarray:
        return np.random.default_rng([self.config.seed, self.epoch]).permutation(len(self.images))

    def __getitem__(self, idx):
        bs = self.config.batch_size
        sel = self._order()[idx * bs : (idx + 1) * bs]
        rng = np.random.default_rng([self.config.seed, self.epoch, idx, 1])
        batch = np.stack([augment(self.images[i], self.config.augmentation, rng) for i in sel])
        return self.model.preprocess(batch), self.onehot[sel]

    def on_epoch_end(self):
        self.epoch += 1


class _Monitor(keras.callbacks.Callback):
    def __init__(self, schedule: PlateauState, restore_best: bool):
        super().__init__()
        self.schedule = schedule
        self.restore_best = restore_best
        self.logs: list[EpochLog] = []
        self.best_loss = math.inf
        self.best_epoch = -1
        self.best_weights = None
        self.failure: str | None = None

    def on_train_batch_end(self, batch, logs=None):
        loss = (logs or {}).get("loss")
        if loss is not None and not np.isfinite(loss):
            self.failure = f"non-finite training loss {loss} at epoch {len(self.logs) + 1}, batch {batch}"
            self.model.stop_training = True

    def on_epoch_end(self, epoch, logs=None):
        logs = logs or {}
        val_loss = float(logs.get("val_loss", logs["loss"]))
        if not np.isfinite(val_loss):
            self.failure = self.failure or f"non-finite validation loss at epoch {epoch + 1}"
            self.model.stop_training = True
            return
        self.logs.append(EpochLog(
            epoch=epoch,
            train_loss=float(logs["loss"]),
            train_acc=float(logs.get("accuracy", np.nan)),
            val_loss=val_loss,
            val_acc=float(logs.get("val_accuracy", logs.get("accuracy", np.nan))),
            lr=float(self.schedule.lr),
        ))
        if self.restore_best and val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_weights = self.model.get_weights()
        new_lr = reduce_lr_on_plateau(self.schedule, val_loss)
        self.model.optimizer.learning_rate.assign(new_lr)


def make_loss() -> keras.losses.Loss:
    return keras.losses.CategoricalCrossentropy()


def _enable_determinism(seed: int) -> None:
    keras.utils.set_random_seed(seed)
    if keras.backend.backend() == "tensorflow":
        import tensorflow as tf

        tf.config.experimental.enable_op_determinism()


def fit_arrays(
    model: ClassifierModel,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig | None = None,
    *,
    case_id: int | None = None,
    verbose: int = 0,
) -> TrainRecord:
    """Train ``model`` in place on uint8 RGB ``images`` with 0/1 ``labels``.

    A stratified validation subset is carved from the given images; it drives
    the LR schedule and best-epoch selection.
    """
    config = (config or TrainConfig()).resolved(model.spec.default_lr)
    config.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise TrainingError("images and labels differ in length")
    if len(np.unique(labels)) < 2:
        raise TrainingError("training set must contain both Crack and NoCrack examples")

    _enable_determinism(config.seed)
    tr_idx, val_idx = stratified_holdout(labels, config.val_fraction, np.random.default_rng(config.seed))
    train_data = AugmentedBatches(images[tr_idx], labels[tr_idx], model, config)
    validation = None
    if len(val_idx):
        validation = (model.preprocess(images[val_idx]), keras.utils.to_categorical(labels[val_idx], 2))

    if model.spec.optimizer is Optimizer.SGD:
        optimizer = keras.optimizers.SGD(learning_rate=config.lr, momentum=config.momentum)
    else:
        optimizer = keras.optimizers.Adam(learning_rate=config.lr)
    model.net.compile(optimizer=optimizer, loss=make_loss(), metrics=["accuracy"])

    schedule = PlateauState(config.lr, config.lr_patience, config.lr_factor, config.min_lr, config.min_delta)
    monitor = _Monitor(schedule, config.restore_best)
    start = time.perf_counter()
    model.net.fit(train_data, validation_data=validation, epochs=config.epochs, callbacks=[monitor],
                  verbose=verbose, shuffle=False)
    wall = time.perf_counter() - start
    if monitor.failure:
        raise TrainingError(f"{model.spec.name}: {monitor.failure}")
    if config.restore_best and monitor.best_weights is not None:
        model.net.set_weights(monitor.best_weights)

    model.training_config_digest = config.digest()
    return TrainRecord(
        epochs=monitor.logs,
        wall_time_seconds=wall,
        best_epoch=monitor.best_epoch if config.restore_best else len(monitor.logs) - 1,
        backbone=model.spec.name,
        regime=model.regime.value,
        case_id=case_id,
        config=config.to_dict(),
    )


def train(
    model: ClassifierModel,
    split: TestCaseSplit,
    config: TrainConfig | None = None,
    *,
    loader: Callable[[list[ImageSample], int], tuple[np.ndarray, np.ndarray]] = load_images,
    verbose: int = 0,
) -> tuple[ClassifierModel, TrainRecord]:
    """Train on ``split.train``; the test set is never touched."""
    if not split.train:
        raise TrainingError(f"case {split.case_id}: empty training set")
    x, y = loader(split.train, model.input_size)
    record = fit_arrays(model, x, y, config, case_id=split.case_id, verbose=verbose)
    return model, record
