"""Training loop with teacher forcing decayed by scheduled sampling.

Per epoch the training objects are reshuffled and batched; each batch draws
one Bernoulli mask over the output steps (shared across the batch) with
success probability ``k^epoch``, decides step by step between ground truth
and the model's own feedback, and applies one clipped Adam update.
Validation always runs in pure-inference mode. Losses are tracked in
normalized units and reported in day^2 through the stored time range.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from orbdecay import nn
from orbdecay.errors import InputError, NumericalError
from orbdecay.features import FeatureTensor, minmax_denormalize

SEQUENCE_LENGTH = 25


class EmptyDataset(InputError):
    """No training objects available."""


class MissingStats(InputError):
    """Prediction requires normalization statistics."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``tx`` is the input-sequence length; the output length is the remainder
    of the fixed 25-step sequence. ``decay_k`` drives the per-epoch teacher
    forcing probability ``k^epoch``.
    """

    learning_rate: float
    batch_size: int
    epochs: int
    decay_k: float
    tx: int
    seed: int = 0
    beta1: float = 0.999
    beta2: float = 0.999
    clipnorm: float = 0.1
    loss_curve_path: str | None = None
    decoder_feeds_constants: bool = False

    def __post_init__(self) -> None:
        if not 1 <= self.tx <= SEQUENCE_LENGTH - 1:
            raise InputError(
                f"tx must leave at least one output step of {SEQUENCE_LENGTH}, got {self.tx}"
            )
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if not 0.0 < self.decay_k < 1.0:
            raise InputError("decay_k must lie strictly inside (0, 1)")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")

    @property
    def ty(self) -> int:
        return SEQUENCE_LENGTH - self.tx


@dataclass
class TrainReport:
    """Per-epoch losses (day^2) plus the best-validation snapshot."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    best_epoch: int = -1
    best_val_loss: float = math.inf
    best_state: dict[str, np.ndarray] | None = None
    checkpoint_path: str | None = None
    nonmonotone_validation_count: int = 0


def sampling_probability(j: int, k: float) -> float:
    """Teacher-forcing probability at epoch ``j``: ``k**j``."""
    if j < 0:
        raise InputError("epoch index must be >= 0")
    if not 0.0 < k < 1.0:
        raise InputError("decay constant must lie strictly inside (0, 1)")
    return k**j


def draw_mask(ty: int, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(eps) per output step; True feeds ground truth."""
    if not 0.0 <= eps <= 1.0:
        raise InputError(f"probability out of range: {eps}")
    return rng.random(ty) < eps


def _tensor_views(tensor: FeatureTensor, cfg: TrainConfig, indices: np.ndarray):
    """Slice encoder inputs, decoder seeds, targets, and extras for objects."""
    enc = tensor.data[indices, : cfg.tx, :]
    y0 = tensor.data[indices, cfg.tx - 1, 0]
    targets = tensor.data[indices, cfg.tx :, 0]
    extras = None
    if cfg.decoder_feeds_constants:
        # Constant-by-design features: solar flux and area-to-mass.
        extras = tensor.data[indices, 0, 2:4]
    return enc, y0, targets, extras


def build_model(tensor: FeatureTensor, cfg: TrainConfig, hidden_size: int, num_layers: int) -> nn.Seq2SeqModel:
    decoder_width = 1 + (2 if cfg.decoder_feeds_constants else 0)
    return nn.init_model(
        input_size=tensor.data.shape[2],
        hidden_size=hidden_size,
        num_layers=num_layers,
        seed=cfg.seed,
        decoder_input_size=decoder_width,
    )


class Trainer:
    """Stateful, epoch-resumable training driver.

    Used directly by the hyperparameter search (which trains in rung-sized
    increments) and wrapped by :func:`train` for one-shot runs.
    """

    def __init__(self, model: nn.Seq2SeqModel, tensor: FeatureTensor, cfg: TrainConfig):
        train_idx = np.nonzero(tensor.train_mask)[0]
        if train_idx.size == 0:
            raise EmptyDataset("tensor has no training objects")
        self.model = model
        self.tensor = tensor
        self.cfg = cfg
        self.train_idx = train_idx
        self.val_idx = np.nonzero(~tensor.train_mask)[0]
        self.optimizer = nn.OptimizerState.for_model(
            model,
            lr=cfg.learning_rate,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            clipnorm=cfg.clipnorm,
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.report = TrainReport()
        lo, hi = tensor.time_stats()
        self._day2 = (hi - lo) ** 2

    def validation_loss(self) -> float:
        """Pure-inference loss over the validation objects (normalized units)."""
        if self.val_idx.size == 0:
            return math.nan
        enc, y0, targets, extras = _tensor_views(self.tensor, self.cfg, self.val_idx)
        preds = nn.predict_sequence(self.model, enc, y0, self.cfg.ty, extras=extras)
        increments = np.diff(preds, axis=1)
        self.report.nonmonotone_validation_count += int((increments <= 0).any(axis=1).sum())
        return nn.mse_loss(targets, preds)

    def run_one_epoch(self) -> tuple[float, float]:
        """Train one epoch; returns (train, validation) loss in day^2."""
        cfg = self.cfg
        eps = sampling_probability(self.epoch, cfg.decay_k)
        order = self.rng.permutation(self.train_idx)
        total, seen = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            enc, y0, targets, extras = _tensor_views(self.tensor, cfg, chunk)
            mask = draw_mask(cfg.ty, eps, self.rng)
            loss, _, grads = nn.backward(
                self.model,
                nn.TrainingBatch(enc, y0, targets, decoder_extras=extras),
                sampling_mask=mask,
            )
            nn.clip_and_step(self.optimizer, self.model, grads)
            total += loss * chunk.size
            seen += chunk.size
        train_loss = total / seen
        val_loss = self.validation_loss()
        if not (math.isfinite(train_loss) and (math.isnan(val_loss) or math.isfinite(val_loss))):
            raise NumericalError(
                f"non-finite loss at epoch {self.epoch}: train={train_loss}, val={val_loss}"
            )
        self.epoch += 1
        train_day2 = train_loss * self._day2
        val_day2 = val_loss * self._day2
        self.report.train_loss.append(train_day2)
        self.report.val_loss.append(val_day2)
        tracked = val_day2 if not math.isnan(val_day2) else train_day2
        if tracked < self.report.best_val_loss:
            self.report.best_val_loss = tracked
            self.report.best_epoch = self.epoch - 1
            self.report.best_state = nn.model_state(self.model)
        return train_day2, val_day2

    def run_to(self, epoch: int) -> float:
        """Advance training to the given epoch count; returns the last
        validation loss (day^2)."""
        last_val = math.nan
        while self.epoch < epoch:
            _, last_val = self.run_one_epoch()
        return last_val


def train(model: nn.Seq2SeqModel, tensor: FeatureTensor, cfg: TrainConfig) -> TrainReport:
    """Run a full training job and return its report.

    With ``epochs=0`` the model is untouched and the report is empty. When a
    loss-curve path is configured, one CSV row per epoch is written.
    """
    started = time.perf_counter()
    trainer = Trainer(model, tensor, cfg)
    for _ in range(cfg.epochs):
        trainer.run_one_epoch()
    report = trainer.report
    report.wall_time = time.perf_counter() - started
    if cfg.loss_curve_path is not None:
        with open(cfg.loss_curve_path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(report.train_loss, report.val_loss)):
                writer.writerow([i, repr(tr), repr(va)])
    return report


def predict(
    model: nn.Seq2SeqModel,
    input_segment: np.ndarray,
    y0: float | np.ndarray,
    stats: tuple[float, float] | None,
    extras: np.ndarray | None = None,
) -> np.ndarray:
    """Predict the remaining residual-time sequence, in days.

    Runs in pure-inference mode (all feedback) and denormalizes through the
    stored time statistics; the final element is the re-entry time at the
    80 km altitude.
    """
    if stats is None:
        raise MissingStats("normalization statistics are required to denormalize")
    segment = np.asarray(input_segment, dtype=float)
    ty = SEQUENCE_LENGTH - (segment.shape[-2] if segment.ndim >= 2 else 0)
    if not 1 <= ty < SEQUENCE_LENGTH:
        raise nn.ShapeMismatch(f"input segment leaves no output steps: {segment.shape}")
    preds = nn.predict_sequence(model, segment, y0, ty, extras=extras)
    return minmax_denormalize(preds, stats)


def predict_object(
    model: nn.Seq2SeqModel, tensor: FeatureTensor, norad_id: int, tx: int,
    decoder_feeds_constants: bool = False,
) -> np.ndarray:
    """Convenience wrapper: predict one tensor object from its first ``tx`` steps."""
    idx = tensor.index_of(norad_id)
    cfg_like = TrainConfig(
        learning_rate=1.0, batch_size=1, epochs=0, decay_k=0.5, tx=tx,
        decoder_feeds_constants=decoder_feeds_constants,
    )
    enc, y0, _, extras = _tensor_views(tensor, cfg_like, np.array([idx]))
    return predict(model, enc, y0, tensor.time_stats(), extras=extras)[0]
