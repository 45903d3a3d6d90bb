"""Seeded MicroAttNet training with focal loss, Adam and early stopping."""
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from errors import CheckpointFormatError, ConfigurationError, DataError, NumericError, TrainingAborted, UsageError
from evaluation import evaluate_sequences, group_by_sequence
from microattnet import (
    DEFAULT_THRESHOLD,
    ModelConfig,
    ModelState,
    build,
    clone_state,
    forward,
    load_model,
    predict_probabilities,
    save_model,
    state_blobs,
    state_from_blobs,
)
from pipeline import NormStats, TrainingSample, compute_norm_stats, samples_to_arrays
from tensorgrad import Adam, AdamState, Tensor, backward, binary_cross_entropy, focal_loss, load_blobs, no_grad, save_blobs

logger = logging.getLogger(__name__)

HISTORY_HEADERS = ["epoch", "train_loss", "val_loss", "val_uf1", "seconds"]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs_max: int = 50
    batch_size: int = 32
    gamma_focal: float = 2.0
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0
    precision: str = "f32"
    loss: str = "focal"
    phase_policy: str = "both"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if self.patience < 1 or self.epochs_max < 1:
            raise ConfigurationError("patience and epochs_max must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2 for batch normalization, got {self.batch_size}")
        if self.loss not in ("focal", "bce"):
            raise ConfigurationError(f"Unknown loss '{self.loss}'")
        if self.phase_policy not in ("both", "onset_apex"):
            raise ConfigurationError(f"Unknown phase policy '{self.phase_policy}'")
        if self.min_delta < 0 or self.gamma_focal < 0:
            raise ConfigurationError("min_delta and gamma_focal must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_uf1: float
    seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def best_epoch(self) -> int:
        """Epoch (1-based) with the lowest validation loss; the earliest on ties."""
        if not self.epochs:
            return 0
        return min(self.epochs, key=lambda r: r.val_loss).epoch

    @property
    def best_val_loss(self) -> float:
        return min(r.val_loss for r in self.epochs) if self.epochs else float("inf")


@dataclass
class TrainingCheckpoint:
    state: ModelState
    best_state: ModelState
    adam: AdamState
    rng_state: dict
    history: TrainHistory
    train_config: TrainConfig


def early_stop_check(history: TrainHistory, patience: int, min_delta: float) -> bool:
    """True when `patience` epochs passed since the last improvement larger than min_delta."""
    if not history.epochs:
        raise UsageError("early_stop_check needs at least one recorded epoch")
    reference = history.epochs[0]
    for record in history.epochs[1:]:
        if record.val_loss < reference.val_loss - min_delta:
            reference = record
    return history.epochs[-1].epoch - reference.epoch >= patience


def _loss(logits: Tensor, targets: np.ndarray, config: TrainConfig) -> Tensor:
    if config.loss == "bce":
        return binary_cross_entropy(logits, targets)
    return focal_loss(logits, targets, config.gamma_focal)


def evaluate_loss(state: ModelState, features: np.ndarray, labels: np.ndarray, batch_size: int,
                  config: TrainConfig) -> float:
    """Eval-mode mean loss over every sample, the last partial batch included."""
    if len(features) == 0:
        raise ConfigurationError("cannot evaluate loss on an empty sample set")
    total = 0.0
    with no_grad():
        for start in range(0, len(features), batch_size):
            logits = forward(features[start:start + batch_size], state, training=False).logits
            batch_labels = labels[start:start + batch_size]
            total += float(_loss(logits, batch_labels, config).data) * len(batch_labels)
    return total / len(features)


def _validate_inputs(train_samples: Sequence[TrainingSample], val_samples: Sequence[TrainingSample]) -> None:
    if not val_samples:
        raise ConfigurationError("validation set is empty")
    if not train_samples:
        raise ConfigurationError("training set is empty")
    overlap = {s.sequence_id for s in train_samples} & {s.sequence_id for s in val_samples}
    if overlap:
        raise DataError(f"train and validation share sequences: {sorted(overlap)[:3]}")


def train(train_samples: Sequence[TrainingSample], val_samples: Sequence[TrainingSample],
          model_config: ModelConfig, train_config: TrainConfig, stats: Optional[NormStats] = None,
          checkpoint_path: Optional[Union[str, Path]] = None,
          resume_from: Optional[TrainingCheckpoint] = None) -> tuple[ModelState, TrainHistory]:
    """Train MicroAttNet and return the state of the epoch with the lowest validation loss.

    Args:
        train_samples: Training samples, already in canonical order.
        val_samples: Eval-mode validation samples.
        model_config: Network geometry; its precision is replaced by the training precision.
        train_config: Optimizer, loss and stopping settings.
        stats: Normalization statistics; computed from train_samples when omitted.
        checkpoint_path: Where to write a resumable checkpoint after every epoch.
        resume_from: A checkpoint to continue from instead of a fresh model.

    Returns:
        The best state and the full history.
    """
    _validate_inputs(train_samples, val_samples)
    model_config = replace(model_config, precision=train_config.precision)
    stats = stats or compute_norm_stats(train_samples)
    dtype = model_config.dtype
    train_x, train_y = samples_to_arrays(train_samples, stats, dtype)
    val_x, val_y = samples_to_arrays(val_samples, stats, dtype)
    batches_per_epoch = len(train_x) // train_config.batch_size
    if batches_per_epoch == 0:
        raise ConfigurationError(
            f"training set of {len(train_x)} samples is smaller than batch size {train_config.batch_size}"
        )

    model_seed, data_seed = np.random.SeedSequence(train_config.seed).spawn(2)
    rng = np.random.default_rng(data_seed)
    if resume_from is not None:
        state = resume_from.state
        best_state = resume_from.best_state
        history = resume_from.history
        optimizer = Adam(state.parameters(), state=resume_from.adam)
        rng.bit_generator.state = resume_from.rng_state
        logger.info(f"Resuming training after epoch {len(history.epochs)}")
    else:
        state = build(model_config, seed=int(model_seed.generate_state(1)[0]))
        best_state = clone_state(state)
        history = TrainHistory()
        optimizer = Adam(state.parameters(), lr=train_config.lr)
    optimizer.state.lr = train_config.lr

    if history.epochs and early_stop_check(history, train_config.patience, train_config.min_delta):
        history.stopped_early = True
        return best_state, history

    first_epoch = len(history.epochs) + 1
    for epoch in tqdm(range(first_epoch, train_config.epochs_max + 1), desc="train", unit="epoch"):
        started = time.perf_counter()
        order = rng.permutation(len(train_x))
        total = 0.0
        for batch in range(batches_per_epoch):
            index = order[batch * train_config.batch_size:(batch + 1) * train_config.batch_size]
            optimizer.zero_grad()
            try:
                prediction = forward(train_x[index], state, training=True, rng=rng)
                loss = _loss(prediction.logits, train_y[index], train_config)
            except NumericError as e:
                logger.error(f"Non-finite values in epoch {epoch}, batch {batch + 1}: {e}")
                raise TrainingAborted(epoch, batch + 1, float("nan")) from e
            backward(loss)
            optimizer.step()
            total += float(loss.data)

        val_loss = evaluate_loss(state, val_x, val_y, train_config.batch_size, train_config)
        _, probability_sets, sequence_labels = group_by_sequence(
            val_samples, predict_probabilities(state, val_x, train_config.batch_size))
        val_uf1 = evaluate_sequences(probability_sets, sequence_labels, DEFAULT_THRESHOLD).uf1
        improved = val_loss < history.best_val_loss
        history.epochs.append(EpochRecord(epoch, total / batches_per_epoch, val_loss, val_uf1,
                                          time.perf_counter() - started))
        if improved:
            best_state = clone_state(state)
        logger.info(f"Epoch {epoch}: train loss {total / batches_per_epoch:.5f}, "
                    f"val loss {val_loss:.5f}, val UF1 {val_uf1:.3f}")

        if checkpoint_path is not None:
            save_training_checkpoint(checkpoint_path, TrainingCheckpoint(
                state, best_state, optimizer.state, rng.bit_generator.state, history, train_config))
        if early_stop_check(history, train_config.patience, train_config.min_delta):
            history.stopped_early = True
            logger.info(f"Early stopping after epoch {epoch}; best epoch {history.best_epoch}")
            break

    return best_state, history


# Checkpoints

def save_training_checkpoint(path: Union[str, Path], checkpoint: TrainingCheckpoint) -> None:
    adam = checkpoint.adam
    header = {
        "kind": "training",
        "model_config": asdict(checkpoint.state.config),
        "train_config": asdict(checkpoint.train_config),
        "rng_state": checkpoint.rng_state,
        "adam": {"step_count": adam.step_count, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                 "eps_adam": adam.eps_adam},
        "history": [asdict(record) for record in checkpoint.history.epochs],
        "stopped_early": checkpoint.history.stopped_early,
    }
    blobs = {f"model/{name}": array for name, array in state_blobs(checkpoint.state).items()}
    blobs.update({f"best/{name}": array for name, array in state_blobs(checkpoint.best_state).items()})
    for i, (m, v) in enumerate(zip(adam.first_moment, adam.second_moment)):
        blobs[f"adam.m/{i}"] = m
        blobs[f"adam.v/{i}"] = v
    save_blobs(path, header, blobs)


def restore_training(path: Union[str, Path]) -> TrainingCheckpoint:
    header, blobs = load_blobs(path)
    if header.get("kind") != "training":
        raise CheckpointFormatError(f"{path}: not a training checkpoint")
    model_config = ModelConfig(**header["model_config"])

    def section(prefix: str) -> dict[str, np.ndarray]:
        return {name[len(prefix):]: array for name, array in blobs.items() if name.startswith(prefix)}

    state = state_from_blobs(model_config, section("model/"))
    moments = len(state.parameters())
    adam = AdamState(
        first_moment=[blobs[f"adam.m/{i}"] for i in range(moments)],
        second_moment=[blobs[f"adam.v/{i}"] for i in range(moments)],
        **header["adam"],
    )
    history = TrainHistory([EpochRecord(**record) for record in header["history"]], header["stopped_early"])
    return TrainingCheckpoint(state, state_from_blobs(model_config, section("best/")), adam, header["rng_state"],
                              history, TrainConfig(**header["train_config"]))


def checkpoint(state: ModelState, history: TrainHistory, path: Union[str, Path]) -> None:
    """Save a trained state together with its history."""
    save_model(state, path, {
        "history": [asdict(record) for record in history.epochs],
        "stopped_early": history.stopped_early,
    })


def restore(path: Union[str, Path]) -> tuple[ModelState, TrainHistory]:
    state, header = load_model(path)
    history = TrainHistory([EpochRecord(**r) for r in header.get("history", [])], header.get("stopped_early", False))
    return state, history


# Provenance

def write_history_csv(history: TrainHistory, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_HEADERS, lineterminator="\n")
        writer.writeheader()
        for record in history.epochs:
            writer.writerow({
                "epoch": record.epoch,
                "train_loss": repr(record.train_loss),
                "val_loss": repr(record.val_loss),
                "val_uf1": repr(record.val_uf1),
                "seconds": f"{record.seconds:.3f}",
            })


def write_run_manifest(path: Union[str, Path], model_config: ModelConfig, train_config: TrainConfig,
                       extra: Optional[dict] = None) -> None:
    """Every hyperparameter of a run as sorted JSON."""
    manifest = {"model_config": asdict(model_config), "train_config": asdict(train_config), **(extra or {})}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
