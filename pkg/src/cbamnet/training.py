"""Adam, early stopping, plateau scheduling, the two-phase protocol, and
multi-seed orchestration.

Phase 1 trains only the attention block and head on a frozen backbone at a
high learning rate; phase 2 unfreezes the last backbone layers at a much
lower one. Optimizer and scheduler state start fresh at the phase boundary
(the trainable set and learning rate both change, so stale moments would be
misscaled), while model weights carry straight through. After every epoch
the checkpoint is rewritten iff validation accuracy strictly beats the best
seen so far across both phases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .backbone import Model, build_model, get_preset
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, DatasetRecord, augment, load_image
from .fsio import atomic_write_text
from .tensor import ParameterSet, ShapeError, Tensor, backward


class TrainingFault(RuntimeError):
    """Non-finite loss or a failed run inside a sweep."""


DEFAULT_SEEDS = (42, 7, 123)


@dataclass(frozen=True)
class PhaseConfig:
    epochs: int
    lr: float
    unfreeze_last_n: int
    phase_id: int


def default_phases(model: Model) -> tuple[PhaseConfig, PhaseConfig]:
    """Frozen-base phase then selective fine-tuning.

    The full preset unfreezes its last 30 layers; smaller presets unfreeze
    half their backbone layers, the proportional analogue.
    """
    n_layers = len(model.backbone_layers())
    unfreeze = 30 if n_layers >= 30 else n_layers // 2
    return (PhaseConfig(epochs=15, lr=1e-3, unfreeze_last_n=0, phase_id=1),
            PhaseConfig(epochs=20, lr=1e-5, unfreeze_last_n=unfreeze, phase_id=2))


class AdamState:
    """First/second moment estimates with bias correction."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One update of every gradient-bearing parameter; frozen ones are absent."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class EarlyStopState:
    """Stop after `patience` epochs without the monitored loss improving."""

    patience: int = 5
    min_delta: float = 1e-4
    best: float = math.inf
    epochs_since_improvement: int = 0

    def update(self, value: float) -> bool:
        """Record one epoch's monitored value; True means stop now."""
        if value < self.best - self.min_delta:
            self.best = value
            self.epochs_since_improvement = 0
            return False
        # Saturate at patience: once stopping is due the counter stays put.
        self.epochs_since_improvement = min(self.epochs_since_improvement + 1, self.patience)
        return self.epochs_since_improvement >= self.patience


@dataclass
class PlateauState:
    """Halve the learning rate after `patience` stagnant epochs, floored at min_lr."""

    lr: float
    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-7
    min_delta: float = 1e-4
    best: float = math.inf
    stagnant: int = 0

    def update(self, value: float) -> float:
        """Record one epoch's monitored value; returns the lr for the next epoch."""
        if value < self.best - self.min_delta:
            self.best = value
            self.stagnant = 0
            return self.lr
        self.stagnant += 1
        if self.stagnant >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.stagnant = 0
        return self.lr


@dataclass
class EpochStats:
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    lr: float


@dataclass
class TrainHistory:
    phase: int
    epochs: list[EpochStats] = field(default_factory=list)
    stop_reason: str = "budget_exhausted"
    best_epoch: int = 0  # 1-based within this phase
    best_val_accuracy: float = -math.inf
    initial_val_accuracy: float | None = None  # measured before the first epoch


@dataclass
class RunStreams:
    """Independent per-purpose generators, all derived from the run seed."""

    augment: np.random.Generator
    dropout: np.random.Generator
    batch: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunStreams":
        children = np.random.SeedSequence(seed).spawn(3)
        return cls(*(np.random.default_rng(c) for c in children))


@dataclass
class ArrayDataset:
    images: np.ndarray  # (N, side, side, 3) in [0, 1]
    labels: np.ndarray  # (N,)
    records: list[DatasetRecord]

    def __len__(self):
        return len(self.labels)


def load_records(records: list[DatasetRecord], side: int) -> ArrayDataset:
    images = np.stack([load_image(r.path, side) for r in records]) if records else \
        np.zeros((0, side, side, 3))
    labels = np.array([int(r.label) for r in records], dtype=np.int64)
    return ArrayDataset(images=images, labels=labels, records=list(records))


def _batch_slices(n: int, batch_size: int):
    """Full batches plus a trailing partial one when it still has >= 2 samples
    (train-mode batch norm needs a defined variance)."""
    slices = []
    start = 0
    while start < n:
        stop = min(start + batch_size, n)
        if stop - start >= 2:
            slices.append((start, stop))
        start = stop
    return slices


def train_epoch(model: Model, data: ArrayDataset, class_weights: np.ndarray,
                adam: AdamState, lr: float, batch_size: int, streams: RunStreams,
                augment_cfg: AugmentConfig, epoch_index: int = 0) -> tuple[float, float]:
    """One seeded-shuffle pass: augment, forward, weighted loss, backward, step."""
    if len(data) == 0:
        raise ValueError("train_epoch needs a nonempty dataset")
    order = streams.batch.permutation(len(data))
    total_loss = 0.0
    total_correct = 0
    total_seen = 0
    for batch_index, (start, stop) in enumerate(_batch_slices(len(data), batch_size)):
        idx = order[start:stop]
        images = np.stack([augment(data.images[i], augment_cfg, streams.augment) for i in idx])
        labels = data.labels[idx]
        probs, _ = model.forward(Tensor(images), "train", rng=streams.dropout)
        loss = ops.weighted_cross_entropy(probs, labels, class_weights)
        if not np.isfinite(loss.data):
            raise TrainingFault(
                f"non-finite loss at epoch {epoch_index}, batch {batch_index}")
        model.params.clear_grads()
        backward(loss)
        grads = {name: t.grad for name, t in model.params.trainable_items()
                 if t.grad is not None}
        adam_step(model.params, grads, adam, lr)
        n = len(idx)
        total_loss += loss.item() * n
        total_correct += int((probs.data.argmax(axis=1) == labels).sum())
        total_seen += n
    return total_loss / total_seen, total_correct / total_seen


def evaluate_dataset(model: Model, data: ArrayDataset,
                     batch_size: int = 32) -> tuple[float, float, np.ndarray]:
    """Infer-mode loss (unweighted), accuracy, and the full probability matrix."""
    if len(data) == 0:
        raise ValueError("evaluate_dataset needs a nonempty dataset")
    chunks = []
    for start in range(0, len(data), batch_size):
        stop = min(start + batch_size, len(data))
        probs, _ = model.forward(Tensor(data.images[start:stop]), "infer")
        chunks.append(probs.data)
    probs = np.concatenate(chunks)
    loss = ops.weighted_cross_entropy(Tensor(probs), data.labels, np.ones(model.head.classes))
    accuracy = float((probs.argmax(axis=1) == data.labels).mean())
    return loss.item(), accuracy, probs


@dataclass
class TwoPhaseResult:
    checkpoint_path: Path
    histories: list[TrainHistory]
    best_val_accuracy: float
    best_epoch: int  # 1-based across both phases

    def load_best(self) -> Model:
        model, _ = load_checkpoint(self.checkpoint_path)
        return model


def run_two_phase(model: Model, train_data: ArrayDataset, val_data: ArrayDataset,
                  phases: tuple[PhaseConfig, ...], class_weights: np.ndarray,
                  checkpoint_path, seed: int, batch_size: int = 32,
                  augment_cfg: AugmentConfig | None = None) -> TwoPhaseResult:
    if len(val_data) == 0:
        raise ValueError("two-phase training needs a nonempty validation set")
    augment_cfg = augment_cfg or AugmentConfig()
    checkpoint_path = Path(checkpoint_path)
    streams = RunStreams.from_seed(seed)
    best_acc = -math.inf
    best_epoch = 0
    global_epoch = 0
    histories = []

    for phase in phases:
        model.set_trainable(phase.unfreeze_last_n)
        adam = AdamState()
        early = EarlyStopState()
        plateau = PlateauState(lr=phase.lr)
        history = TrainHistory(phase=phase.phase_id)
        if histories:  # later phases resume from the previous phase's weights
            _, history.initial_val_accuracy, _ = evaluate_dataset(model, val_data, batch_size)
        lr = phase.lr
        for epoch in range(1, phase.epochs + 1):
            train_loss, train_acc = train_epoch(
                model, train_data, class_weights, adam, lr, batch_size, streams,
                augment_cfg, epoch_index=global_epoch + 1)
            val_loss, val_acc, _ = evaluate_dataset(model, val_data, batch_size)
            history.epochs.append(EpochStats(train_loss, train_acc, val_loss, val_acc, lr))
            global_epoch += 1
            if val_acc > history.best_val_accuracy:
                history.best_val_accuracy = val_acc
                history.best_epoch = epoch
            if val_acc > best_acc:
                best_acc = val_acc
                best_epoch = global_epoch
                save_checkpoint(model, checkpoint_path, metadata={
                    "epoch": global_epoch, "val_accuracy": val_acc, "seed": seed})
            lr = plateau.update(val_loss)
            if early.update(val_loss):
                history.stop_reason = "early_stop"
                break
        histories.append(history)

    return TwoPhaseResult(checkpoint_path=checkpoint_path, histories=histories,
                          best_val_accuracy=best_acc, best_epoch=best_epoch)


def history_csv(histories: list[TrainHistory]) -> str:
    """epoch, phase, train_loss, train_acc, val_loss, val_acc, lr rows.

    Floats use repr (shortest round-trip), so identical runs produce
    byte-identical files.
    """
    lines = ["epoch,phase,train_loss,train_acc,val_loss,val_acc,lr"]
    epoch = 0
    for history in histories:
        for stats in history.epochs:
            epoch += 1
            lines.append(f"{epoch},{history.phase},{stats.train_loss!r},"
                         f"{stats.train_accuracy!r},{stats.val_loss!r},"
                         f"{stats.val_accuracy!r},{stats.lr!r}")
    return "\n".join(lines) + "\n"


@dataclass
class SeedRunSummary:
    seed: int
    checkpoint_path: Path
    histories: list[TrainHistory]
    best_val_accuracy: float


@dataclass
class MultiSeedResult:
    seeds: list[int]
    runs: list[SeedRunSummary]
    val_accuracy_mean: float
    val_accuracy_std: float


def run_multi_seed(train_data: ArrayDataset, val_data: ArrayDataset,
                   preset_name: str, side: int, class_weights: np.ndarray,
                   out_dir, seeds=DEFAULT_SEEDS, batch_size: int = 32,
                   phases: tuple[PhaseConfig, ...] | None = None,
                   augment_cfg: AugmentConfig | None = None,
                   cbam_ratio: int = 8) -> MultiSeedResult:
    """Train one run per seed on a shared, pre-split dataset.

    The split is constant across seeds (it was made with its own seed before
    this call); each run's model init, dropout, augmentation, and batch order
    derive from the run seed alone.
    """
    from .backbone import CbamConfig

    if len(seeds) < 2:
        raise ValueError("multi-seed runs need at least 2 seeds for a std")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for seed in seeds:
        try:
            model = build_model(get_preset(preset_name, input_side=side),
                                cbam=CbamConfig(ratio=cbam_ratio), seed=seed)
            run_phases = phases or default_phases(model)
            result = run_two_phase(
                model, train_data, val_data, run_phases, class_weights,
                out_dir / f"best_seed{seed}.ckpt", seed=seed, batch_size=batch_size,
                augment_cfg=augment_cfg)
        except Exception as exc:
            raise TrainingFault(f"run for seed {seed} failed: {exc}") from exc
        atomic_write_text(out_dir / f"history_seed{seed}.csv", history_csv(result.histories))
        runs.append(SeedRunSummary(seed=seed, checkpoint_path=result.checkpoint_path,
                                   histories=result.histories,
                                   best_val_accuracy=result.best_val_accuracy))
    from .metrics import aggregate_runs

    agg = aggregate_runs([r.best_val_accuracy for r in runs])
    return MultiSeedResult(seeds=list(seeds), runs=runs,
                           val_accuracy_mean=agg.mean, val_accuracy_std=agg.std)
