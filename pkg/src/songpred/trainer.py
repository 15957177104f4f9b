"""Training loop: AdamW with cosine annealing, early stopping, the config grid.

A dataset here is a list of :class:`SongSample`. In segment mode every
30-second segment embedding is one training row carrying its song's
targets; in song mode the per-layer mean over segments is a single row.
Validation and test always score at song level: per-segment predictions
are averaged through :func:`songpred.metrics.aggregate_song_predictions`
(one code path for both input modes).
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .datamodel import SegmentEmbeddingSet, SongRecord, load_embeddings
from .errors import ConfigError, NumericError
from .losses import LossStrategy, combine_losses, task_mse
from .network import (ArchConfig, ModelParams, backward, forward, init_model)
from .scores import LabelVector

LOSS_KINDS = ("equal", "weighted", "uncertainty")
INPUT_MODES = ("segment", "song")
TASK_MODES = ("popularity", "full")

_CONFIG_KEYS = ("loss", "depth", "mode", "tasks", "lr0", "weight_decay",
                "batch_size", "max_epochs", "patience", "seed", "lr_min")


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "equal"
    depth: int = 2
    mode: str = "song"
    tasks: str = "full"
    lr0: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    lr_min: float = 0.0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss strategy {self.loss!r}")
        if self.depth not in (2, 3):
            raise ConfigError(f"depth must be 2 or 3, got {self.depth}")
        if self.mode not in INPUT_MODES:
            raise ConfigError(f"unknown input mode {self.mode!r}")
        if self.tasks not in TASK_MODES:
            raise ConfigError(f"unknown task configuration {self.tasks!r}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("patience and max_epochs must be >= 1")

    def arch(self, **overrides) -> ArchConfig:
        return ArchConfig(trunk_depth=self.depth, task_mode=self.tasks, **overrides)

    def strategy(self) -> LossStrategy:
        return LossStrategy(kind=self.loss)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in _CONFIG_KEYS}


def load_train_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ConfigError("train config must be a JSON object")
    unknown = set(obj) - set(_CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    try:
        return TrainConfig(**obj)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class SongSample:
    song_id: str
    segments: np.ndarray   # (n_segments, 4, input_dim)
    targets: np.ndarray    # (2,) or (7,) label values in natural units


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopping_reason: str = ""
    test_metrics: Optional[dict[str, dict]] = None

    def to_dict(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "stopping_reason": self.stopping_reason,
            "test_metrics": self.test_metrics,
        }


def labels_to_targets(labels: LabelVector, tasks: str) -> np.ndarray:
    if tasks == "popularity":
        return np.array([labels.streams_score, labels.likes_score])
    if labels.aesthetics is None:
        raise ValueError("full task configuration requires aesthetic labels")
    return np.array([labels.streams_score, labels.likes_score, *labels.aesthetics])


def assemble_samples(records: Sequence[SongRecord], store,
                     labels: dict[str, LabelVector], tasks: str) -> list[SongSample]:
    """Join records with their embedding files and targets."""
    samples = []
    for r in records:
        emb = load_embeddings(store, r.embedding_ref or r.song_id)
        samples.append(SongSample(song_id=r.song_id, segments=emb.values,
                                  targets=labels_to_targets(labels[r.song_id], tasks)))
    return samples


def build_inputs(emb: SegmentEmbeddingSet, mode: str) -> list[np.ndarray]:
    """Per-sample (4, dim) inputs: one per segment, or one per-layer mean."""
    if mode == "segment":
        return [emb.values[i] for i in range(emb.n_segments)]
    if mode == "song":
        return [emb.values.mean(axis=0)]
    raise ValueError(f"unknown input mode {mode!r}")


def _input_rows(segments: np.ndarray, mode: str) -> np.ndarray:
    return segments if mode == "segment" else segments.mean(axis=0, keepdims=True)


def cosine_lr(t: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr0 at t=0 down to lr_min at t=total."""
    if total < 1 or t < 0:
        raise ValueError("need total >= 1 and t >= 0")
    if t > total:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * t / total))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    decayed: frozenset[str]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer_state(params: ModelParams) -> OptimizerState:
    names = params.learnable_names()
    arrays = dict(params.named_arrays())
    return OptimizerState(
        m={n: np.zeros_like(arrays[n]) for n in names},
        v={n: np.zeros_like(arrays[n]) for n in names},
        decayed=frozenset(params.decayed_names()),
    )


def adamw_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float,
               weight_decay: float = 0.0) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One decoupled-weight-decay Adam step, in place.

    Decay applies only to the names in ``state.decayed`` (linear weights
    and biases, never batch-norm or uncertainty parameters) and uses the
    pre-step parameter value.
    """
    for name in state.m:
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for {name}; step refused")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in state.m:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if weight_decay != 0.0 and name in state.decayed:
            update = update + lr * weight_decay * arrays[name]
        arrays[name] -= update
    return arrays, state


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _flatten_rows(samples: Sequence[SongSample], mode: str) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for s in samples:
        rows = _input_rows(s.segments, mode)
        xs.append(rows)
        ys.append(np.tile(s.targets, (rows.shape[0], 1)))
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


def predict_songs(params: ModelParams, samples: Sequence[SongSample],
                  mode: str) -> np.ndarray:
    """Song-level predictions (n_songs, n_tasks), eval phase.

    All rows go through one forward pass; per-song rows are then averaged
    with :func:`metrics.aggregate_song_predictions`, the same aggregation
    metrics use.
    """
    rows = [_input_rows(s.segments, mode) for s in samples]
    counts = [r.shape[0] for r in rows]
    preds, _ = forward(params, np.concatenate(rows, axis=0), phase="eval")
    out = np.empty((len(samples), params.arch.n_tasks))
    pos = 0
    for i, c in enumerate(counts):
        out[i] = metrics.aggregate_song_predictions(preds[pos:pos + c])
        pos += c
    return out


def _song_targets(samples: Sequence[SongSample]) -> np.ndarray:
    return np.stack([s.targets for s in samples])


def validation_loss(params: ModelParams, samples: Sequence[SongSample],
                    config: TrainConfig) -> float:
    preds = predict_songs(params, samples, config.mode)
    targets = _song_targets(samples)[:, :preds.shape[1]]
    mses = np.array([task_mse(preds[:, t], targets[:, t])[0]
                     for t in range(preds.shape[1])])
    eta = params.eta if config.loss == "uncertainty" else None
    return combine_losses(mses, config.strategy(), eta).total


def train(train_set: Sequence[SongSample], val_set: Sequence[SongSample],
          config: TrainConfig, test_set: Optional[Sequence[SongSample]] = None,
          arch_overrides: Optional[dict] = None) -> tuple[ModelParams, TrainReport]:
    """Full training run; returns the parameters of the best validation epoch."""
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    arch = config.arch(**(arch_overrides or {}))
    strategy = config.strategy()
    params = init_model(arch, config.seed)
    arrays = dict(params.named_arrays())
    state = init_optimizer_state(params)
    rng = np.random.default_rng(config.seed)

    x_train, y_train = _flatten_rows(train_set, config.mode)
    n_rows = x_train.shape[0]
    if n_rows < 2:
        raise ValueError("need at least 2 training rows")
    n_tasks = arch.n_tasks
    if y_train.shape[1] < n_tasks:
        raise ValueError(f"targets have {y_train.shape[1]} tasks, model expects {n_tasks}")
    y_train = y_train[:, :n_tasks]  # canonical task order puts popularity first

    report = TrainReport()
    best_val = np.inf
    best_params = params.copy()
    epochs_no_improve = 0

    for epoch in range(config.max_epochs):
        lr = cosine_lr(epoch, config.max_epochs, config.lr0, config.lr_min)
        perm = rng.permutation(n_rows)
        loss_sum = 0.0
        rows_seen = 0
        for start in range(0, n_rows, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if idx.shape[0] < 2:
                continue  # batch statistics need >= 2 rows
            try:
                preds, cache = forward(params, x_train[idx], phase="train", rng=rng)
                mses = np.empty(n_tasks)
                loss_grads = np.empty_like(preds)
                for t in range(n_tasks):
                    mses[t], dpred = task_mse(preds[:, t], y_train[idx, t])
                    loss_grads[:, t] = dpred
                eta = params.eta if config.loss == "uncertainty" else None
                combined = combine_losses(mses, strategy, eta)
                loss_grads *= combined.task_scale
                grads = backward(params, cache, loss_grads)
                if combined.dtotal_deta is not None:
                    grads["eta"] = combined.dtotal_deta
                adamw_step(arrays, grads, state, lr, config.weight_decay)
            except NumericError as exc:
                raise NumericError(
                    f"epoch {epoch}, step {start // config.batch_size}: {exc}") from exc
            loss_sum += combined.total * idx.shape[0]
            rows_seen += idx.shape[0]
        report.train_losses.append(loss_sum / rows_seen)

        val_loss = validation_loss(params, val_set, config)
        report.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            report.best_epoch = epoch
            epochs_no_improve = 0
        else:
            epochs_no_improve += 1
            if epochs_no_improve >= config.patience:
                report.stopping_reason = "early_stopping"
                break
    if not report.stopping_reason:
        report.stopping_reason = "max_epochs"

    if test_set:
        report.test_metrics = evaluate(best_params, test_set, config.mode)
    return best_params, report


def evaluate(params: ModelParams, samples: Sequence[SongSample],
             mode: str) -> dict[str, dict]:
    """Per-task regression metrics at song level."""
    preds = predict_songs(params, samples, mode)
    targets = _song_targets(samples)[:, :preds.shape[1]]
    names = params.arch.task_names
    return {names[t]: metrics.regression_report(preds[:, t], targets[:, t]).to_dict()
            for t in range(len(names))}


# ---------------------------------------------------------------------------
# Experimental grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridAxes:
    loss_strategies: tuple[str, ...] = ("equal", "weighted", "uncertainty")
    depths: tuple[int, ...] = (2, 3)
    modes: tuple[str, ...] = ("segment", "song")
    tasks: tuple[str, ...] = ("popularity", "full")

    def __post_init__(self):
        for axis in (self.loss_strategies, self.depths, self.modes, self.tasks):
            if not axis:
                raise ConfigError("grid axes must be non-empty")

    def cells(self, base: TrainConfig) -> list[TrainConfig]:
        """Cartesian product in (loss, depth, mode, task) order; the cell
        seed is the base seed plus the canonical cell index."""
        out = []
        for i, (loss, depth, mode, tasks) in enumerate(
                product(self.loss_strategies, self.depths, self.modes, self.tasks)):
            out.append(replace(base, loss=loss, depth=depth, mode=mode,
                               tasks=tasks, seed=base.seed + i))
        return out


@dataclass
class GridResult:
    config: TrainConfig
    report: Optional[TrainReport] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(),
                "report": None if self.report is None else self.report.to_dict(),
                "error": self.error}


def _run_cell(args) -> GridResult:
    config, train_set, val_set, test_set, arch_overrides = args
    try:
        _, report = train(train_set, val_set, config, test_set, arch_overrides)
        return GridResult(config=config, report=report)
    except Exception as exc:  # cell failures must not kill the grid
        return GridResult(config=config, error=f"{type(exc).__name__}: {exc}")


def run_grid(train_set: Sequence[SongSample], val_set: Sequence[SongSample],
             test_set: Optional[Sequence[SongSample]], axes: GridAxes,
             base: TrainConfig = TrainConfig(),
             cell_order: Optional[Sequence[int]] = None,
             workers: int = 1,
             arch_overrides: Optional[dict] = None) -> list[GridResult]:
    """Train one model per grid cell; results come back in canonical order.

    ``cell_order`` optionally permutes execution; reports are invariant to
    it because every cell derives its seed from its canonical index.
    """
    configs = axes.cells(base)
    order = list(range(len(configs))) if cell_order is None else list(cell_order)
    if sorted(order) != list(range(len(configs))):
        raise ConfigError("cell_order must be a permutation of the cell indices")
    jobs = [(configs[i], train_set, val_set, test_set, arch_overrides) for i in order]
    results: list[Optional[GridResult]] = [None] * len(configs)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, res in zip(order, pool.map(_run_cell, jobs)):
                results[i] = res
    else:
        for i, job in zip(order, jobs):
            results[i] = _run_cell(job)
    return results  # type: ignore[return-value]
