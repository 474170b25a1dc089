"""Weighted-MSE objective, evaluation metrics, Adam with plateau-driven
learning-rate decay, and the pass/partition/sub-epoch training loop.

The loss is sum(w_i * (y_i - p_i)^2) / sum(w_i) with per-sample weights
w_i = 1 + alpha * y_i, so high-intensity targets cost more to miss.  One
training run makes ``passes`` full passes over the data; each pass shuffles
the patch index into ``partitions`` near-equal partitions and iterates each
partition for ``sub_epochs`` sub-epochs; validation loss is measured after
every sub-epoch and drives the plateau scheduler.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, ShapeMismatchError, TrainingDivergedError
from .granule_io import DatasetManifest
from .model3d import (
    ModelConfig,
    ModelParams,
    backward,
    forward,
    init_params,
    load_checkpoint,
    predict_batched,
    save_checkpoint,
    trainable_names,
)
from .patch_index import (
    GranuleStore,
    PatchIndex,
    build_index,
    iter_batches,
    shuffle_partitions,
)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0  # weight slope in w = 1 + alpha * y

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_patience: int = 2       # sub-epochs without improvement
    plateau_factor: float = 0.5
    min_lr: float = 1e-7
    improvement_threshold: float = 1e-8
    passes: int = 3
    partitions: int = 5
    sub_epochs: int = 3
    batch_size: int = 256
    eval_batch_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "plateau_factor", "min_lr", "batch_size",
                     "passes", "partitions", "sub_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class MetricsReport:
    """Summary statistics over one evaluation set.

    ``r2`` is None when the targets have zero variance and the residuals do
    not vanish (the statistic is undefined there; None rather than NaN so
    serialized reports stay comparable).
    """

    n: int
    mse: float
    wmse: float
    mae: float
    r2: float | None
    accuracy: float
    mean_label: float

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mse": self.mse,
            "wmse": self.wmse,
            "mae": self.mae,
            "r2": self.r2,
            "accuracy": self.accuracy,
            "mean_label": self.mean_label,
        }


def wmse_loss(preds: np.ndarray, targets: np.ndarray,
              cfg: LossConfig | None = None):
    """Weighted MSE and its exact gradient with respect to ``preds``.

    loss = sum(w * (y - p)^2) / sum(w),  w = 1 + alpha * y
    dloss/dp_i = -2 * w_i * (y_i - p_i) / sum(w)
    """
    cfg = cfg or LossConfig()
    preds = np.asarray(preds)
    targets = np.asarray(targets, dtype=preds.dtype)
    if preds.shape != targets.shape:
        raise ShapeMismatchError(f"preds {preds.shape} vs targets {targets.shape}")
    if preds.size == 0:
        raise EmptyDatasetError("wmse_loss needs at least one sample")
    w = 1.0 + cfg.alpha * targets
    sw = w.sum()
    resid = targets - preds
    loss = float((w * resid * resid).sum() / sw)
    dpreds = (-2.0 * w * resid / sw).astype(preds.dtype)
    return loss, dpreds


def compute_metrics(preds: np.ndarray, targets: np.ndarray,
                    alpha: float = 1.0) -> MetricsReport:
    """MSE, weighted MSE, MAE, R^2 and threshold accuracy in float64.

    Accuracy binarizes both sides at 0.5; a prediction of exactly 0.5
    counts as positive.
    """
    preds = np.asarray(preds, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if preds.shape != targets.shape:
        raise ShapeMismatchError(f"preds {preds.shape} vs targets {targets.shape}")
    n = preds.size
    if n == 0:
        raise EmptyDatasetError("compute_metrics needs at least one sample")
    resid = targets - preds
    sq = resid * resid
    mse = float(sq.mean())
    mae = float(np.abs(resid).mean())
    w = 1.0 + alpha * targets
    wmse = float((w * sq).sum() / w.sum())
    mean_label = float(targets.mean())
    ss_res = float(sq.sum())
    ss_tot = float(((targets - mean_label) ** 2).sum())
    if ss_tot > 0.0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0.0 else None
    accuracy = float(((preds >= 0.5) == (targets >= 0.5)).mean())
    return MetricsReport(n=n, mse=mse, wmse=wmse, mae=mae, r2=r2,
                         accuracy=accuracy, mean_label=mean_label)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def adam_init(params: ModelParams) -> AdamState:
    names = trainable_names(params.config)
    return AdamState(
        step=0,
        m={k: np.zeros_like(params.tensors[k]) for k in names},
        v={k: np.zeros_like(params.tensors[k]) for k in names},
    )


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay enters as a classic L2 term added to the gradient before
    the moment updates (not as a decoupled shrink).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        theta = params.tensors[name]
        if g.shape != theta.shape:
            raise ShapeMismatchError(f"gradient {name} {g.shape} vs param {theta.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * theta
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def plateau_lr(losses, cfg: TrainConfig) -> float:
    """Learning rate after feeding a loss history to the plateau rule.

    The rate is multiplied by ``plateau_factor`` whenever the loss has not
    improved (by more than ``improvement_threshold``) for
    ``plateau_patience`` consecutive entries; the stall counter resets on
    improvement and after each reduction; the rate never drops below
    ``min_lr``.
    """
    lr = cfg.learning_rate
    best = None
    stalled = 0
    for loss in losses:
        if best is None or loss < best - cfg.improvement_threshold:
            best = loss
            stalled = 0
        else:
            stalled += 1
            if stalled >= cfg.plateau_patience:
                lr = max(lr * cfg.plateau_factor, cfg.min_lr)
                stalled = 0
    return lr


class PlateauScheduler:
    """Stateful wrapper over the plateau rule; one ``step`` per sub-epoch."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self._best: float | None = None
        self._stalled = 0

    def step(self, loss: float) -> float:
        if self._best is None or loss < self._best - self.cfg.improvement_threshold:
            self._best = loss
            self._stalled = 0
        else:
            self._stalled += 1
            if self._stalled >= self.cfg.plateau_patience:
                self.lr = max(self.lr * self.cfg.plateau_factor, self.cfg.min_lr)
                self._stalled = 0
        return self.lr


def adam_state_to_tensors(state: AdamState) -> dict[str, np.ndarray]:
    out = {"opt.step": np.float32(state.step)}
    for k, arr in state.m.items():
        out[f"opt.m.{k}"] = arr
    for k, arr in state.v.items():
        out[f"opt.v.{k}"] = arr
    return out


def adam_state_from_tensors(tensors: dict[str, np.ndarray]) -> AdamState | None:
    if "opt.step" not in tensors:
        return None
    return AdamState(
        step=int(tensors["opt.step"]),
        m={k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")},
        v={k[len("opt.v."):]: v for k, v in tensors.items() if k.startswith("opt.v.")},
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class LogRow:
    pass_num: int
    partition: int
    sub_epoch: int
    train_wmse: float
    val_wmse: float
    lr: float


@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    rows: list[LogRow] = field(default_factory=list)
    best_val_wmse: float = math.inf


def _eval_wmse(params: ModelParams, index: PatchIndex, store: GranuleStore,
               loss_cfg: LossConfig, batch_size: int) -> float:
    preds = []
    targets = []
    order = np.arange(len(index))
    for batch in iter_batches(index, store, order, batch_size):
        p, _ = forward(params, batch.inputs[:, None], mode="eval", keep_caches=False)
        preds.append(p)
        targets.append(batch.targets)
    loss, _ = wmse_loss(np.concatenate(preds), np.concatenate(targets), loss_cfg)
    return loss


def train(manifest_train: DatasetManifest, manifest_val: DatasetManifest,
          out_dir: str | Path,
          model_config: ModelConfig | None = None,
          train_cfg: TrainConfig | None = None,
          loss_cfg: LossConfig | None = None,
          batch_hook=None) -> TrainResult:
    """Run the full pass/partition/sub-epoch loop and emit checkpoints.

    Writes ``final.dck`` (last state plus optimizer moments), ``best.dck``
    (lowest validation weighted MSE) and ``log.csv`` into ``out_dir``.
    ``batch_hook(pass_num, partition, sub_epoch, batch)`` is called before
    every optimization step, for instrumentation.
    """
    train_cfg = train_cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    store_train = GranuleStore(manifest_train)
    store_val = GranuleStore(manifest_val)
    if model_config is None:
        model_config = ModelConfig(in_depth=store_train.channels)
    index_train = build_index(manifest_train, model_config.patch_size)
    index_val = build_index(manifest_val, model_config.patch_size)
    if len(index_train) == 0:
        raise EmptyDatasetError("training index is empty")
    if len(index_val) == 0:
        raise EmptyDatasetError("validation index is empty")

    params = init_params(train_cfg.seed, model_config)
    state = adam_init(params)
    sched = PlateauScheduler(train_cfg)
    result = TrainResult(
        final_checkpoint=out_dir / "final.dck",
        best_checkpoint=out_dir / "best.dck",
        log_path=out_dir / "log.csv",
    )
    best_params: ModelParams | None = None

    for pass_num in range(1, train_cfg.passes + 1):
        parts = shuffle_partitions(index_train, train_cfg.seed + pass_num,
                                   train_cfg.partitions)
        for part_idx, part in enumerate(parts, start=1):
            for sub_epoch in range(1, train_cfg.sub_epochs + 1):
                weighted_sq = 0.0
                weight_sum = 0.0
                for batch in iter_batches(index_train, store_train, part,
                                          train_cfg.batch_size):
                    if batch_hook is not None:
                        batch_hook(pass_num, part_idx, sub_epoch, batch)
                    preds, trace = forward(params, batch.inputs[:, None], mode="train")
                    loss, dpreds = wmse_loss(preds, batch.targets, loss_cfg)
                    if not math.isfinite(loss):
                        raise TrainingDivergedError(
                            f"non-finite training loss at pass {pass_num}, "
                            f"partition {part_idx}, sub-epoch {sub_epoch}"
                        )
                    grads = backward(params, trace, dpreds)
                    adam_step(params, grads, state, sched.lr, train_cfg)
                    w = 1.0 + loss_cfg.alpha * batch.targets.astype(np.float64)
                    resid = batch.targets.astype(np.float64) - preds.astype(np.float64)
                    weighted_sq += float((w * resid * resid).sum())
                    weight_sum += float(w.sum())
                train_wmse = weighted_sq / weight_sum if weight_sum else math.nan
                val_wmse = _eval_wmse(params, index_val, store_val, loss_cfg,
                                      train_cfg.eval_batch_size)
                lr = sched.step(val_wmse)
                result.rows.append(LogRow(pass_num, part_idx, sub_epoch,
                                          train_wmse, val_wmse, lr))
                if val_wmse < result.best_val_wmse:
                    result.best_val_wmse = val_wmse
                    best_params = params.copy()

    save_checkpoint(result.final_checkpoint, params,
                    extra=adam_state_to_tensors(state))
    save_checkpoint(result.best_checkpoint, best_params or params)
    with open(result.log_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pass", "partition", "sub_epoch",
                         "train_wmse", "val_wmse", "lr"])
        for row in result.rows:
            writer.writerow([row.pass_num, row.partition, row.sub_epoch,
                             f"{row.train_wmse:.8g}", f"{row.val_wmse:.8g}",
                             f"{row.lr:.8g}"])
    store_train.close()
    store_val.close()
    return result


def evaluate(checkpoint: str | Path | ModelParams, manifest: DatasetManifest,
             alpha: float = 1.0, batch_size: int = 1024) -> MetricsReport:
    """Eval-mode metrics over every valid patch center of a manifest."""
    if isinstance(checkpoint, ModelParams):
        params = checkpoint
    else:
        params, _ = load_checkpoint(checkpoint)
    store = GranuleStore(manifest)
    index = build_index(manifest, params.config.patch_size)
    if len(index) == 0:
        raise EmptyDatasetError("evaluation index is empty")
    preds = []
    targets = []
    order = np.arange(len(index))
    for batch in iter_batches(index, store, order, batch_size):
        preds.append(predict_batched(params, batch.inputs, batch_size))
        targets.append(batch.targets)
    store.close()
    return compute_metrics(np.concatenate(preds), np.concatenate(targets), alpha)
