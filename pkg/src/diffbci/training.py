"""Subject-specific calibration: split, train with dual early stopping, score."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import (LossWeights, ModelConfig, ModelParams, NoiseSchedule, infer_logits,
                        infer_window, init_params, rank_classes, total_loss)

log = logging.getLogger(__name__)

TRAIN_THRESHOLD = "train_threshold"
VAL_THRESHOLD = "val_threshold"
MAX_EPOCHS = "max_epochs"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    early_stop_train_acc: float = 0.75
    early_stop_val_acc: float = 0.40
    val_fraction: float = 0.2
    seed: int = 42
    w_ddpm: float = 1.0
    w_rec: float = 1.0
    w_ce: float = 1.0
    tau_infer: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        for name in ("early_stop_train_acc", "early_stop_val_acc"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, max_epochs >= 0 and lr > 0 required")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_ddpm, self.w_rec, self.w_ce)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ddpm: float
    rec: float
    ce: float
    train_acc: float
    val_acc: float
    ms: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = MAX_EPOCHS

    HEADER = "epoch,loss,ddpm,rec,ce,train_acc,val_acc,ms"

    def to_csv(self, include_timing: bool = True) -> str:
        lines = [self.HEADER]
        for r in self.records:
            ms = f"{r.ms:.1f}" if include_timing else ""
            lines.append(f"{r.epoch},{r.loss:.17g},{r.ddpm:.17g},{r.rec:.17g},{r.ce:.17g},"
                         f"{r.train_acc:.6f},{r.val_acc:.6f},{ms}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data split and stopping rule
# ---------------------------------------------------------------------------

def split_dataset(labels: np.ndarray, val_fraction: float, seed: int, n_classes: int | None = None):
    """Stratified split; returns sorted (train_idx, val_idx)."""
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in range(k):
        idx = np.flatnonzero(labels == c)
        n_val = int(round(idx.size * val_fraction))
        if n_val < 1 or idx.size - n_val < 1:
            raise ValueError(f"class {c} has {idx.size} trials: too few for a {val_fraction} split")
        idx = rng.permutation(idx)
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def early_stop_check(train_acc: float, val_acc: float, config: TrainConfig) -> tuple[bool, str | None]:
    """Stop once either accuracy strictly exceeds its threshold (train checked first)."""
    if train_acc > config.early_stop_train_acc:
        return True, TRAIN_THRESHOLD
    if val_acc > config.early_stop_val_acc:
        return True, VAL_THRESHOLD
    return False, None


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def confusion_matrix(pred, true, k: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("prediction and label sequences differ in length")
    if np.any((pred < 0) | (pred >= k)) or np.any((true < 0) | (true >= k)):
        raise ValueError(f"label outside [0, {k})")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (true, pred), 1)
    return m


def topk_accuracy(rankings, true, k: int) -> float:
    """Fraction of trials whose label is among the first ``k`` ranked classes."""
    rankings = np.atleast_2d(np.asarray(rankings))
    true = np.asarray(true)
    if not 1 <= k <= rankings.shape[1]:
        raise ValueError(f"k={k} outside [1, {rankings.shape[1]}]")
    if rankings.shape[0] == 0:
        return 0.0
    return float(np.mean(np.any(rankings[:, :k] == true[:, None], axis=1)))


def predict(windows: np.ndarray, params: ModelParams, schedule: NoiseSchedule, tau: float = 0.5,
            batch_size: int = 40) -> np.ndarray:
    """Evaluation-mode probabilities for many windows, batched for speed."""
    out = []
    for lo in range(0, windows.shape[0], batch_size):
        out.append(ad.softmax(infer_logits(windows[lo: lo + batch_size], params, schedule, tau)))
    return np.concatenate(out) if out else np.zeros((0, params.config.n_classes))


def accuracy(windows, labels, params, schedule, tau: float = 0.5) -> float:
    if len(labels) == 0:
        return 0.0
    probs = predict(windows, params, schedule, tau)
    return topk_accuracy(rank_classes(probs), labels, 1)


@dataclass
class ClassMetrics:
    """Top-k accuracy per class and overall, plus the confusion matrix."""

    ks: tuple[int, ...]
    support: np.ndarray  # (K,)
    per_class: np.ndarray  # (K, len(ks))
    overall: np.ndarray  # (len(ks),)
    confusion: np.ndarray


def class_metrics(rankings, true, n_classes: int, ks=(1, 2)) -> ClassMetrics:
    rankings = np.asarray(rankings).reshape(-1, n_classes)
    true = np.asarray(true, dtype=np.int64)
    ks = tuple(int(k) for k in ks)
    support = np.bincount(true, minlength=n_classes)
    per = np.zeros((n_classes, len(ks)))
    for c in range(n_classes):
        sel = true == c
        for j, k in enumerate(ks):
            per[c, j] = topk_accuracy(rankings[sel], true[sel], k) if sel.any() else 0.0
    overall = np.array([topk_accuracy(rankings, true, k) for k in ks])
    pred = rankings[:, 0] if rankings.shape[0] else np.zeros(0, dtype=np.int64)
    return ClassMetrics(ks, support, per, overall, confusion_matrix(pred, true, n_classes))


def format_table(m: ClassMetrics, class_names) -> str:
    """Per-class accuracy rows followed by an ``All`` row, comma separated."""
    head = "class,n," + ",".join(f"top{k}" for k in m.ks)
    lines = [head]
    for c, name in enumerate(class_names):
        accs = ",".join(f"{100 * a:.1f}" for a in m.per_class[c])
        lines.append(f"{name},{m.support[c]},{accs}")
    accs = ",".join(f"{100 * a:.1f}" for a in m.overall)
    lines.append(f"All,{int(m.support.sum())},{accs}")
    return "\n".join(lines) + "\n"


def format_confusion(cm: np.ndarray) -> str:
    k = cm.shape[0]
    lines = ["true\\pred," + ",".join(str(j) for j in range(k))]
    lines += [f"{i}," + ",".join(str(int(v)) for v in row) for i, row in enumerate(cm)]
    return "\n".join(lines) + "\n"


def evaluate_windows(windows: np.ndarray, params: ModelParams, schedule: NoiseSchedule,
                     tau: float = 0.5) -> np.ndarray:
    """Probabilities one window at a time, the way the online decoder sees them.

    Batched inference can differ from single-window inference in the last
    bit (BLAS blocking), so reported metrics always use this path.
    """
    k = params.config.n_classes
    return np.array([infer_window(w, params, schedule, tau) for w in windows]).reshape(-1, k)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(windows: np.ndarray, labels: np.ndarray, model_config: ModelConfig, config: TrainConfig,
          schedule: NoiseSchedule | None = None, split=None) -> tuple[ModelParams, TrainHistory]:
    """Adam on the joint loss until an early-stop threshold or ``max_epochs``.

    ``windows`` are preprocessed (N, C, L) decoder inputs.  ``split`` may pass
    precomputed (train_idx, val_idx); otherwise a stratified split is drawn
    from ``config.seed``.
    """
    schedule = schedule or NoiseSchedule()
    labels = np.asarray(labels, dtype=np.int64)
    if split is None:
        split = split_dataset(labels, config.val_fraction, config.seed, model_config.n_classes)
    train_idx, val_idx = split
    params = init_params(model_config, config.seed)
    history = TrainHistory()
    if config.max_epochs == 0:
        return params, history

    rng = np.random.default_rng([config.seed, 1])
    state = ad.AdamState.for_params(params.arrays, lr=config.lr)
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        sums = np.zeros(4)
        n_batches = 0
        for b, lo in enumerate(range(0, order.size, config.batch_size)):
            idx = order[lo: lo + config.batch_size]
            params.zero_grad()
            try:
                parts = total_loss(windows[idx], labels[idx], params, schedule, config.weights, rng,
                                   tau_ce=config.tau_infer)
                parts.total.backward()
                ad.adam_step(params.arrays, params.grads(), state)
            except ad.NonFiniteError as exc:
                raise ad.NonFiniteError(f"epoch {epoch}, batch {b}: {exc}") from exc
            sums += (float(parts.total.data), parts.ddpm, parts.rec, parts.ce)
            n_batches += 1
        train_acc = accuracy(windows[train_idx], labels[train_idx], params, schedule, config.tau_infer)
        val_acc = accuracy(windows[val_idx], labels[val_idx], params, schedule, config.tau_infer)
        mean = sums / max(n_batches, 1)
        ms = (time.perf_counter() - t0) * 1e3
        history.records.append(EpochRecord(epoch, *mean, train_acc, val_acc, ms))
        log.info("epoch %d loss %.4f train %.3f val %.3f (%.0f ms)", epoch, mean[0], train_acc, val_acc, ms)
        stop, reason = early_stop_check(train_acc, val_acc, config)
        if stop:
            history.stop_reason = reason
            break
    return params, history
