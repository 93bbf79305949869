"""Losses, the imbalance weight vector, the optimizer loop, and the
finite-difference gradient checker.

The weighted loss scales each attribute's positive log term by 1/(2*w_i)
and its negative term by 1/(2*(1-w_i)), where w_i is the proportion of
positive labels in the training split; at w = 0.5 it reduces exactly to
the plain cross entropy. Both losses are negated sums of log terms so
that minimization is well-posed, and log arguments are clamped at 1e-12.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import metrics, model
from .tensor import ShapeError, Tensor

LOG_CLAMP = 1e-12
WEIGHT_CLAMP = 1e-3


class NumericError(RuntimeError):
    """Training produced a non-finite quantity."""


@dataclass(frozen=True)
class AttributeVector:
    """L attribute values, either hard ground-truth labels or predictions."""

    values: np.ndarray
    kind: str  # "truth" or "prediction"

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 1:
            raise ValueError(f"attribute vector must be 1-D, got shape {self.values.shape}")
        if self.kind == "truth":
            if not np.all((self.values == 0.0) | (self.values == 1.0)):
                raise ValueError("ground-truth entries must be exactly 0 or 1")
        elif self.kind == "prediction":
            if not np.all((self.values > 0.0) & (self.values < 1.0)):
                raise ValueError("prediction entries must lie strictly in (0, 1)")
        else:
            raise ValueError(f"unknown kind {self.kind!r}")

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class WeightVector:
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=np.float64))
        if not np.all((self.w > 0.0) & (self.w < 1.0)):
            raise ValueError("weights must lie strictly in (0, 1) after clamping")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    weighted_loss: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def train_config_to_text(config):
    from .kvfile import format_kv

    return format_kv(
        [
            ("learning_rate", repr(config.learning_rate)),
            ("momentum", repr(config.momentum)),
            ("weight_decay", repr(config.weight_decay)),
            ("epochs", str(config.epochs)),
            ("batch_size", str(config.batch_size)),
            ("seed", str(config.seed)),
            ("weighted_loss", "true" if config.weighted_loss else "false"),
        ]
    )


def train_config_from_text(text):
    from .kvfile import parse_kv
    from .tensor import FormatError

    kv = parse_kv(text)
    cfg = TrainConfig()
    try:
        if "learning_rate" in kv:
            cfg = replace(cfg, learning_rate=float(kv["learning_rate"]))
        if "momentum" in kv:
            cfg = replace(cfg, momentum=float(kv["momentum"]))
        if "weight_decay" in kv:
            cfg = replace(cfg, weight_decay=float(kv["weight_decay"]))
        if "epochs" in kv:
            cfg = replace(cfg, epochs=int(kv["epochs"]))
        if "batch_size" in kv:
            cfg = replace(cfg, batch_size=int(kv["batch_size"]))
        if "seed" in kv:
            cfg = replace(cfg, seed=int(kv["seed"]))
        if "weighted_loss" in kv:
            flag = kv["weighted_loss"].lower()
            if flag not in ("true", "false"):
                raise ValueError(f"weighted_loss must be true or false, got {flag!r}")
            cfg = replace(cfg, weighted_loss=flag == "true")
    except ValueError as exc:
        raise FormatError(f"train config: {exc}") from None
    unknown = kv.keys() - {
        "learning_rate", "momentum", "weight_decay", "epochs",
        "batch_size", "seed", "weighted_loss",
    }
    if unknown:
        raise FormatError(f"train config has unknown keys: {sorted(unknown)}")
    return cfg


# -- losses -------------------------------------------------------------------


def positive_proportions(labels):
    """Per-attribute positive rate over an N×L label matrix, clamped to
    [1e-3, 1-1e-3] so attributes with no (or only) positives stay usable."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
        raise ValueError(f"labels must be a non-empty N×L matrix, got shape {labels.shape}")
    w = labels.mean(axis=0)
    return WeightVector(np.clip(w, WEIGHT_CLAMP, 1.0 - WEIGHT_CLAMP))


def _truth_values(p):
    values = p.values if isinstance(p, AttributeVector) else np.asarray(p, dtype=np.float64)
    return values


def _loss_terms(p, p_hat):
    truth = _truth_values(p)
    ph = p_hat if isinstance(p_hat, Tensor) else Tensor(np.asarray(p_hat, dtype=np.float64))
    if truth.shape != ph.data.shape:
        raise ShapeError(f"loss: label shape {truth.shape} != prediction shape {ph.data.shape}")
    log_pos = ph.clamp_min(LOG_CLAMP).log()
    log_neg = (1.0 - ph).clamp_min(LOG_CLAMP).log()
    return truth, log_pos, log_neg


def cross_entropy(p, p_hat):
    """Summed binary cross entropy over the attribute vector (a scalar
    tensor; differentiable w.r.t. the prediction)."""
    truth, log_pos, log_neg = _loss_terms(p, p_hat)
    return -((truth * log_pos + (1.0 - truth) * log_neg).sum())


def weighted_cross_entropy(p, p_hat, weights):
    """Cross entropy with per-attribute imbalance compensation."""
    truth, log_pos, log_neg = _loss_terms(p, p_hat)
    w = weights.w if isinstance(weights, WeightVector) else np.asarray(weights, dtype=np.float64)
    if w.shape != truth.shape:
        raise ShapeError(f"loss: weight shape {w.shape} != label shape {truth.shape}")
    pos_coef = truth / (2.0 * w)
    neg_coef = (1.0 - truth) / (2.0 * (1.0 - w))
    return -((pos_coef * log_pos + neg_coef * log_neg).sum())


# -- optimizer loop -----------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    ma_train: float


def train(state, samples, config, start_epoch=0, velocity=None, on_epoch=None):
    """SGD with momentum and decoupled weight decay over shuffled batches.

    The shuffle of epoch e is drawn from a stream keyed by (seed, e), so a
    run resumed at any epoch boundary replays the remaining epochs exactly.
    Returns (state, per-epoch logs, velocity) with velocity suitable for
    checkpointing.
    """
    if not samples:
        raise ValueError("training dataset is empty")
    labels = np.stack([s.labels for s in samples]).astype(np.float64)
    weights = positive_proportions(labels)
    names = list(state.params)
    if velocity is None:
        velocity = {n: np.zeros_like(state.params[n].data) for n in names}
    lr, mu, wd = config.learning_rate, config.momentum, config.weight_decay
    logs = []
    n = len(samples)
    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng((config.seed, epoch))
        order = rng.permutation(n)
        epoch_loss = 0.0
        pred_rows = np.empty((n, state.config.num_attributes))
        truth_rows = np.empty((n, state.config.num_attributes))
        for b, lo in enumerate(range(0, n, config.batch_size)):
            batch = order[lo : lo + config.batch_size]
            state.zero_grad()
            losses = []
            for row, i in enumerate(batch):
                s = samples[i]
                result = model.forward(state, s.image)
                if config.weighted_loss:
                    loss = weighted_cross_entropy(s.labels.astype(np.float64), result.prediction, weights)
                else:
                    loss = cross_entropy(s.labels.astype(np.float64), result.prediction)
                losses.append(loss)
                pred_rows[lo + row] = result.prediction.data
                truth_rows[lo + row] = s.labels
            batch_loss = losses[0]
            for extra in losses[1:]:
                batch_loss = batch_loss + extra
            batch_loss = batch_loss * (1.0 / len(batch))
            value = batch_loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss in epoch {epoch}, batch {b}")
            epoch_loss += value * len(batch)
            batch_loss.backward()
            for name in names:
                p = state.params[name]
                if p.grad is None:
                    continue
                v = velocity[name]
                v *= mu
                v += p.grad
                p.data -= lr * v
                if wd:
                    p.data -= lr * wd * p.data
        try:
            ma = metrics.mean_accuracy(metrics.binarize(pred_rows), truth_rows)
        except ValueError:
            ma = float("nan")
        logs.append(EpochLog(epoch, epoch_loss / n, ma))
        if on_epoch is not None:
            on_epoch(logs[-1])
    return state, logs, velocity


def write_training_log(path, logs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,mean_loss,mA_train\n")
        for entry in logs:
            fh.write(f"{entry.epoch},{entry.mean_loss!r},{entry.ma_train!r}\n")


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    def format_table(self):
        width = max([len(e.name) for e in self.entries] + [9])
        lines = [f"{'parameter':<{width}}  {'max_rel_err':>12}  status"]
        for e in self.entries:
            status = "pass" if e.passed else "FAIL"
            lines.append(f"{e.name:<{width}}  {e.max_rel_err:>12.3e}  {status}")
        lines.append(f"overall: {'pass' if self.passed else 'FAIL'} at tolerance {self.tolerance:g}")
        return "\n".join(lines)


def relative_error(a, b, floor=1e-3):
    """Elementwise |a-b| / max(|a|, |b|, floor), reduced to the maximum."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_difference_grad(fn, leaf):
    """Central differences of a scalar-producing fn w.r.t. one leaf tensor,
    with steps 1e-4 scaled by (|x| + 1)."""
    flat = leaf.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        h = 1e-4 * (abs(keep) + 1.0)
        flat[i] = keep + h
        hi = fn().item()
        flat[i] = keep - h
        lo = fn().item()
        flat[i] = keep
        grad[i] = (hi - lo) / (2.0 * h)
    return grad.reshape(leaf.data.shape)


def grad_check(fn, leaves, tolerance=1e-5):
    """Compare tape gradients of ``fn() -> scalar Tensor`` against central
    finite differences for every tracked leaf in ``leaves``.

    Leaves with gradient tracking disabled are excluded from the report.
    """
    tracked = {name: t for name, t in leaves.items() if t.requires_grad}
    for t in tracked.values():
        t.zero_grad()
    fn().backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in tracked.items()}
    entries = []
    for name, t in tracked.items():
        numeric = finite_difference_grad(fn, t)
        err = relative_error(analytic[name], numeric)
        entries.append(GradCheckEntry(name, err, err < tolerance))
    return GradCheckReport(tolerance, entries)
