"""Label-based mean accuracy and example-based multi-label criteria."""

from dataclasses import dataclass

import numpy as np

from .kvfile import format_kv


def binarize(scores, threshold=0.5):
    """Hard labels from scores; strictly-greater, so exactly 0.5 is negative."""
    return (np.asarray(scores, dtype=np.float64) > threshold).astype(np.int64)


def _check_matrices(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred.astype(bool), truth.astype(bool)


def confusion_counts(pred, truth):
    """Per-attribute (TP, TN, FP, FN) counts as an L×4 int array."""
    pred, truth = _check_matrices(pred, truth)
    tp = np.sum(pred & truth, axis=0)
    tn = np.sum(~pred & ~truth, axis=0)
    fp = np.sum(pred & ~truth, axis=0)
    fn = np.sum(~pred & truth, axis=0)
    return np.stack([tp, tn, fp, fn], axis=1).astype(np.int64)


def mean_accuracy(pred, truth):
    """Mean over attributes of the average positive and negative recall,
    normalized into [0, 1]; every attribute needs at least one positive
    and one negative ground-truth sample."""
    pred, truth = _check_matrices(pred, truth)
    pos = truth.sum(axis=0)
    neg = (~truth).sum(axis=0)
    bad = np.flatnonzero((pos == 0) | (neg == 0))
    if bad.size:
        raise ValueError(f"attribute {bad[0]} has no positive or no negative samples")
    tp = np.sum(pred & truth, axis=0)
    tn = np.sum(~pred & ~truth, axis=0)
    return float(np.mean(tp / pos + tn / neg) / 2.0)


def example_based(pred, truth):
    """Per-sample overlap of positive label sets, averaged over samples.

    Conventions for empty sets: an empty union counts as accuracy 1, an
    empty prediction set contributes precision 0, an empty truth set
    contributes recall 0, and F1 is 0 when precision + recall is 0.
    """
    pred, truth = _check_matrices(pred, truth)
    inter = np.sum(pred & truth, axis=1, dtype=np.float64)
    union = np.sum(pred | truth, axis=1, dtype=np.float64)
    npred = pred.sum(axis=1, dtype=np.float64)
    ntruth = truth.sum(axis=1, dtype=np.float64)
    acc = float(np.mean(np.where(union > 0, inter / np.maximum(union, 1), 1.0)))
    prec = float(np.mean(np.where(npred > 0, inter / np.maximum(npred, 1), 0.0)))
    rec = float(np.mean(np.where(ntruth > 0, inter / np.maximum(ntruth, 1), 0.0)))
    f1 = 2.0 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return acc, prec, rec, f1


@dataclass
class EvalReport:
    ma: float
    counts: np.ndarray  # L×4 rows of TP, TN, FP, FN
    acc: float
    prec: float
    rec: float
    f1: float

    @classmethod
    def from_predictions(cls, scores, truth, threshold=0.5):
        pred = binarize(scores, threshold)
        acc, prec, rec, f1 = example_based(pred, truth)
        return cls(mean_accuracy(pred, truth), confusion_counts(pred, truth), acc, prec, rec, f1)

    def to_kv_text(self):
        return format_kv(
            [
                ("mA", repr(self.ma)),
                ("accuracy", repr(self.acc)),
                ("precision", repr(self.prec)),
                ("recall", repr(self.rec)),
                ("f1", repr(self.f1)),
            ]
        )

    def per_attribute_csv(self, names=None):
        lines = ["attribute,TP,TN,FP,FN"]
        for i, (tp, tn, fp, fn) in enumerate(self.counts):
            label = names[i] if names else str(i)
            lines.append(f"{label},{tp},{tn},{fp},{fn}")
        return "\n".join(lines) + "\n"
