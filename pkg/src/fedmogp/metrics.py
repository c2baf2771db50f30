"""Evaluation metrics: MSE, accuracy, binary calibration error and OOD scores."""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError


def _vectors(a, b, what):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0:
        raise InputError(f"{what} needs at least one sample")
    if a.size != b.size:
        raise InputError(f"{what}: got {a.size} predictions for {b.size} targets")
    return a, b


def mse(predictions, targets):
    p, t = _vectors(predictions, targets, "mse")
    r = p - t
    return float(np.mean(r * r))


def accuracy(scores, labels):
    """Fraction of samples whose sign matches the +-1 label; a score of exactly 0 predicts +1.

    ``scores`` may be latent means or class probabilities minus 0.5, anything
    whose sign encodes the predicted class.
    """
    s, y = _vectors(scores, labels, "accuracy")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise InputError("labels must be -1 or +1")
    pred = np.where(s >= 0.0, 1.0, -1.0)
    return float(np.mean(pred == y))


@dataclass(frozen=True, eq=False)
class ReliabilityDiagram:
    edges: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray
    counts: np.ndarray
    ece: float

    @property
    def n_bins(self):
        return self.counts.size

    def to_dict(self):
        def clean(a):
            return [None if math.isnan(v) else float(v) for v in a]
        return {"n_bins": int(self.n_bins), "edges": [float(e) for e in self.edges],
                "confidence": clean(self.confidence), "accuracy": clean(self.accuracy),
                "counts": [int(c) for c in self.counts], "ece": float(self.ece)}

    @classmethod
    def from_dict(cls, d):
        nan = float("nan")
        return cls(np.array(d["edges"], dtype=float),
                   np.array([nan if v is None else v for v in d["confidence"]], dtype=float),
                   np.array([nan if v is None else v for v in d["accuracy"]], dtype=float),
                   np.array(d["counts"], dtype=int), float(d["ece"]))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1)


def ece(probabilities, labels, n_bins=10):
    """Expected calibration error of P(y = +1) with ``n_bins`` equal-width confidence bins.

    Confidence is ``max(p, 1 - p)``, so bins cover [0.5, 1]; a confidence on an
    inner edge belongs to the lower bin.  Empty bins report NaN and weigh 0.
    """
    if int(n_bins) != n_bins or n_bins < 1:
        raise InputError("n_bins must be a positive integer")
    n_bins = int(n_bins)
    p, y = _vectors(probabilities, labels, "ece")
    if np.any(~(p > 0.0) | ~(p < 1.0)):
        raise InputError("probabilities must lie strictly inside (0, 1)")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise InputError("labels must be -1 or +1")
    conf = np.maximum(p, 1.0 - p)
    correct = (np.where(p >= 0.5, 1.0, -1.0) == y).astype(float)
    edges = np.linspace(0.5, 1.0, n_bins + 1)
    idx = np.searchsorted(edges[1:-1], conf, side="left")
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / counts, np.nan)
        mean_acc = np.where(counts > 0, acc_sum / counts, np.nan)
    n = p.size
    gaps = [c / n * abs(a - m) for c, a, m in zip(counts, mean_acc, mean_conf) if c > 0]
    return ReliabilityDiagram(edges, mean_conf, mean_acc, counts, math.fsum(gaps))


def ood_score(variance):
    """Predictive variance itself; larger means further from the training data."""
    v = np.asarray(variance, dtype=float)
    if np.any(~np.isfinite(v)) or np.any(v < 0):
        raise InputError("predictive variance must be finite and non-negative")
    return float(v) if v.ndim == 0 else v
