"""Accuracy, negative log-likelihood and expected calibration error."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .bnn import HybridNet, predictive

PROB_FLOOR = 1e-12
DEFAULT_BINS = 15
DEFAULT_SAMPLES = 16


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    nll: float
    ece: float
    n_bins: int
    mc_samples: int

    def as_dict(self):
        return asdict(self)


def _check(probs, labels):
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).ravel()
    if p.ndim != 2 or p.shape[0] == 0:
        raise MetricsError("expected a non-empty (n, classes) probability array")
    if y.size != p.shape[0]:
        raise MetricsError("one label per prediction row is required")
    return p, y


def accuracy(probs, labels) -> float:
    p, y = _check(probs, labels)
    # np.argmax breaks ties toward the lowest class index
    return float(np.mean(np.argmax(p, axis=1) == y))


def nll(probs, labels) -> float:
    p, y = _check(probs, labels)
    return float(-np.mean(np.log(np.maximum(p[np.arange(y.size), y], PROB_FLOOR))))


def reliability_bins(probs, labels, n_bins: int = DEFAULT_BINS):
    """Per-bin ``(lower, upper, count, accuracy, confidence)`` rows over max-probability confidence.

    Bins are equal-width on [0, 1], right-closed, with 0 placed in the first bin.
    """
    if n_bins < 1:
        raise MetricsError("n_bins must be positive")
    p, y = _check(probs, labels)
    conf = p.max(axis=1)
    correct = np.argmax(p, axis=1) == y
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    rows = []
    for b in range(n_bins):
        mask = which == b
        count = int(mask.sum())
        acc = float(correct[mask].mean()) if count else 0.0
        cf = float(conf[mask].mean()) if count else 0.0
        rows.append((float(edges[b]), float(edges[b + 1]), count, acc, cf))
    return rows


def ece(probs, labels, n_bins: int = DEFAULT_BINS) -> float:
    rows = reliability_bins(probs, labels, n_bins)
    n = sum(r[2] for r in rows)
    return float(sum(r[2] / n * abs(r[3] - r[4]) for r in rows if r[2]))


def report_from_probs(probs, labels, n_bins: int = DEFAULT_BINS, mc_samples: int = 1) -> EvalReport:
    return EvalReport(accuracy(probs, labels), nll(probs, labels), ece(probs, labels, n_bins), n_bins, mc_samples)


def evaluate(net: HybridNet, test, samples: int = DEFAULT_SAMPLES, n_bins: int = DEFAULT_BINS, seed=0) -> EvalReport:
    """Score the Monte-Carlo posterior predictive of ``net`` on a labeled test set."""
    if len(test) == 0:
        raise MetricsError("empty test set")
    probs = predictive(net, test.features, samples, seed)
    return report_from_probs(probs, test.labels, n_bins, samples)
