"""Server-side aggregation rules.

Every Gaussian rule maps a list of client posteriors plus normalized weights to
one global posterior. The barycentric rules (``RKLB``, ``WB``) minimize the
weighted divergence to the clients; ``EAA``, ``GAA`` and ``AALV`` are the
moment-averaging baselines; ``FEDAVG`` is the point-mass average.

Sums over clients use ``math.fsum``, which is exactly rounded, so the result of a
reduction does not depend on client order at all.
"""
from __future__ import annotations

import enum
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .gaussian import VARIANCE_FLOOR, DiagGaussian, GaussianError

PRECISION_CAP = 1e12
WEIGHT_TOL = 1e-9


class AggregationError(ValueError):
    """Invalid aggregation inputs or configuration."""


class AggregationMethod(str, enum.Enum):
    RKLB = "RKLB"
    WB = "WB"
    EAA = "EAA"
    GAA = "GAA"
    AALV = "AALV"
    FEDAVG = "FEDAVG"

    @classmethod
    def parse(cls, value) -> "AggregationMethod":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            options = ", ".join(m.value for m in cls)
            raise AggregationError(f"unknown aggregation method {value!r} (expected one of {options})") from None

    @property
    def bayesian(self) -> bool:
        return self is not AggregationMethod.FEDAVG


def check_weights(weights, n: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise AggregationError("weight vector is empty")
    if n is not None and w.size != n:
        raise AggregationError(f"got {w.size} weights for {n} inputs")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise AggregationError("weights must be finite and nonnegative")
    if abs(math.fsum(w) - 1.0) > WEIGHT_TOL:
        raise AggregationError(f"weights sum to {math.fsum(w)!r}, not 1")
    return w


def exact_sum(terms: np.ndarray) -> np.ndarray:
    """Sum a ``(n_clients, d)`` array over clients with exact rounding per column."""
    terms = np.asarray(terms, dtype=np.float64)
    if terms.shape[0] == 1:
        return terms[0].copy()
    return np.fromiter((math.fsum(col) for col in terms.T), dtype=np.float64, count=terms.shape[1])


def _stack(posteriors: Sequence[DiagGaussian], weights):
    if len(posteriors) == 0:
        raise AggregationError("cannot aggregate an empty list of posteriors")
    dims = {p.dim for p in posteriors}
    if len(dims) != 1:
        raise AggregationError(f"posteriors have mismatched dimensions {sorted(dims)}")
    w = check_weights(weights, len(posteriors))
    means = np.stack([p.mean for p in posteriors])
    variances = np.stack([p.variance for p in posteriors])
    return means, variances, w[:, None]


def _weighted_mean(values: np.ndarray, w: np.ndarray) -> np.ndarray:
    return exact_sum(w * values)


def _gaussian(mean, variance) -> DiagGaussian:
    return DiagGaussian(mean, np.maximum(variance, VARIANCE_FLOOR))


def rkl_barycenter(posteriors: Sequence[DiagGaussian], weights) -> DiagGaussian:
    """Reverse-KL barycenter: precision-weighted mean, harmonic mean of variances."""
    means, variances, w = _stack(posteriors, weights)
    precisions = 1.0 / variances
    precision = np.minimum(exact_sum(w * precisions), PRECISION_CAP)
    variance = 1.0 / precision
    mean = variance * exact_sum(w * precisions * means)
    return _gaussian(mean, variance)


def w2_barycenter(posteriors: Sequence[DiagGaussian], weights) -> DiagGaussian:
    """Wasserstein-2 barycenter of diagonal Gaussians: average means and standard deviations."""
    means, variances, w = _stack(posteriors, weights)
    std = exact_sum(w * np.sqrt(variances))
    return _gaussian(_weighted_mean(means, w), std**2)


def eaa(posteriors: Sequence[DiagGaussian], weights) -> DiagGaussian:
    means, variances, w = _stack(posteriors, weights)
    return _gaussian(_weighted_mean(means, w), exact_sum(w * variances))


def gaa(posteriors: Sequence[DiagGaussian], weights) -> DiagGaussian:
    # Variance of a weighted sum of independent Gaussians; shrinks by sum(w**2) on identical inputs.
    means, variances, w = _stack(posteriors, weights)
    return _gaussian(_weighted_mean(means, w), exact_sum(w**2 * variances))


def aalv(posteriors: Sequence[DiagGaussian], weights) -> DiagGaussian:
    means, variances, w = _stack(posteriors, weights)
    return _gaussian(_weighted_mean(means, w), np.exp(exact_sum(w * np.log(variances))))


def fedavg_point(means: Sequence[np.ndarray], weights) -> np.ndarray:
    if len(means) == 0:
        raise AggregationError("cannot aggregate an empty list of parameter vectors")
    arrays = [np.asarray(m, dtype=np.float64) for m in means]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise AggregationError(f"parameter vectors have mismatched shapes {sorted(shapes)}")
    w = check_weights(weights, len(arrays))
    shape = arrays[0].shape
    flat = np.stack([a.ravel() for a in arrays])
    return exact_sum(w[:, None] * flat).reshape(shape)


GAUSSIAN_RULES: dict[AggregationMethod, Callable[[Sequence[DiagGaussian], np.ndarray], DiagGaussian]] = {
    AggregationMethod.RKLB: rkl_barycenter,
    AggregationMethod.WB: w2_barycenter,
    AggregationMethod.EAA: eaa,
    AggregationMethod.GAA: gaa,
    AggregationMethod.AALV: aalv,
}


def dirac_limit_check(means: Sequence[np.ndarray], weights, epsilon: float, method="RKLB") -> DiagGaussian:
    """Aggregate point masses smoothed to ``N(mean, epsilon)`` with a barycentric rule.

    As ``epsilon -> 0`` the result's mean approaches :func:`fedavg_point`.
    """
    if not epsilon > 0:
        raise AggregationError("epsilon must be positive")
    method = AggregationMethod.parse(method)
    if method not in (AggregationMethod.RKLB, AggregationMethod.WB):
        raise AggregationError("the Dirac limit is defined for the barycentric rules RKLB and WB")
    smoothed = [DiagGaussian(m, np.full(np.size(m), float(epsilon))) for m in means]
    return GAUSSIAN_RULES[method](smoothed, weights)


# -- discrete distributions ------------------------------------------------------------------


def check_pmf(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0):
        raise AggregationError("pmf entries must be finite and nonnegative")
    if abs(math.fsum(p) - 1.0) > WEIGHT_TOL:
        raise AggregationError(f"pmf sums to {math.fsum(p)!r}, not 1")
    return p


def _stack_pmfs(pmfs, weights):
    if len(pmfs) == 0:
        raise AggregationError("cannot aggregate an empty list of pmfs")
    arrays = [check_pmf(p) for p in pmfs]
    if len({a.size for a in arrays}) != 1:
        raise AggregationError("pmfs must share a common support")
    return np.stack(arrays), check_weights(weights, len(arrays))


def _normalize_log(log_q: np.ndarray) -> np.ndarray:
    if np.all(np.isneginf(log_q)):
        raise AggregationError("barycenter has no mass on the support")
    return np.exp(log_q - logsumexp(log_q))


def alpha_barycenter_discrete(pmfs, weights, alpha: float) -> np.ndarray:
    """Normalized power mean ``(sum_k w_k p_k**alpha) ** (1/alpha)``, computed in log space."""
    alpha = float(alpha)
    if not np.isfinite(alpha) or alpha == 0.0:
        raise AggregationError("alpha must be finite and nonzero; use rkl_barycenter_discrete for the limit")
    P, w = _stack_pmfs(pmfs, weights)
    if alpha < 0 and np.any(P[w > 0] == 0):
        raise AggregationError("zero probabilities are undefined under a negative alpha")
    with np.errstate(divide="ignore"):
        log_terms = np.log(w)[:, None] + alpha * np.log(P)
    # zero-weight clients contribute nothing, even where their pmf is zero
    log_terms[w == 0] = -np.inf
    return _normalize_log(logsumexp(log_terms, axis=0) / alpha)


def rkl_barycenter_discrete(pmfs, weights) -> np.ndarray:
    """Normalized weighted geometric mean ``prod_k p_k**w_k``."""
    P, w = _stack_pmfs(pmfs, weights)
    active = w > 0
    if np.any(P[active] == 0):
        raise AggregationError("the geometric-mean barycenter needs strictly positive probabilities")
    log_q = exact_sum(w[active, None] * np.log(P[active]))
    return _normalize_log(log_q)


# -- reparametrization maps ------------------------------------------------------------------

REPARAM_MAPS = ("RKL", "W2")


def _check_map(kind: str) -> str:
    kind = str(kind).upper()
    if kind not in REPARAM_MAPS:
        raise AggregationError(f"unknown reparametrization {kind!r}")
    return kind


def reparam_forward(mean, variance, kind: str = "RKL"):
    """Map ``(mean, variance)`` to coordinates where the barycenter is an arithmetic mean.

    ``RKL``: natural parameters ``(mean / variance, 1 / variance)``.
    ``W2``: ``(mean, std)``.
    """
    kind = _check_map(kind)
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(~(variance > 0)):
        raise GaussianError("variance must be strictly positive")
    if kind == "RKL":
        return mean / variance, 1.0 / variance
    return mean, np.sqrt(variance)


def reparam_inverse(first, second, kind: str = "RKL"):
    kind = _check_map(kind)
    first = np.asarray(first, dtype=np.float64)
    second = np.asarray(second, dtype=np.float64)
    if kind == "RKL":
        if np.any(~(second > 0)):
            raise GaussianError("precision must be strictly positive")
        return first / second, 1.0 / second
    return first, second**2


def reparam_barycenter(posteriors: Sequence[DiagGaussian], weights, kind: str = "RKL") -> DiagGaussian:
    """Arithmetic mean of the clients in reparametrized coordinates, mapped back."""
    means, variances, w = _stack(posteriors, weights)
    a, b = reparam_forward(means, variances, kind)
    mean, variance = reparam_inverse(exact_sum(w * a), exact_sum(w * b), kind)
    return _gaussian(mean, variance)


# -- whole-model aggregation -----------------------------------------------------------------


def aggregate_with(rule: Callable[[Sequence[DiagGaussian], np.ndarray], DiagGaussian], client_params, weights):
    """Aggregate a list of ``PosteriorParams`` layer by layer using ``rule`` on Gaussian layers.

    Point-mass layers are always combined with :func:`fedavg_point`.
    """
    from .bnn import GaussianLayer, PointMassLayer, PosteriorParams

    if len(client_params) == 0:
        raise AggregationError("no client parameters to aggregate")
    w = check_weights(weights, len(client_params))
    signature = client_params[0].signature()
    for params in client_params[1:]:
        if params.signature() != signature:
            raise AggregationError("clients have heterogeneous architectures")

    layers = []
    for i, first in enumerate(client_params[0].layers):
        group = [params.layers[i] for params in client_params]
        if isinstance(first, PointMassLayer):
            layers.append(
                PointMassLayer(
                    fedavg_point([g.weights for g in group], w),
                    fedavg_point([g.biases for g in group], w),
                )
            )
        elif rule is None:
            raise AggregationError("FEDAVG is defined only for models whose layers are all deterministic")
        else:
            merged = rule([g.to_gaussian() for g in group], w)
            layers.append(GaussianLayer.from_gaussian(merged, first.weight_means.shape, first.bias_means.shape))
    return PosteriorParams(layers)


def aggregate(method, client_params, weights):
    method = AggregationMethod.parse(method)
    return aggregate_with(GAUSSIAN_RULES.get(method), client_params, weights)
