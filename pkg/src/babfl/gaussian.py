"""Diagonal Gaussians: closed-form divergences, densities and reparameterized draws.

Variances are stored as variances (not standard deviations). Every routine is a
coordinatewise O(d) loop over numpy vectors; no dense covariance is ever built.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VARIANCE_FLOOR = 1e-12


class GaussianError(ValueError):
    """Invalid Gaussian parameters or mismatched dimensions."""


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    """Gaussian with independent marginals, ``N(mean, diag(variance))``."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64, ndmin=1).ravel()
        variance = np.array(self.variance, dtype=np.float64, ndmin=1).ravel()
        if mean.shape != variance.shape:
            raise GaussianError(f"mean has length {mean.size} but variance has length {variance.size}")
        if mean.size < 1:
            raise GaussianError("dimension must be at least 1")
        if not np.all(np.isfinite(mean)):
            raise GaussianError("mean entries must be finite")
        if not np.all(np.isfinite(variance)) or np.any(variance < VARIANCE_FLOOR):
            raise GaussianError(f"variance entries must be finite and >= {VARIANCE_FLOOR:g}")
        mean.setflags(write=False)
        variance.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.ones(dim))

    def __eq__(self, other):
        if not isinstance(other, DiagGaussian):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.variance, other.variance)

    def __repr__(self):
        if self.dim <= 4:
            return f"DiagGaussian(mean={self.mean.tolist()}, variance={self.variance.tolist()})"
        return f"DiagGaussian(dim={self.dim})"


@dataclass(frozen=True)
class PriorSpec:
    """The standard normal prior ``N(0_d, I_d)`` shared by every client."""

    dimension: int

    def __post_init__(self):
        if int(self.dimension) < 1:
            raise GaussianError("prior dimension must be positive")

    def as_gaussian(self) -> DiagGaussian:
        return DiagGaussian.standard(self.dimension)


def _check_dims(p: DiagGaussian, q: DiagGaussian):
    if p.dim != q.dim:
        raise GaussianError(f"dimension mismatch: {p.dim} vs {q.dim}")


def kl_terms(p_mean, p_var, q_mean, q_var) -> np.ndarray:
    """Per-coordinate ``KL(N(p_mean, p_var) || N(q_mean, q_var))`` on raw arrays."""
    ratio = p_var / q_var
    return 0.5 * (ratio + (p_mean - q_mean) ** 2 / q_var - 1.0 - np.log(ratio))


def kl_divergence(p: DiagGaussian, q: DiagGaussian) -> float:
    _check_dims(p, q)
    return float(np.sum(kl_terms(p.mean, p.variance, q.mean, q.variance)))


def w2_squared(p: DiagGaussian, q: DiagGaussian) -> float:
    """Squared 2-Wasserstein distance; for diagonal Gaussians the coupling is coordinatewise."""
    _check_dims(p, q)
    return float(np.sum((p.mean - q.mean) ** 2 + (p.std - q.std) ** 2))


def sample(p: DiagGaussian, noise) -> np.ndarray:
    """Reparameterized draw ``mean + std * noise``; ``noise`` may carry leading batch axes."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1:] != (p.dim,):
        raise GaussianError(f"noise has trailing shape {noise.shape[-1:]}, expected ({p.dim},)")
    return p.mean + p.std * noise


def log_density(p: DiagGaussian, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1:] != (p.dim,):
        raise GaussianError(f"point has trailing shape {x.shape[-1:]}, expected ({p.dim},)")
    out = -0.5 * np.sum(np.log(2.0 * np.pi * p.variance) + (x - p.mean) ** 2 / p.variance, axis=-1)
    return float(out) if np.ndim(out) == 0 else out
