"""Barycentric aggregation for Bayesian federated learning.

Client posteriors are mean-field Gaussians over the Bayesian layers of a hybrid
network; the server combines them with a barycenter rule (``RKLB``, ``WB``) or
a moment-averaging baseline (``EAA``, ``GAA``, ``AALV``).
"""
from .barycenter import (
    AggregationMethod,
    aalv,
    aggregate,
    alpha_barycenter_discrete,
    dirac_limit_check,
    eaa,
    fedavg_point,
    gaa,
    reparam_forward,
    reparam_inverse,
    rkl_barycenter,
    rkl_barycenter_discrete,
    w2_barycenter,
)
from .gaussian import DiagGaussian, PriorSpec, kl_divergence, log_density, sample, w2_squared

__version__ = "0.1.0"
