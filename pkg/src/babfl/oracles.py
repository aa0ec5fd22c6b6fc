"""Brute-force verification suites for the closed-form rules.

Each suite returns a list of :class:`CaseResult`; a case records the residual
against its independent oracle, the tolerance it must meet, and the seed that
reproduces it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import barycenter as bc
from . import bnn, federation, seeding
from .data import dirichlet_partition, synth_blobs, train_test_split
from .gaussian import DiagGaussian


@dataclass(frozen=True)
class CaseResult:
    suite: str
    case: str
    seed: int
    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite}/{self.case} seed={self.seed} residual={self.residual:.3e} tol={self.tolerance:.1e}"


def _random_gaussians(rng, n, d):
    means = rng.uniform(-3.0, 3.0, size=(n, d))
    variances = rng.uniform(0.1, 5.0, size=(n, d))
    return [DiagGaussian(m, v) for m, v in zip(means, variances)]


# -- Gaussian barycenter optimality ----------------------------------------------------------


def _rkl_objective(x, means, variances, w):
    # sum_k w_k KL(q || p_k) with q = N(mu, exp(log_var)); returns (value, gradient)
    d = means.shape[1]
    mu, var = x[:d], np.exp(x[d:])
    kl = 0.5 * (var / variances + (mu - means) ** 2 / variances - 1.0 + np.log(variances / var))
    g_mu = w @ ((mu - means) / variances)
    g_logvar = 0.5 * (w @ (var / variances) - 1.0)
    return float(w @ kl.sum(axis=1)), np.concatenate([g_mu, g_logvar])


def _w2_objective(x, means, variances, w):
    d = means.shape[1]
    mu, std = x[:d], np.exp(0.5 * x[d:])
    cost = (mu - means) ** 2 + (std - np.sqrt(variances)) ** 2
    g_mu = 2.0 * (w @ (mu - means))
    g_logvar = (w @ (std - np.sqrt(variances))) * std
    return float(w @ cost.sum(axis=1)), np.concatenate([g_mu, g_logvar])


def _multistart(objective, args, d, rng, starts):
    best = np.inf
    for _ in range(starts):
        x0 = np.concatenate([rng.uniform(-3.0, 3.0, d), np.log(rng.uniform(0.1, 5.0, d))])
        res = minimize(objective, x0, args=args, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 2000})
        best = min(best, res.fun)
    return best


def barycenter_suite(n_instances: int = 200, starts: int = 10, seed: int = 0, tol: float = 1e-6):
    """Closed-form RKLB / WB objective minus the best multi-start numerical minimum."""
    out = []
    for i in range(n_instances):
        case_seed = seed * 100003 + i
        rng = np.random.default_rng(case_seed)
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        ps = _random_gaussians(rng, n, d)
        w = rng.dirichlet(np.ones(n))
        means = np.stack([p.mean for p in ps])
        variances = np.stack([p.variance for p in ps])
        args = (means, variances, w)
        for name, rule, objective in (
            ("rklb", bc.rkl_barycenter, _rkl_objective),
            ("wb", bc.w2_barycenter, _w2_objective),
        ):
            q = rule(ps, w)
            closed, _ = objective(np.concatenate([q.mean, np.log(q.variance)]), *args)
            numeric = _multistart(objective, args, d, rng, starts)
            out.append(CaseResult("barycenter", f"{name}[{i}] N={n} d={d}", case_seed, max(0.0, closed - numeric), tol))
    return out


# -- discrete alpha barycenter ---------------------------------------------------------------


def alpha_divergence(p, q, alpha: float) -> float:
    """``(1 - sum p^a q^(1-a)) / (a (1 - a))``; forward KL at ``a = 1``, reverse KL at ``a = 0``."""
    p, q = np.asarray(p), np.asarray(q)
    if alpha == 1.0:
        return float(np.sum(p * np.log(p / q)))
    if alpha == 0.0:
        return float(np.sum(q * np.log(q / p)))
    return float((1.0 - np.sum(p**alpha * q ** (1.0 - alpha))) / (alpha * (1.0 - alpha)))


def _simplex_minimizer(P, w, alpha):
    """Minimize ``sum_k w_k D_alpha(p_k || q)`` over the simplex via a softmax chart."""

    def fun(z):
        q = np.exp(z - z.max())
        q /= q.sum()
        if alpha == 1.0:
            val = -np.sum(w @ (P * np.log(q)))
            g_q = -(w @ P) / q
        else:
            A = w @ P**alpha
            val = np.sum(A * q ** (1.0 - alpha)) / (alpha * (alpha - 1.0))
            g_q = A * q ** (-alpha) / (-alpha)
        # chain rule through the softmax: J = diag(q) - q q^T
        return val, q * g_q - q * np.dot(q, g_q)

    z0 = np.log(np.mean(P, axis=0))
    res = minimize(fun, z0, jac=True, method="BFGS", options={"gtol": 1e-14, "maxiter": 10000})
    q = np.exp(res.x - res.x.max())
    return q / q.sum()


def alpha_suite(n_instances: int = 50, seed: int = 0, tol: float = 1e-4, limit_tol: float = 1e-5):
    out = []
    for i in range(n_instances):
        case_seed = seed * 100003 + i
        rng = np.random.default_rng(case_seed)
        m, n = int(rng.integers(2, 6)), int(rng.integers(1, 6))
        P = rng.dirichlet(np.full(m, 2.0), size=n)
        P = np.maximum(P, 1e-3)
        P /= P.sum(axis=1, keepdims=True)
        w = rng.dirichlet(np.ones(n))
        for alpha in (-0.5, 0.5, 1.0, 2.0):
            closed = bc.alpha_barycenter_discrete(P, w, alpha)
            numeric = _simplex_minimizer(P, w, alpha)
            out.append(CaseResult("alpha", f"alpha={alpha:+g}[{i}] m={m} N={n}", case_seed, float(np.max(np.abs(closed - numeric))), tol))
        near_zero = bc.alpha_barycenter_discrete(P, w, 1e-6)
        geometric = bc.rkl_barycenter_discrete(P, w)
        out.append(CaseResult("alpha", f"limit[{i}]", case_seed, float(np.max(np.abs(near_zero - geometric))), limit_tol))
    return out


# -- reparametrization identity --------------------------------------------------------------


def _max_rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), np.finfo(float).tiny)
    return float(np.max(np.abs(a - b) / scale))


def reparam_suite(n_instances: int = 100, seed: int = 0, tol: float = 1e-10, federated: bool = True):
    out = []
    for i in range(n_instances):
        case_seed = seed * 100003 + i
        rng = np.random.default_rng(case_seed)
        n, d = int(rng.integers(1, 8)), int(rng.integers(1, 20))
        ps = _random_gaussians(rng, n, d)
        w = rng.dirichlet(np.ones(n))
        for name, rule, kind in (("rklb", bc.rkl_barycenter, "RKL"), ("wb", bc.w2_barycenter, "W2")):
            a, b = rule(ps, w), bc.reparam_barycenter(ps, w, kind)
            dev = max(_max_rel(a.mean, b.mean), _max_rel(a.variance, b.variance))
            out.append(CaseResult("reparam", f"{name}[{i}] N={n} d={d}", case_seed, dev, tol))
    if federated:
        for method, kind in (("RKLB", "RKL"), ("WB", "W2")):
            dev = federated_reparam_deviation(method, kind, seed=seed)
            out.append(CaseResult("reparam", f"federated-{method.lower()}", seed, dev, tol))
    return out


def _tiny_federation(seed: int, n_bayes: int, rounds: int, method: str, **train):
    ds = synth_blobs(3, 60, 2, 1.5, seeding.stream(seed, "data"))
    tr, te = train_test_split(ds, 60, seeding.stream(seed, "split"))
    plan = dirichlet_partition(tr.labels, 4, 0.5, seeding.stream(seed, "partition"))
    clients = federation.build_clients(tr, plan)
    net = bnn.HybridNet.build(2, [8], 3, n_bayes, seeding.rng(seed, "init"))
    cfg = federation.FederationConfig(
        rounds=rounds,
        method=method,
        train=bnn.TrainConfig(epochs=2, learning_rate=0.1, batch_size=16, **train),
        eval_samples=4,
        seed=seed,
    )
    return cfg, net, clients, te


def _global_history(cfg, net, clients, test, rule=None):
    history = []
    federation.run(cfg, net, clients, test, rule=rule, on_round=lambda s, r: history.append(s.global_params.copy()))
    return history


def federated_reparam_deviation(method: str, kind: str, seed: int = 0, rounds: int = 5) -> float:
    """Max relative gap between runs aggregating in closed form vs. in reparametrized space."""
    cfg, net, clients, test = _tiny_federation(seed, 2, rounds, method)
    closed = _global_history(cfg, net, clients, test)
    cfg, net, clients, test = _tiny_federation(seed, 2, rounds, method)
    mapped = _global_history(cfg, net, clients, test, rule=lambda ps, w: bc.reparam_barycenter(ps, w, kind))
    return max(_max_rel(a.flat(), b.flat()) for a, b in zip(closed, mapped))


# -- Dirac limit -----------------------------------------------------------------------------


def mean_fedavg_rule(posteriors, weights):
    """FedAvg on the means; keeps the (shared) variance of the first client."""
    return DiagGaussian(bc.fedavg_point([p.mean for p in posteriors], weights), posteriors[0].variance)


def frozen_variance_deviation(method: str, seed: int = 0, rounds: int = 5, sigma: float = 1e-4) -> float:
    """Largest per-round gap between global means of a frozen-variance run and a FedAvg run."""
    runs = []
    for rule in (None, mean_fedavg_rule):
        cfg, net, clients, test = _tiny_federation(seed, 2, rounds, method, freeze_variance=True)
        # start every Bayesian coordinate at the same small sigma, approaching the point-mass regime
        for layer in net.params.layers:
            if layer.kind == bnn.BAYESIAN:
                layer.weight_rhos[...] = bnn.softplus_inv(sigma)
                layer.bias_rhos[...] = bnn.softplus_inv(sigma)
        runs.append(_global_history(cfg, net, clients, test, rule=rule))

    def means(params):
        return np.concatenate(
            [np.concatenate([l.weight_means.ravel(), l.bias_means.ravel()]) if l.kind == bnn.BAYESIAN
             else np.concatenate([l.weights.ravel(), l.biases.ravel()]) for l in params.layers]
        )

    return max(float(np.max(np.abs(means(a) - means(b)))) for a, b in zip(*runs))


def dirac_suite(seed: int = 0, n_instances: int = 20, federated: bool = True):
    out = []
    for i in range(n_instances):
        case_seed = seed * 100003 + i
        rng = np.random.default_rng(case_seed)
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        means = list(rng.uniform(-3.0, 3.0, size=(n, d)))
        w = rng.dirichlet(np.ones(n))
        target = bc.fedavg_point(means, w)
        for eps in (1e-6, 1e-8, 1e-10):
            for method in ("RKLB", "WB"):
                q = bc.dirac_limit_check(means, w, eps, method)
                dev = float(np.max(np.abs(q.mean - target)))
                out.append(CaseResult("dirac", f"{method.lower()} eps={eps:g}[{i}]", case_seed, dev, 10 * eps))
    if federated:
        for method in ("RKLB", "WB", "EAA", "AALV"):
            out.append(CaseResult("dirac", f"frozen-variance-{method.lower()}", seed, frozen_variance_deviation(method, seed), 1e-8))
    return out


# -- gradients -------------------------------------------------------------------------------


def _random_small_net(rng):
    while True:
        d_in = int(rng.integers(1, 4))
        hidden = [int(h) for h in rng.integers(1, 5, size=int(rng.integers(0, 3)))]
        n_classes = int(rng.integers(2, 4))
        n_layers = len(hidden) + 1
        n_bayes = int(rng.integers(0, n_layers + 1))
        net = bnn.HybridNet.build(d_in, hidden, n_classes, n_bayes, rng, sigma_init=float(rng.uniform(0.05, 1.0)))
        if 0 < net.params.flat().size <= 50:
            break
    # perturb so the means are not at their initialization pattern
    net = net.with_params(net.params.with_flat(net.params.flat() + 0.3 * rng.standard_normal(net.params.flat().size)))
    return net


def gradient_check(net, x, y, kl_scale, noise, h=1e-5):
    """Return ``(analytic, numeric)`` flat gradients of the negative ELBO at fixed noise."""
    analytic = bnn.gradients(net, x, y, kl_scale, noise).flat()
    theta = net.params.flat()
    numeric = np.empty_like(theta)
    for j in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        f_up = bnn.elbo_loss(net.with_params(net.params.with_flat(up)), x, y, kl_scale, noise)
        f_down = bnn.elbo_loss(net.with_params(net.params.with_flat(down)), x, y, kl_scale, noise)
        numeric[j] = (f_up - f_down) / (2 * h)
    return analytic, numeric


def gradient_error(analytic, numeric, tol=1e-4, abs_floor=1e-7) -> float:
    """Max of ``|a - n| / max(|a|, |n|, abs_floor / tol)``.

    The result is <= ``tol`` exactly when every entry is within ``tol`` relative
    error or within ``abs_floor`` absolute error.
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor / tol)
    return float(np.max(diff / scale))


def gradient_suite(n_nets: int = 20, seed: int = 0, tol: float = 1e-4):
    out = []
    for i in range(n_nets):
        case_seed = seed * 100003 + i
        rng = np.random.default_rng(case_seed)
        net = _random_small_net(rng)
        batch = int(rng.integers(1, 6))
        x = rng.uniform(0.0, 1.0, size=(batch, net.spec[0].input_width))
        y = rng.integers(0, net.n_classes, size=batch)
        noise = net.draw_noise(rng)
        kl_scale = float(rng.uniform(0.0, 1.0))
        analytic, numeric = gradient_check(net, x, y, kl_scale, noise)
        out.append(CaseResult("gradient", f"net[{i}] params={analytic.size} bayes={sum(net.params.bayesian_mask)}", case_seed, gradient_error(analytic, numeric, tol), tol))
    return out


SUITES = {
    "barycenter": barycenter_suite,
    "alpha": alpha_suite,
    "reparam": reparam_suite,
    "dirac": dirac_suite,
    "gradient": gradient_suite,
}
