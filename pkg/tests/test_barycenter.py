import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from babfl import bnn
from babfl.barycenter import (
    GAUSSIAN_RULES,
    AggregationError,
    AggregationMethod,
    aalv,
    aggregate,
    alpha_barycenter_discrete,
    dirac_limit_check,
    eaa,
    fedavg_point,
    gaa,
    reparam_barycenter,
    reparam_forward,
    reparam_inverse,
    rkl_barycenter,
    rkl_barycenter_discrete,
    w2_barycenter,
)
from babfl.gaussian import DiagGaussian

P1 = DiagGaussian(np.array([0.0]), np.array([1.0]))
P2 = DiagGaussian(np.array([2.0]), np.array([4.0]))
HALF = np.array([0.5, 0.5])
IDEMPOTENT = [rkl_barycenter, w2_barycenter, eaa, aalv]
ALL_RULES = IDEMPOTENT + [gaa]


def assert_gauss(p, mean, var, tol=1e-12):
    assert_allclose(p.mean, mean, rtol=0, atol=tol)
    assert_allclose(p.variance, var, rtol=0, atol=tol)


@st.composite
def posterior_sets(draw, max_n=5, max_d=4):
    n = draw(st.integers(1, max_n))
    d = draw(st.integers(1, max_d))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    ps = [DiagGaussian(rng.uniform(-3, 3, d), rng.uniform(0.1, 5, d)) for _ in range(n)]
    w = rng.dirichlet(np.ones(n))
    return ps, w / w.sum()


class TestWorkedExamples:
    def test_rklb(self):
        assert_gauss(rkl_barycenter([P1, P2], HALF), 0.4, 1.6)

    def test_wb(self):
        assert_gauss(w2_barycenter([P1, P2], HALF), 1.0, 2.25)
        assert_gauss(w2_barycenter([P1, DiagGaussian(np.array([2.0]), np.array([1.0]))], HALF), 1.0, 1.0)

    def test_eaa(self):
        assert_gauss(eaa([P1, P2], HALF), 1.0, 2.5)

    def test_gaa(self):
        assert_gauss(gaa([P1, P2], HALF), 1.0, 1.25)

    def test_aalv(self):
        assert_gauss(aalv([P1, P2], HALF), 1.0, 2.0)

    @pytest.mark.parametrize("rule", ALL_RULES)
    def test_degenerate_weights(self, rule):
        out = rule([P1, P2], [1.0, 0.0])
        assert_array_equal(out.mean, P1.mean)
        assert_array_equal(out.variance, P1.variance)

    def test_fedavg_point(self):
        assert_allclose(fedavg_point([np.zeros(3), np.full(3, 2.0)], HALF), np.ones(3))
        v = np.array([1.5, -2.0])
        assert_array_equal(fedavg_point([v, v, v], [0.2, 0.3, 0.5]), v)


class TestInvariants:
    @settings(max_examples=100, deadline=None)
    @given(posterior_sets(), st.sampled_from(IDEMPOTENT))
    def test_idempotence(self, case, rule):
        ps, w = case
        out = rule([ps[0]] * len(w), w)
        assert_gauss(out, ps[0].mean, ps[0].variance, tol=1e-12 * max(1.0, np.abs(ps[0].variance).max()))
        assert_allclose(out.mean, ps[0].mean, rtol=1e-12, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(posterior_sets())
    def test_gaa_shrinks_by_sum_of_squared_weights(self, case):
        ps, w = case
        out = gaa([ps[0]] * len(w), w)
        assert_allclose(out.variance, ps[0].variance * np.sum(w**2), rtol=1e-12)

    def test_gaa_uniform_not_idempotent(self):
        out = gaa([P2] * 4, np.full(4, 0.25))
        assert_allclose(out.variance, P2.variance / 4, rtol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(posterior_sets(), st.sampled_from(ALL_RULES), st.integers(0, 1000))
    def test_permutation_invariance(self, case, rule, perm_seed):
        ps, w = case
        perm = np.random.default_rng(perm_seed).permutation(len(w))
        a = rule(ps, w)
        b = rule([ps[i] for i in perm], w[perm])
        assert_array_equal(a.mean, b.mean)
        assert_array_equal(a.variance, b.variance)

    @settings(max_examples=100, deadline=None)
    @given(posterior_sets())
    def test_variance_ordering_uniform(self, case):
        ps, _ = case
        w = np.full(len(ps), 1.0 / len(ps))
        r, g, e = rkl_barycenter(ps, w).variance, aalv(ps, w).variance, eaa(ps, w).variance
        assert np.all(r <= g * (1 + 1e-12))
        assert np.all(g <= e * (1 + 1e-12))

    @settings(max_examples=100, deadline=None)
    @given(posterior_sets(), st.sampled_from(["RKL", "W2"]))
    def test_reparam_identity(self, case, kind):
        ps, w = case
        closed = (rkl_barycenter if kind == "RKL" else w2_barycenter)(ps, w)
        via_map = reparam_barycenter(ps, w, kind)
        assert_allclose(via_map.mean, closed.mean, rtol=1e-10, atol=1e-300)
        assert_allclose(via_map.variance, closed.variance, rtol=1e-10)


class TestDirac:
    def test_example_mean(self):
        for method in ("RKLB", "WB"):
            out = dirac_limit_check([np.array([0.0]), np.array([2.0])], HALF, 1e-10, method)
            assert abs(out.mean[0] - 1.0) <= 1e-8

    def test_variances(self):
        means = [np.array([0.0]), np.array([2.0])]
        assert_allclose(dirac_limit_check(means, HALF, 1e-10, "WB").variance, 1e-10, rtol=1e-15)
        assert_allclose(dirac_limit_check(means, HALF, 1e-10, "RKLB").variance, 1e-10, rtol=1e-15)

    @pytest.mark.parametrize("eps", [1e-6, 1e-8, 1e-10])
    def test_limit_tracks_fedavg(self, eps):
        rng = np.random.default_rng(1)
        means = [rng.uniform(-3, 3, 4) for _ in range(5)]
        w = rng.dirichlet(np.ones(5))
        target = fedavg_point(means, w)
        for method in ("RKLB", "WB"):
            assert np.max(np.abs(dirac_limit_check(means, w, eps, method).mean - target)) <= 10 * eps

    def test_rejects_other_rules(self):
        with pytest.raises(AggregationError):
            dirac_limit_check([np.zeros(1)], [1.0], 1e-6, "EAA")


class TestDiscrete:
    def test_alpha_one_is_mixture(self):
        q = alpha_barycenter_discrete([[0.8, 0.2], [0.2, 0.8]], HALF, 1.0)
        assert_allclose(q, [0.5, 0.5], atol=1e-15)

    def test_alpha_one_degenerate(self):
        assert_allclose(alpha_barycenter_discrete([[0.8, 0.2], [0.2, 0.8]], [1.0, 0.0], 1.0), [0.8, 0.2])

    @pytest.mark.parametrize("alpha", [-0.5, 0.5, 1.0, 2.0])
    def test_idempotence(self, alpha):
        p = [0.1, 0.6, 0.3]
        assert_allclose(alpha_barycenter_discrete([p, p, p], [0.2, 0.3, 0.5], alpha), p, atol=1e-15)
        assert_allclose(rkl_barycenter_discrete([p, p], HALF), p, atol=1e-15)

    def test_geometric_mean(self):
        q = rkl_barycenter_discrete([[0.8, 0.2], [0.2, 0.8]], [0.75, 0.25])
        assert_allclose(q, [2 / 3, 1 / 3], atol=1e-15)

    def test_small_alpha_limit(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pmfs = rng.dirichlet(np.ones(4), size=3)
            w = rng.dirichlet(np.ones(3))
            assert_allclose(alpha_barycenter_discrete(pmfs, w, 1e-6), rkl_barycenter_discrete(pmfs, w), atol=1e-5)

    def test_errors(self):
        with pytest.raises(AggregationError):
            alpha_barycenter_discrete([[0.5, 0.5]], [1.0], 0.0)
        with pytest.raises(AggregationError):
            alpha_barycenter_discrete([[1.0, 0.0], [0.5, 0.5]], HALF, -0.5)
        with pytest.raises(AggregationError):
            alpha_barycenter_discrete([[0.7, 0.7]], [1.0], 0.5)


class TestReparam:
    def test_forward_examples(self):
        assert_allclose(reparam_forward(0.4, 1.6, "RKL"), (0.25, 0.625))
        assert_allclose(reparam_forward(3.0, 1.0, "W2"), (3.0, 1.0))

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-10, 10), st.floats(1e-6, 1e3), st.sampled_from(["RKL", "W2"]))
    def test_round_trip(self, mu, var, kind):
        m, v = reparam_inverse(*reparam_forward(mu, var, kind), kind)
        assert_allclose([m, v], [mu, var], rtol=1e-12, atol=1e-12)

    def test_rkl_map_is_involution(self):
        a = reparam_forward(np.array([0.3, -2.0]), np.array([0.5, 3.0]), "RKL")
        assert_allclose(reparam_forward(*a, "RKL"), (np.array([0.3, -2.0]), np.array([0.5, 3.0])))

    def test_unknown_map(self):
        with pytest.raises(AggregationError):
            reparam_forward(0.0, 1.0, "KL")


def _params(n_bayes, seed):
    specs = bnn.build_specs(3, [4], 2, n_bayes)
    return bnn.init_params(specs, np.random.default_rng(seed))


class TestAggregate:
    def test_fedavg_on_deterministic(self):
        a, b = _params(0, 0), _params(0, 1)
        out = aggregate("FEDAVG", [a, b], [0.25, 0.75])
        assert_allclose(out.flat(), 0.25 * a.flat() + 0.75 * b.flat(), rtol=1e-14)

    @pytest.mark.parametrize("method", ["RKLB", "WB", "EAA", "GAA", "AALV"])
    def test_single_client_unchanged(self, method):
        a = _params(1, 2)
        assert aggregate(method, [a], [1.0]).allclose(a, rtol=1e-12, atol=1e-12)

    def test_rklb_matches_coordinatewise(self):
        a, b = _params(1, 3), _params(1, 4)
        a.layers[-1].weight_rhos[...] = bnn.softplus_inv(0.3)
        w = [0.4, 0.6]
        out = aggregate("RKLB", [a, b], w)
        expect = rkl_barycenter([a.layers[-1].to_gaussian(), b.layers[-1].to_gaussian()], w)
        got = out.layers[-1].to_gaussian()
        assert_allclose(got.mean, expect.mean, rtol=1e-12)
        assert_allclose(got.variance, expect.variance, rtol=1e-10)
        # deterministic prefix is averaged as point masses
        assert_allclose(out.layers[0].weights, 0.4 * a.layers[0].weights + 0.6 * b.layers[0].weights, rtol=1e-14)

    def test_fedavg_rejects_gaussian_layers(self):
        with pytest.raises(AggregationError):
            aggregate("FEDAVG", [_params(1, 0)], [1.0])

    def test_heterogeneous_architectures(self):
        with pytest.raises(AggregationError):
            aggregate("RKLB", [_params(1, 0), _params(2, 1)], HALF)

    def test_bad_weights(self):
        with pytest.raises(AggregationError):
            rkl_barycenter([P1, P2], [0.5, 0.6])
        with pytest.raises(AggregationError):
            rkl_barycenter([P1, P2], [1.5, -0.5])

    def test_method_parse(self):
        assert AggregationMethod.parse("wb") is AggregationMethod.WB
        assert set(GAUSSIAN_RULES) == {m for m in AggregationMethod if m.bayesian}
        with pytest.raises(AggregationError):
            AggregationMethod.parse("median")
