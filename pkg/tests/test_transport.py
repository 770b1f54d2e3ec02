import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import vertex_enumeration_ot

from gmmcso.gmm import GaussianComponent, GaussianMixture, Partition, sample
from gmmcso.transport import (
    BoundConstants,
    EstimationErrors,
    TransportError,
    approx_error_bound,
    bootstrap_errors,
    bound_table,
    coverage_radius,
    coverage_radius_sq,
    discrete_ot,
    empirical_constants,
    error_constants,
    robust_center_k,
    w2_gaussian,
    w2_gaussian_sq,
    w2_gmm_upper,
)

UNIT = BoundConstants(alpha=1.0, beta=1.0, gamma=1.0, p_floor=0.5)


def gauss(mu, cov):
    return GaussianComponent(np.atleast_1d(np.asarray(mu, float)), np.atleast_2d(np.asarray(cov, float)))


def random_spd(rng, d):
    A = rng.normal(size=(d, d))
    return A @ A.T + 0.1 * np.eye(d)


# -- Gaussian W2 -------------------------------------------------------------


def test_w2_scalar_example():
    assert w2_gaussian_sq(0.0, 1.0, 2.0, 4.0) == pytest.approx(5.0, abs=1e-12)
    assert w2_gaussian(gauss(0, 1), gauss(2, 4)) == pytest.approx(math.sqrt(5.0), abs=1e-12)


def test_w2_identical_is_zero():
    rng = np.random.default_rng(0)
    S = random_spd(rng, 3)
    mu = rng.normal(size=3)
    assert w2_gaussian(gauss(mu, S), gauss(mu, S)) == pytest.approx(0.0, abs=1e-7)


def test_w2_diagonal_commuting_case():
    rng = np.random.default_rng(1)
    for _ in range(100):
        d = int(rng.integers(1, 5))
        m1, m2 = rng.normal(size=d), rng.normal(size=d)
        s1, s2 = rng.uniform(0.1, 3, size=d), rng.uniform(0.1, 3, size=d)
        want = np.sum((m1 - m2) ** 2 + (s1 - s2) ** 2)
        got = w2_gaussian_sq(m1, np.diag(s1**2), m2, np.diag(s2**2))
        assert abs(got - want) < 1e-10


def test_w2_symmetric_and_triangle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        d = int(rng.integers(1, 4))
        a, b, c = (gauss(rng.normal(size=d), random_spd(rng, d)) for _ in range(3))
        ab, bc, ac = w2_gaussian(a, b), w2_gaussian(b, c), w2_gaussian(a, c)
        assert abs(ab - w2_gaussian(b, a)) < 1e-8
        assert ac <= ab + bc + 1e-8


def test_w2_errors():
    with pytest.raises(TransportError):
        w2_gaussian_sq([0.0], [[1.0]], [0.0, 0.0], np.eye(2))
    with pytest.raises(TransportError):
        w2_gaussian_sq([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0], np.eye(2))


# -- discrete OT -------------------------------------------------------------


def test_ot_trivial_instances():
    c = discrete_ot([[3.5]], [1.0], [1.0])
    np.testing.assert_array_equal(c.plan, [[1.0]])
    assert c.value == 3.5
    c = discrete_ot([[0, 1], [1, 0]], [0.5, 0.5], [0.5, 0.5])
    assert c.value == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(c.plan, np.diag([0.5, 0.5]), atol=1e-10)


def test_ot_matches_vertex_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(50):
        K, L = rng.integers(2, 5, size=2)
        C = rng.uniform(0, 5, size=(K, L))
        p, q = rng.dirichlet(np.ones(K)), rng.dirichlet(np.ones(L))
        c = discrete_ot(C, p, q)
        assert abs(c.value - vertex_enumeration_ot(C, p, q)) < 1e-8
        np.testing.assert_allclose(c.plan.sum(1), p, atol=1e-8)
        np.testing.assert_allclose(c.plan.sum(0), q, atol=1e-8)
        assert c.duality_gap < 1e-8
        assert np.all(c.plan >= 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ot_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    K, L = rng.integers(1, 5, size=2)
    C = rng.uniform(0, 3, size=(K, L))
    p, q = rng.dirichlet(np.ones(K)), rng.dirichlet(np.ones(L))
    pr, pc = rng.permutation(K), rng.permutation(L)
    a = discrete_ot(C, p, q).value
    b = discrete_ot(C[np.ix_(pr, pc)], p[pr], q[pc]).value
    assert abs(a - b) < 1e-9


def test_ot_rejects_bad_marginals():
    with pytest.raises(TransportError):
        discrete_ot(np.ones((2, 2)), [0.5, 0.6], [0.5, 0.5])
    with pytest.raises(TransportError):
        discrete_ot(-np.ones((2, 2)), [0.5, 0.5], [0.5, 0.5])
    with pytest.raises(TransportError):
        discrete_ot(np.ones((2, 3)), [0.5, 0.5], [0.5, 0.5])


# -- mixture bound -----------------------------------------------------------


def test_gmm_upper_reductions():
    a = GaussianMixture([1.0], [[0.0]], [[[1.0]]])
    b = GaussianMixture([1.0], [[2.0]], [[[4.0]]])
    assert w2_gmm_upper(a, b) == pytest.approx(math.sqrt(5.0), abs=1e-10)
    m = GaussianMixture([0.3, 0.7], [[0.0, 1.0], [2.0, -1.0]], [np.eye(2), 2 * np.eye(2)])
    assert w2_gmm_upper(m, m) == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(TransportError):
        w2_gmm_upper(a, m)


def test_gmm_upper_dominates_sorted_sample_w2():
    m1 = GaussianMixture([0.5, 0.5], [[-2.0], [2.0]], [[[1.0]], [[1.0]]])
    m2 = GaussianMixture([0.3, 0.7], [[-1.0], [3.0]], [[[0.5]], [[2.0]]])
    bound = w2_gmm_upper(m1, m2)
    hits = 0
    for seed in range(100):
        a = np.sort(sample(m1, 10_000, seed)[:, 0])
        b = np.sort(sample(m2, 10_000, seed + 1000)[:, 0])
        hits += bound >= math.sqrt(np.mean((a - b) ** 2))
    assert hits >= 99


# -- bound calculators -------------------------------------------------------


def test_error_constants_examples():
    assert error_constants(3, UNIT, EstimationErrors()) == (0.0, 0.0, 0.0)
    c = error_constants(1, UNIT, EstimationErrors(eps_mu=0.1))
    assert c[0] == 0.0
    assert c[1] == pytest.approx(0.1, abs=1e-12)
    assert c[2] == pytest.approx(0.1, abs=1e-12)


def test_error_constants_linear_in_sigma():
    e1 = EstimationErrors(eps_p=0.05, eps_mu=0.1, eps_sigma=0.2)
    e2 = EstimationErrors(eps_p=0.05, eps_mu=0.1, eps_sigma=0.4)
    consts = BoundConstants(0.5, 2.0, 1.5, 0.2)
    assert error_constants(2, consts, e2)[0] == pytest.approx(2 * error_constants(2, consts, e1)[0], rel=1e-14)


def test_approx_error_bound_worked_instance():
    errs = EstimationErrors(eps_mu=0.1)
    assert approx_error_bound([0.0], UNIT, errs, 1, 1) == pytest.approx(0.4, abs=1e-12)
    assert approx_error_bound([0.0], UNIT, EstimationErrors(), 1, 1) == 0.0


def test_coverage_radius_worked_instance():
    errs = EstimationErrors(eps_mu=0.1)
    assert coverage_radius_sq([0.0], UNIT, errs, 1, 1) == pytest.approx(1.24, abs=1e-12)
    assert coverage_radius([0.0], UNIT, EstimationErrors(), 1, 1) == 0.0


@settings(max_examples=50, deadline=None)
@given(ep=st.floats(0, 0.5), em=st.floats(0, 1), es=st.floats(0, 1), which=st.integers(0, 2),
       bump=st.floats(0.01, 1), s=st.floats(0, 3))
def test_bounds_monotone_in_errors_and_norm(ep, em, es, which, bump, s):
    consts = BoundConstants(0.5, 2.0, 1.0, 0.25)
    base = [ep, em, es]
    up = list(base)
    up[which] += bump
    e0, e1 = EstimationErrors(*base), EstimationErrors(*up)
    assert coverage_radius([s], consts, e1, 2, 1) >= coverage_radius([s], consts, e0, 2, 1) - 1e-12
    assert approx_error_bound([s], consts, e1, 1, 2) >= approx_error_bound([s], consts, e0, 1, 2) - 1e-12
    assert approx_error_bound([s + 1], consts, e0, 1, 2) >= approx_error_bound([s], consts, e0, 1, 2) - 1e-12
    assert coverage_radius([s + 1], consts, e0, 2, 1) >= coverage_radius([s], consts, e0, 2, 1) - 1e-12
    assert coverage_radius([s], consts, e1, 2, 1) > 0
    assert approx_error_bound([s], consts, e1, 1, 2) > 0


def test_bound_constants_validation():
    with pytest.raises(TransportError):
        BoundConstants(2.0, 1.0, 1.0, 0.5)
    with pytest.raises(TransportError):
        BoundConstants(1.0, 1.0, 1.0, 0.5, delta=1.0)
    with pytest.raises(TransportError):
        EstimationErrors(eps_mu=-0.1)
    with pytest.raises(TransportError):
        error_constants(0, UNIT, EstimationErrors())


def test_bound_table_json():
    tab = bound_table([0.0], UNIT, EstimationErrors(eps_mu=0.1), 1, 1)
    back = json.loads(json.dumps(tab))
    assert set(back) >= {"C", "Cp", "Cpp", "cR", "cRp", "radius", "assumptions"}
    assert back["radius"] == pytest.approx(math.sqrt(1.24), abs=1e-12)


def test_empirical_constants_and_bootstrap():
    m = GaussianMixture([0.4, 0.6], [[0.0, 1.0], [3.0, -1.0]], [np.diag([1.0, 2.0]), np.diag([0.5, 1.0])])
    c = empirical_constants(m, Partition(1, 1), [0.5])
    assert c.alpha == pytest.approx(0.5)
    assert c.beta == pytest.approx(2.0)
    assert c.gamma == pytest.approx(math.sqrt(10.0))
    assert c.p_floor == pytest.approx(0.4)
    assert c.f_lower > 0 and c.f_upper > 0
    errs = bootstrap_errors(sample(m, 400, 0), 2, n_boot=5)
    assert min(errs.eps_p, errs.eps_mu, errs.eps_sigma) >= 0


# -- robust center -----------------------------------------------------------


def scalar(mu, var=1.0):
    return GaussianMixture([1.0], [[mu]], [[[var]]])


def test_robust_center_single_and_identical():
    r = robust_center_k({2: scalar(0.0)}, 0.3)
    assert r.k == 2 and r.radius == 0.3
    r = robust_center_k({1: scalar(1.0), 3: scalar(1.0)}, 0.3)
    assert r.k == 1
    assert r.radius == pytest.approx(0.3, abs=1e-9)
    with pytest.raises(TransportError):
        robust_center_k({}, 0.1)


def test_robust_center_brute_force():
    cands = {1: scalar(0.0), 2: scalar(1.0, 2.0), 3: scalar(3.0, 0.5)}
    r = robust_center_k(cands, 0.1)
    worst = {}
    for K in cands:
        worst[K] = max(0.0 if L == K else w2_gaussian(cands[L].components[0], cands[K].components[0])
                       for L in cands)
    best = min(worst, key=lambda K: (worst[K], K))
    assert r.k == best == 2
    assert r.radius == pytest.approx(0.1 + worst[best], abs=1e-9)
    assert r.radius >= 0.1
