import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import linprog

from helpers import brute_force_dro_value, guarantee_trial, lp_vertex_min, random_pwa_instance

from gmmcso.dro import (
    AffinePiece,
    ConicProgram,
    DroError,
    PiecewiseAffineLoss,
    Polyhedron,
    SocBlock,
    build_dro_socp,
    build_newsvendor_socp,
    dro_solve,
    linear_program,
    mean_cvar_loss,
    mean_cvar_objective,
    newsvendor_dro,
    newsvendor_fractile,
    newsvendor_loss,
    portfolio_dro,
    saa_solve,
    solve_conic,
)

EPS_GRID = (0.0, 0.05, 0.1, 0.5, 1.0)


def newsvendor_cost(q, xi, h, b):
    xi = np.asarray(xi, float)
    return float(np.mean(h * np.maximum(q - xi, 0) + b * np.maximum(xi - q, 0)))


# -- solve_conic -------------------------------------------------------------


def test_trivial_lp_and_cone():
    rep = solve_conic(linear_program([1.0], lb=[3.0]))
    assert rep.ok and rep.objective == pytest.approx(3.0, abs=1e-9)
    cone = SocBlock(np.array([[1.0], [0.0], [0.0]]), np.array([0.0, 1.0, 2.0]))
    p = ConicProgram(np.array([1.0]), np.zeros((0, 1)), np.zeros(0), np.zeros((0, 1)), np.zeros(0),
                     np.array([-np.inf]), np.array([np.inf]), (cone,))
    rep = solve_conic(p)
    assert rep.ok and rep.objective == pytest.approx(math.sqrt(5.0), abs=1e-7)
    assert rep.backend == "clarabel"


@pytest.mark.parametrize("backend", ["highs", "clarabel"])
def test_random_lp_matches_vertex_enumeration(backend):
    rng = np.random.default_rng(0)
    for _ in range(20):
        A = np.vstack([rng.normal(size=(5, 2)), np.eye(2), -np.eye(2)])
        b = np.r_[rng.uniform(0.5, 2.0, size=5), np.full(4, 3.0)]
        c = rng.normal(size=2)
        rep = solve_conic(linear_program(c, A, b), backend)
        assert rep.ok
        assert abs(rep.objective - lp_vertex_min(c, A, b)) < 1e-7


def test_infeasible_and_unbounded_statuses():
    rep = solve_conic(linear_program([1.0], A_ub=[[1.0]], b_ub=[-1.0], lb=[0.0]))
    assert rep.status == "infeasible" and not rep.ok
    rep = solve_conic(linear_program([-1.0], lb=[0.0]))
    assert rep.status == "unbounded"
    with pytest.raises(DroError):
        solve_conic(build_newsvendor_socp([1.0, 2.0], 1, 1, 0.1), "highs")


def test_program_json_roundtrip():
    p = build_newsvendor_socp([3.0, 5.0, 9.0], 10, 2, 0.5)
    back = ConicProgram.from_dict(__import__("json").loads(p.to_json()))
    assert back.to_json() == p.to_json()
    assert solve_conic(back).objective == pytest.approx(solve_conic(p).objective, abs=1e-12)


def test_build_is_reproducible_and_sized():
    rng = np.random.default_rng(1)
    loss, X, S = random_pwa_instance(rng)
    a, b = build_dro_socp(loss, X, S, 0.3), build_dro_socp(loss, X, S, 0.3)
    assert a.to_json() == b.to_json()
    J, M = len(loss.pieces), S.shape[0]
    assert len(a.cones) == J * M
    assert a.A_ub.shape[0] == X.A_ub.shape[0] + J * M
    with pytest.raises(DroError):
        build_dro_socp(loss, X, S[:, :1], 0.3)
    with pytest.raises(DroError):
        build_dro_socp(loss, X, np.zeros((0, 2)), 0.3)
    with pytest.raises(DroError):
        build_dro_socp(loss, X, S, -1.0)


# -- generic DRO ---------------------------------------------------------------


def test_constant_loss_ignores_radius():
    c = np.array([1.0, -2.0])
    loss = PiecewiseAffineLoss((AffinePiece(np.zeros((1, 2)), [0.0], c, 0.0),))
    X = Polyhedron.box(2, 0.0, 1.0)
    S = np.array([[0.5], [-1.0], [2.0]])
    for eps in (0.0, 0.5, 2.0):
        rep = dro_solve(loss, X, S, eps)
        assert rep.ok and rep.objective == pytest.approx(-2.0, abs=1e-6)


def test_dro_matches_saa_at_zero_and_dominates():
    rng = np.random.default_rng(2)
    for _ in range(30):
        loss, X, S = random_pwa_instance(rng)
        saa = saa_solve(loss, X, S)
        assert saa.ok
        vals = []
        for eps in EPS_GRID:
            rep = dro_solve(loss, X, S, eps)
            assert rep.ok
            vals.append(rep.objective)
        assert abs(vals[0] - saa.objective) <= 1e-5 * max(1.0, abs(saa.objective))
        assert all(v >= saa.objective - 1e-7 for v in vals)
        assert all(b >= a - 1e-7 for a, b in zip(vals, vals[1:]))


def test_both_cone_forms_agree():
    rng = np.random.default_rng(3)
    loss, X, S = random_pwa_instance(rng, m=5)
    a = solve_conic(build_dro_socp(loss, X, S, 0.4, form="displayed"))
    b = solve_conic(build_dro_socp(loss, X, S, 0.4, form="balanced"))
    c = solve_conic(build_dro_socp(loss, X, S, 0.4, center=S.mean(0), scale=2.0, form="balanced"))
    assert a.ok and b.ok and c.ok
    assert a.objective == pytest.approx(b.objective, abs=1e-6)
    assert c.objective == pytest.approx(b.objective, abs=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_reformulation_matches_penalized_inner_supremum(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 6))
    loss, _, S = random_pwa_instance(rng, n=1, r=1, j=int(rng.integers(1, 4)), m=m)
    X = Polyhedron.box(1, -1.0, 1.0)
    for eps in (0.1, 0.5):
        rep = dro_solve(loss, X, S, eps)
        assert rep.ok
        assert abs(rep.objective - brute_force_dro_value(loss, -1.0, 1.0, S, eps)) < 1e-4


def test_out_of_sample_guarantee_small_batch():
    hits = 0
    for seed in range(20):
        true_loss, se, value, _ = guarantee_trial(seed, n_mc=20_000)
        hits += true_loss <= value + 3 * se
    assert hits >= 18


# -- SAA newsvendor ----------------------------------------------------------


def test_saa_newsvendor_examples():
    X = Polyhedron.box(1, lb=0.0)
    rep = saa_solve(newsvendor_loss(3.0, 3.0), X, [4.0, 1.0, 9.0, 7.0, 2.0])
    assert rep.x[0] == pytest.approx(4.0, abs=1e-6)
    rep = saa_solve(newsvendor_loss(3.0, 3.0), X, [1.0, 2.0, 7.0, 9.0])
    assert 2.0 - 1e-6 <= rep.x[0] <= 7.0 + 1e-6
    rep = saa_solve(newsvendor_loss(10.0, 2.0), X, [6.5])
    assert rep.x[0] == pytest.approx(6.5, abs=1e-6)
    assert rep.objective == pytest.approx(0.0, abs=1e-8)


def test_saa_newsvendor_seven_sample_grid():
    xi = np.array([3.2, 8.1, 5.5, 1.0, 9.4, 4.4, 6.7])
    h, b = 4.0, 7.0
    rep = saa_solve(newsvendor_loss(h, b), Polyhedron.box(1, lb=0.0), xi)
    grid = np.arange(0.0, 10.0, 1e-4)
    costs = np.array([newsvendor_cost(q, xi, h, b) for q in grid[::10]])
    fine = grid[max(np.argmin(costs) * 10 - 20, 0): np.argmin(costs) * 10 + 20]
    best = min(newsvendor_cost(q, xi, h, b) for q in fine)
    assert abs(rep.objective - best) < 1e-4
    assert abs(newsvendor_cost(rep.x[0], xi, h, b) - rep.objective) < 1e-7


# -- robust newsvendor -------------------------------------------------------


def test_newsvendor_zero_radius_fractile():
    xi = np.arange(1.0, 101.0)
    q, rep = newsvendor_dro(xi, 10.0, 2.0, 0.0)
    assert rep.ok
    assert newsvendor_fractile(xi, 10.0, 2.0) == 17.0
    assert abs(q - 17.0) <= 1.0
    rng = np.random.default_rng(4)
    xi = rng.uniform(5, 50, size=31)
    q, _ = newsvendor_dro(xi, 10.0, 2.0, 0.0)
    assert q == pytest.approx(newsvendor_fractile(xi, 10.0, 2.0), abs=1e-4)


def test_newsvendor_two_point_symmetric():
    q, rep = newsvendor_dro([0.0, 10.0], 3.0, 3.0, 0.0)
    assert 0.0 - 1e-6 <= q <= 10.0 + 1e-6
    grid = np.linspace(0, 10, 1001)
    assert rep.objective == pytest.approx(min(newsvendor_cost(g, [0, 10], 3, 3) for g in grid), abs=1e-6)
    assert rep.objective == pytest.approx(15.0, abs=1e-6)


def test_newsvendor_value_nondecreasing_in_radius():
    xi = np.random.default_rng(5).normal(50, 3, size=40)
    vals = [newsvendor_dro(xi, 10.0, 2.0, e)[1].objective for e in EPS_GRID]
    assert all(b >= a - 1e-7 for a, b in zip(vals, vals[1:]))
    assert vals[-1] > vals[0]


def test_newsvendor_matches_generic_program():
    xi = np.random.default_rng(6).normal(50, 3, size=25)
    for eps in (0.0, 0.1, 0.5, 1.0):
        q, rep = newsvendor_dro(xi, 10.0, 2.0, eps)
        gen = dro_solve(newsvendor_loss(10.0, 2.0), Polyhedron.box(1, lb=0.0), xi, eps)
        assert q >= 0
        assert rep.objective == pytest.approx(gen.objective, abs=1e-6)


def test_stalled_solve_is_retried_at_another_scaling(monkeypatch):
    import gmmcso.dro as dro

    xi = np.random.default_rng(6).normal(50, 3, size=25)
    ref = newsvendor_dro(xi, 10.0, 2.0, 0.1)[1].objective
    seen = []
    real = dro.solve_conic

    def first_stalls(p, backend="auto", tol=1e-8, max_iter=200):
        seen.append(p.layout["kappa"])
        rep = real(p, backend, tol, max_iter)
        return replace(rep, status="numeric-failure") if len(seen) == 1 else rep

    monkeypatch.setattr(dro, "solve_conic", first_stalls)
    q, rep = newsvendor_dro(xi, 10.0, 2.0, 0.1)
    assert rep.status == "optimal" and len(seen) == 2 and seen[1] != seen[0]
    assert rep.objective == pytest.approx(ref, abs=1e-6)


def test_newsvendor_input_errors():
    with pytest.raises(DroError):
        newsvendor_dro([], 1.0, 1.0, 0.1)
    with pytest.raises(DroError):
        newsvendor_dro([1.0], 0.0, 1.0, 0.1)
    with pytest.raises(DroError):
        newsvendor_dro([1.0], 1.0, 1.0, -0.1)


# -- portfolio ---------------------------------------------------------------


def rockafellar_uryasev_lp(R, tau, eta):
    """Epigraph LP over ``(x, beta, u)`` for the empirical mean-CVaR objective."""
    M, D = R.shape
    c = np.r_[-eta * R.mean(0), 1.0, np.full(M, 1.0 / (tau * M))]
    A = np.hstack([-R, -np.ones((M, 1)), -np.eye(M)])
    res = linprog(c, A_ub=A, b_ub=np.zeros(M), A_eq=np.r_[np.ones(D), 0.0, np.zeros(M)][None],
                  b_eq=[1.0], bounds=[(0, None)] * D + [(None, None)] + [(0, None)] * M, method="highs")
    return res.fun, res.x[:D]


def test_portfolio_single_asset():
    r = np.random.default_rng(7).normal(0.01, 0.05, size=(30, 1))
    sol = portfolio_dro(r, 0.1, 2.0, 0.0)
    np.testing.assert_allclose(sol.weights, [1.0])
    want = mean_cvar_objective([1.0], r, 0.1, 2.0)
    assert sol.report.objective == pytest.approx(want, abs=1e-6)


def test_portfolio_dominant_asset():
    rng = np.random.default_rng(8)
    a = rng.normal(0.0, 0.05, size=20)
    R = np.column_stack([a, a + 0.02])
    sol = portfolio_dro(R, 0.2, 1.0, 0.0)
    np.testing.assert_allclose(sol.weights, [0.0, 1.0], atol=1e-6)


def test_portfolio_matches_epigraph_lp():
    rng = np.random.default_rng(9)
    R = rng.normal(0.01, 0.05, size=(10, 3))
    for eta in (0.0, 1.0, 5.0):
        sol = portfolio_dro(R, 0.2, eta, 0.0)
        val, _ = rockafellar_uryasev_lp(R, 0.2, eta)
        assert sol.report.objective == pytest.approx(val, abs=1e-6)
        assert mean_cvar_objective(sol.weights, R, 0.2, eta) == pytest.approx(val, abs=1e-6)
        assert abs(sol.weights.sum() - 1.0) < 1e-8 and np.all(sol.weights >= 0)


def test_portfolio_robust_value_monotone():
    R = np.random.default_rng(10).normal(0.01, 0.05, size=(15, 3))
    vals = [portfolio_dro(R, 0.1, 1.0, e).report.objective for e in EPS_GRID]
    assert all(b >= a - 1e-7 for a, b in zip(vals, vals[1:]))


def test_mean_cvar_loss_validation():
    with pytest.raises(DroError):
        mean_cvar_loss(2, 1.0, 1.0)
    with pytest.raises(DroError):
        mean_cvar_loss(2, 0.1, -1.0)
