"""Wasserstein-2 tools for Gaussians and Gaussian mixtures, plus the
estimation-error bound calculators used to size ambiguity sets.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import linear_sum_assignment, linprog

from .gmm import (
    EmConfig,
    GaussianComponent,
    GaussianMixture,
    Partition,
    fit_em,
    log_pdf,
    marginal,
)


class TransportError(ValueError):
    pass


def psd_sqrt(a: NDArray) -> NDArray:
    """Symmetric square root; negative eigenvalues from round-off are clamped to zero."""
    a = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(a)
    if vals[0] < -1e-8 * max(1.0, abs(vals[-1])):
        raise TransportError(f"matrix is indefinite (eigenvalue {vals[0]:.3e})")
    root = (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T
    return 0.5 * (root + root.T)


def w2_gaussian_sq(mu1, cov1, mu2, cov2) -> float:
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    cov1, cov2 = np.atleast_2d(cov1).astype(float), np.atleast_2d(cov2).astype(float)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise TransportError("dimension mismatch between Gaussians")
    r1 = psd_sqrt(cov1)
    cross = psd_sqrt(r1 @ cov2 @ r1)
    val = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def w2_gaussian(c1: GaussianComponent, c2: GaussianComponent) -> float:
    """Closed-form W2 between two Gaussians (Bures-Wasserstein)."""
    return math.sqrt(w2_gaussian_sq(c1.mean, c1.cov, c2.mean, c2.cov))


@dataclass(frozen=True)
class Coupling:
    plan: NDArray
    value: float
    duality_gap: float


def discrete_ot(cost: ArrayLike, p: ArrayLike, q: ArrayLike) -> Coupling:
    """Transportation LP ``min <pi, C>`` with row sums ``p`` and column sums ``q``.

    Solved with HiGHS; the returned gap compares the primal value with the
    dual objective built from the equality-row multipliers.
    """
    C = np.atleast_2d(np.asarray(cost, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    K, L = C.shape
    if p.shape != (K,) or q.shape != (L,):
        raise TransportError("marginal lengths do not match the cost matrix")
    if not np.all(np.isfinite(C)) or np.any(C < 0):
        raise TransportError("cost must be finite and nonnegative")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < -1e-12) or abs(v.sum() - 1.0) > 1e-10:
            raise TransportError(f"marginal {name} is not on the simplex (sum={v.sum()!r})")
    p = np.maximum(p, 0.0) / np.maximum(p, 0.0).sum()
    q = np.maximum(q, 0.0) / np.maximum(q, 0.0).sum()
    if K == 1 or L == 1:
        plan = np.outer(p, q)
        return Coupling(plan, float(np.sum(plan * C)), 0.0)
    # rows: K row-sum constraints, then L column-sum constraints
    A = np.zeros((K + L, K * L))
    for i in range(K):
        A[i, i * L:(i + 1) * L] = 1.0
    for j in range(L):
        A[K + j, j::L] = 1.0
    b = np.concatenate([p, q])
    res = linprog(C.ravel(), A_eq=A, b_eq=b, bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise TransportError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(K, L), 0.0)
    value = float(np.sum(plan * C))
    y = res.eqlin.marginals
    u, v = y[:K], y[K:]
    # certify with a dual-feasible point: shift v so u_i + v_j <= C_ij holds exactly
    slack = C - u[:, None] - v[None, :]
    v = v + np.minimum(slack.min(axis=0), 0.0)
    dual = float(p @ u + q @ v)
    return Coupling(plan, value, abs(value - dual))


def w2_gmm_upper(m1: GaussianMixture, m2: GaussianMixture) -> float:
    """Upper bound on W2 between mixtures: OT over components with Gaussian W2^2 costs."""
    if m1.dim != m2.dim:
        raise TransportError("mixtures live in different dimensions")
    C = np.array([[w2_gaussian_sq(a.mean, a.cov, b.mean, b.cov) for b in m2.components]
                  for a in m1.components])
    return math.sqrt(max(discrete_ot(C, m1.weights, m2.weights).value, 0.0))


# ---------------------------------------------------------------------------
# bound constants


@dataclass(frozen=True)
class BoundConstants:
    alpha: float
    beta: float
    gamma: float
    p_floor: float
    loss_bound: float = 1.0
    f_upper: float = 1.0
    f_lower: float = 1.0
    delta: float = 0.05

    def __post_init__(self):
        if not (0 < self.alpha <= self.beta):
            raise TransportError("need 0 < alpha <= beta")
        if self.gamma <= 0 or self.p_floor <= 0 or self.p_floor > 1:
            raise TransportError("gamma and p_floor must be positive (p_floor <= 1)")
        if self.loss_bound <= 0 or self.f_upper <= 0 or self.f_lower <= 0:
            raise TransportError("loss and density bounds must be positive")
        if not (0 < self.delta < 1):
            raise TransportError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class EstimationErrors:
    eps_p: float = 0.0
    eps_mu: float = 0.0
    eps_sigma: float = 0.0

    def __post_init__(self):
        if min(self.eps_p, self.eps_mu, self.eps_sigma) < 0:
            raise TransportError("estimation errors must be nonnegative")


def error_constants(dims: int, consts: BoundConstants, errs: EstimationErrors) -> tuple[float, float, float]:
    """The quadratic/linear/constant coefficients ``(C_D, C'_D, C''_D)``.

    The little-o remainder in ``C''_D`` has no stated constant and is taken as 0.
    """
    if dims < 1:
        raise TransportError("dimension must be at least 1")
    a, g = consts.alpha, consts.gamma
    lift = 1.0 + errs.eps_p / consts.p_floor
    c2 = lift * dims * errs.eps_sigma / (2.0 * a * a)
    c1 = lift * (errs.eps_mu / a + dims * errs.eps_sigma * g / (a * a))
    c0 = errs.eps_p / consts.p_floor + lift * (
        errs.eps_mu * g / a + dims * errs.eps_sigma * (g * g + a) / (2.0 * a * a)
    )
    return c2, c1, c0


def outcome_constants(r_dims: int, consts: BoundConstants, errs: EstimationErrors) -> tuple[float, float]:
    """Coefficients ``(c_R, c'_R)`` of the mean/covariance error term."""
    a, b, g = consts.alpha, consts.beta, consts.gamma
    sr = math.sqrt(r_dims)
    c_r = sr * (a + b) / a**3 * errs.eps_sigma
    c_rp = sr / a * ((b / a + 1.0) * errs.eps_mu + (a + b) / a**2 * g * errs.eps_sigma) + 0.5 * r_dims**2 / a * (
        b / a
    ) ** 2 * errs.eps_sigma
    return c_r, c_rp


def approx_error_bound(s: ArrayLike, consts: BoundConstants, errs: EstimationErrors, q_dims: int, r_dims: int) -> float:
    """Bound on the gap between true and estimated conditional expected loss at covariate ``s``."""
    ns = float(np.linalg.norm(np.atleast_1d(np.asarray(s, dtype=float))))
    c2, c1, c0 = error_constants(max(q_dims, 1), consts, errs)
    c_r, c_rp = outcome_constants(r_dims, consts, errs)
    return consts.loss_bound * (2.0 * (c2 * ns**2 + c1 * ns + c0) + c_r * ns + c_rp)


def coverage_radius_sq(s: ArrayLike, consts: BoundConstants, errs: EstimationErrors, dims: int, q_dims: int) -> float:
    a, b, g = consts.alpha, consts.beta, consts.gamma
    ns = float(np.linalg.norm(np.atleast_1d(np.asarray(s, dtype=float))))
    c2, c1, c0 = error_constants(max(q_dims, 1), consts, errs)
    mean_term = (b / a + 1.0) * errs.eps_mu + (a + b) / a**2 * (ns + g) * errs.eps_sigma
    return mean_term**2 + dims * (b / a) ** 2 * errs.eps_sigma + 2.0 * (4.0 * g * g + 2.0 * dims * b) * (
        c2 * ns**2 + c1 * ns + c0
    )


def coverage_radius(s: ArrayLike, consts: BoundConstants, errs: EstimationErrors, dims: int, q_dims: int) -> float:
    """Wasserstein radius large enough to contain the true conditional mixture.

    ``dims`` is the dimension entering the Gaussian W2 bound; callers pass the
    outcome dimension for conditional balls.
    """
    return math.sqrt(coverage_radius_sq(s, consts, errs, dims, q_dims))


def bound_table(s, consts: BoundConstants, errs: EstimationErrors, q_dims: int, r_dims: int) -> dict:
    """JSON-ready summary of every constant and the resulting radius/bound."""
    c2, c1, c0 = error_constants(max(q_dims, 1), consts, errs)
    c_r, c_rp = outcome_constants(r_dims, consts, errs)
    return {
        "C": c2,
        "Cp": c1,
        "Cpp": c0,
        "cR": c_r,
        "cRp": c_rp,
        "radius": coverage_radius(s, consts, errs, r_dims, q_dims),
        "approx_error": approx_error_bound(s, consts, errs, q_dims, r_dims),
        "little_o_terms": "set to zero",
        "assumptions": asdict(consts),
        "errors": asdict(errs),
    }


def empirical_constants(
    m: GaussianMixture, part: Partition | None = None, s: ArrayLike | None = None,
    loss_bound: float = 1.0, delta: float = 0.05,
) -> BoundConstants:
    """Surrogate constants read off a fitted mixture.

    ``alpha``/``beta`` are the extreme covariance eigenvalues, ``gamma`` the
    largest mean norm and ``p_floor`` the smallest weight. With a partition
    and covariate ``s``, ``f_lower`` is the fitted covariate density at ``s``
    and ``f_upper`` the peak of the covariate-given-outcome component
    densities; otherwise both default to 1.
    """
    eig = np.concatenate([np.linalg.eigvalsh(c) for c in m.covs])
    alpha, beta = float(eig.min()), float(eig.max())
    gamma = float(max(np.linalg.norm(m.means, axis=1).max(), 1e-12))
    f_upper = f_lower = 1.0
    if part is not None and s is not None and part.q_dims > 0:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        f_lower = float(np.exp(log_pdf(marginal(m, part.s_idx), s)))
        peaks = []
        for mu, S in zip(m.means, m.covs):
            si, xi = part.s_idx, part.xi_idx
            schur = S[np.ix_(si, si)] - S[np.ix_(si, xi)] @ np.linalg.solve(S[np.ix_(xi, xi)], S[np.ix_(xi, si)])
            peaks.append((2 * np.pi) ** (-part.q_dims / 2) / math.sqrt(max(np.linalg.det(schur), 1e-300)))
        f_upper = float(max(peaks))
    return BoundConstants(alpha, max(beta, alpha), gamma, float(m.weights.min()), loss_bound,
                          max(f_upper, 1e-300), max(f_lower, 1e-300), delta)


def bootstrap_errors(data, k: int, cfg: EmConfig | None = None, n_boot: int = 20,
                     quantile: float = 0.9, seed: int = 0) -> EstimationErrors:
    """Heuristic spread of EM estimates under bootstrap resampling.

    Components of each bootstrap fit are matched to the full-data fit by
    minimum total mean distance; the ``quantile`` of the worst per-component
    deviations is reported for weights, means (Euclidean) and covariances
    (spectral norm). This is a rough calibration aid, not a guarantee.
    """
    X = np.asarray(getattr(data, "rows", data), dtype=float)
    ref = fit_em(X, k, cfg).mixture
    rng = np.random.default_rng(seed)
    dp, dm, ds = [], [], []
    for _ in range(n_boot):
        Xb = X[rng.integers(0, X.shape[0], X.shape[0])]
        mb = fit_em(Xb, k, cfg).mixture
        cost = np.linalg.norm(ref.means[:, None, :] - mb.means[None, :, :], axis=2)
        r, c = linear_sum_assignment(cost)
        dp.append(np.max(np.abs(ref.weights[r] - mb.weights[c])))
        dm.append(np.max(np.linalg.norm(ref.means[r] - mb.means[c], axis=1)))
        ds.append(max(np.linalg.norm(ref.covs[i] - mb.covs[j], 2) for i, j in zip(r, c)))
    return EstimationErrors(float(np.quantile(dp, quantile)), float(np.quantile(dm, quantile)),
                            float(np.quantile(ds, quantile)))


@dataclass(frozen=True)
class RobustCenter:
    k: int
    radius: float
    table: dict[int, dict[int, float]]  # table[L][K'] = bound between candidate L and center K'


def robust_center_k(cands: Mapping[int, GaussianMixture], base_eps: float) -> RobustCenter:
    """Choose the candidate mixture size whose conditional is the minimax W2-bound center.

    Returns the center ``K'``, the enlarged radius
    ``base_eps + max_L W2bar(M^L, M^K')`` and the full pairwise table.
    Ties go to the smaller ``K'``.
    """
    if not cands:
        raise TransportError("no candidate mixtures")
    keys = sorted(cands)
    dims = {cands[k].dim for k in keys}
    if len(dims) != 1:
        raise TransportError("candidates have different outcome dimensions")
    table = {L: {K: (0.0 if L == K else w2_gmm_upper(cands[L], cands[K])) for K in keys} for L in keys}
    worst = {K: max(table[L][K] for L in keys) for K in keys}
    best = min(keys, key=lambda K: (worst[K], K))
    return RobustCenter(best, base_eps + worst[best], table)
