"""Conic programs for sample-based and Wasserstein-robust decision problems.

Losses are maxima of affine functions of the outcome whose coefficients are
affine in the decision. ``build_dro_socp`` turns a type-2 Wasserstein ball
around an empirical measure into a second-order cone program; ``saa_solve``
is the plain epigraph LP. Two specializations (newsvendor and mean-CVaR
portfolio) sit on top.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.sparse as sp
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import linprog

Status = Literal["optimal", "infeasible", "unbounded", "numeric-failure"]

DEFAULT_TOL = 1e-8
ACCEPT_TOL = 1e-7


class DroError(ValueError):
    pass


# ---------------------------------------------------------------------------
# losses and feasible sets


@dataclass(frozen=True)
class AffinePiece:
    """One piece ``a(x)^T xi + b(x)`` with ``a(x) = G x + g`` and ``b(x) = h^T x + h0``."""

    G: NDArray
    g: NDArray
    h: NDArray
    h0: float

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        g = np.atleast_1d(np.asarray(self.g, dtype=float))
        h = np.atleast_1d(np.asarray(self.h, dtype=float))
        if G.shape != (g.size, h.size):
            raise DroError(f"piece shapes inconsistent: G{G.shape}, g({g.size}), h({h.size})")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "h0", float(self.h0))


@dataclass(frozen=True)
class PiecewiseAffineLoss:
    pieces: tuple[AffinePiece, ...]

    def __post_init__(self):
        pieces = tuple(self.pieces)
        if not pieces:
            raise DroError("a loss needs at least one piece")
        shapes = {p.G.shape for p in pieces}
        if len(shapes) != 1:
            raise DroError("pieces have inconsistent dimensions")
        object.__setattr__(self, "pieces", pieces)

    @property
    def n_decisions(self) -> int:
        return self.pieces[0].G.shape[1]

    @property
    def r_dims(self) -> int:
        return self.pieces[0].G.shape[0]

    def piece_values(self, x: ArrayLike, xi: ArrayLike) -> NDArray:
        """Matrix ``(M, J)`` of piece values at decision ``x`` for outcome rows ``xi``."""
        x = np.asarray(x, dtype=float)
        X = np.atleast_2d(np.asarray(xi, dtype=float)).reshape(-1, self.r_dims)
        cols = [X @ (p.G @ x + p.g) + p.h @ x + p.h0 for p in self.pieces]
        return np.stack(cols, axis=1)

    def value(self, x: ArrayLike, xi: ArrayLike) -> NDArray:
        return self.piece_values(x, xi).max(axis=1)


def newsvendor_loss(h: float, b: float) -> PiecewiseAffineLoss:
    """``h (q - xi)_+ + b (xi - q)_+`` with the order quantity as the only decision."""
    return PiecewiseAffineLoss((
        AffinePiece([[0.0]], [-h], [h], 0.0),
        AffinePiece([[0.0]], [b], [-b], 0.0),
    ))


def mean_cvar_loss(n_assets: int, tau: float, eta: float) -> PiecewiseAffineLoss:
    """Rockafellar-Uryasev form of ``CVaR_tau(-x^T xi) - eta x^T xi`` over ``z = (x, beta)``."""
    if not 0 < tau < 1:
        raise DroError("tau must lie in (0, 1)")
    if eta < 0:
        raise DroError("eta must be nonnegative")
    D = n_assets
    G1 = np.hstack([-eta * np.eye(D), np.zeros((D, 1))])
    G2 = np.hstack([-(1.0 / tau + eta) * np.eye(D), np.zeros((D, 1))])
    h1 = np.r_[np.zeros(D), 1.0]
    h2 = np.r_[np.zeros(D), 1.0 - 1.0 / tau]
    return PiecewiseAffineLoss((AffinePiece(G1, np.zeros(D), h1, 0.0), AffinePiece(G2, np.zeros(D), h2, 0.0)))


@dataclass(frozen=True)
class Polyhedron:
    """``{x : A_ub x <= b_ub, A_eq x = b_eq, lb <= x <= ub}``; infinite bounds allowed."""

    n: int
    A_ub: NDArray = None
    b_ub: NDArray = None
    A_eq: NDArray = None
    b_eq: NDArray = None
    lb: NDArray = None
    ub: NDArray = None

    def __post_init__(self):
        n = int(self.n)

        def block(A, b, name):
            if A is None:
                return np.zeros((0, n)), np.zeros(0)
            A = np.atleast_2d(np.asarray(A, dtype=float))
            b = np.atleast_1d(np.asarray(b, dtype=float))
            if A.shape != (b.size, n):
                raise DroError(f"{name} block has shape {A.shape}, expected ({b.size}, {n})")
            if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
                raise DroError(f"{name} block has non-finite entries")
            return A, b

        A_ub, b_ub = block(self.A_ub, self.b_ub, "inequality")
        A_eq, b_eq = block(self.A_eq, self.b_eq, "equality")
        lb = np.full(n, -np.inf) if self.lb is None else np.broadcast_to(np.asarray(self.lb, float), (n,)).copy()
        ub = np.full(n, np.inf) if self.ub is None else np.broadcast_to(np.asarray(self.ub, float), (n,)).copy()
        for k, v in dict(A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, lb=lb, ub=ub).items():
            object.__setattr__(self, k, v)

    @classmethod
    def free(cls, n: int) -> "Polyhedron":
        return cls(n)

    @classmethod
    def box(cls, n: int, lb=-np.inf, ub=np.inf) -> "Polyhedron":
        return cls(n, lb=lb, ub=ub)

    @classmethod
    def simplex(cls, n: int) -> "Polyhedron":
        return cls(n, A_eq=np.ones((1, n)), b_eq=[1.0], lb=0.0)

    def extend(self, extra: int) -> "Polyhedron":
        """Same set in the first ``n`` coordinates, ``extra`` free trailing variables appended."""
        pad = lambda A: np.hstack([A, np.zeros((A.shape[0], extra))])
        return Polyhedron(self.n + extra, pad(self.A_ub), self.b_ub, pad(self.A_eq), self.b_eq,
                          np.r_[self.lb, np.full(extra, -np.inf)], np.r_[self.ub, np.full(extra, np.inf)])


# ---------------------------------------------------------------------------
# conic programs


@dataclass(frozen=True)
class SocBlock:
    """Cone ``||F[1:] z + f[1:]|| <= F[0] z + f[0]``."""

    F: NDArray
    f: NDArray


@dataclass(frozen=True)
class ConicProgram:
    """``min c^T z`` over linear rows, variable bounds and second-order cones."""

    c: NDArray
    A_eq: NDArray
    b_eq: NDArray
    A_ub: NDArray
    b_ub: NDArray
    lb: NDArray
    ub: NDArray
    cones: tuple[SocBlock, ...] = ()
    layout: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.n_vars
        for A, b in ((self.A_eq, self.b_eq), (self.A_ub, self.b_ub)):
            if A.shape != (b.size, n):
                raise DroError("linear block does not match the variable count")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise DroError("bounds do not match the variable count")
        for cone in self.cones:
            if cone.F.ndim != 2 or cone.F.shape[1] != n or cone.F.shape[0] != cone.f.size or cone.f.size < 1:
                raise DroError("cone block references variables out of range")

    @property
    def n_vars(self) -> int:
        return self.c.size

    def to_dict(self) -> dict:
        inf = lambda v: [None if not np.isfinite(t) else float(t) for t in v]
        return {
            "n_vars": self.n_vars,
            "objective": self.c.tolist(),
            "eq": {"A": self.A_eq.tolist(), "b": self.b_eq.tolist()},
            "ub": {"A": self.A_ub.tolist(), "b": self.b_ub.tolist()},
            "bounds": {"lower": inf(self.lb), "upper": inf(self.ub)},
            "soc": [{"F": c.F.tolist(), "f": c.f.tolist()} for c in self.cones],
            "layout": self.layout,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ConicProgram":
        n = int(d["n_vars"])
        arr = lambda v, shape: np.asarray(v, dtype=float).reshape(shape)
        bound = lambda v, fill: np.array([fill if t is None else t for t in v], dtype=float)
        return cls(
            np.asarray(d["objective"], float),
            arr(d["eq"]["A"], (-1, n)), np.asarray(d["eq"]["b"], float),
            arr(d["ub"]["A"], (-1, n)), np.asarray(d["ub"]["b"], float),
            bound(d["bounds"]["lower"], -np.inf), bound(d["bounds"]["upper"], np.inf),
            tuple(SocBlock(arr(c["F"], (-1, n)), np.asarray(c["f"], float)) for c in d["soc"]),
            d.get("layout", {}),
        )

    def residual(self, z: NDArray) -> float:
        """Largest constraint violation relative to the size of the terms in its row.

        A row ``A z <= b`` is scaled by ``1 + |b| + |A| |z|``; a cone by
        ``1 + |f| + | |F| |z| |``.
        """
        az = np.abs(z)
        worst = 0.0
        if self.b_eq.size:
            scale = 1 + np.abs(self.b_eq) + abs(self.A_eq) @ az
            worst = max(worst, float(np.max(np.abs(self.A_eq @ z - self.b_eq) / scale)))
        if self.b_ub.size:
            scale = 1 + np.abs(self.b_ub) + abs(self.A_ub) @ az
            worst = max(worst, float(np.max(np.maximum(self.A_ub @ z - self.b_ub, 0) / scale)))
        fin = np.isfinite(self.lb)
        if fin.any():
            worst = max(worst, float(np.max(np.maximum(self.lb[fin] - z[fin], 0) / (1 + np.abs(self.lb[fin])))))
        fin = np.isfinite(self.ub)
        if fin.any():
            worst = max(worst, float(np.max(np.maximum(z[fin] - self.ub[fin], 0) / (1 + np.abs(self.ub[fin])))))
        for cone in self.cones:
            v = cone.F @ z + cone.f
            scale = 1 + np.linalg.norm(cone.f) + np.linalg.norm(np.abs(cone.F) @ az)
            worst = max(worst, max(float(np.linalg.norm(v[1:]) - v[0]), 0.0) / scale)
        return worst


def linear_program(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, lb=None, ub=None) -> ConicProgram:
    poly = Polyhedron(len(np.atleast_1d(c)), A_ub, b_ub, A_eq, b_eq, lb, ub)
    return ConicProgram(np.asarray(c, float), poly.A_eq, poly.b_eq, poly.A_ub, poly.b_ub, poly.lb, poly.ub)


@dataclass
class SolveReport:
    status: Status
    x: NDArray | None = field(repr=False)
    objective: float
    gap: float
    residual: float
    iterations: int
    wall_time: float
    backend: str
    message: str = ""
    duals: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _failure(status: Status, backend: str, t0: float, message: str, iterations: int = 0) -> SolveReport:
    return SolveReport(status, None, math.nan, math.nan, math.nan, iterations, time.perf_counter() - t0, backend, message)


def _solve_highs(p: ConicProgram, tol: float) -> SolveReport:
    t0 = time.perf_counter()
    bounds = [(None if not np.isfinite(l) else l, None if not np.isfinite(u) else u) for l, u in zip(p.lb, p.ub)]
    kw = {}
    if p.b_ub.size:
        kw.update(A_ub=p.A_ub, b_ub=p.b_ub)
    if p.b_eq.size:
        kw.update(A_eq=p.A_eq, b_eq=p.b_eq)
    try:
        res = linprog(p.c, bounds=bounds, method="highs",
                      options={"primal_feasibility_tolerance": tol, "dual_feasibility_tolerance": tol}, **kw)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return _failure("numeric-failure", "highs", t0, str(exc))
    iters = int(getattr(res, "nit", 0) or 0)
    if res.status == 2:
        return _failure("infeasible", "highs", t0, res.message, iters)
    if res.status == 3:
        return _failure("unbounded", "highs", t0, res.message, iters)
    if res.status != 0 or res.x is None:
        return _failure("numeric-failure", "highs", t0, res.message, iters)
    z = np.asarray(res.x, dtype=float)
    y_ub = res.ineqlin.marginals if p.b_ub.size else np.zeros(0)
    y_eq = res.eqlin.marginals if p.b_eq.size else np.zeros(0)
    y_lo, y_up = res.lower.marginals, res.upper.marginals
    fl, fu = np.isfinite(p.lb), np.isfinite(p.ub)
    dual = float(p.b_ub @ y_ub + p.b_eq @ y_eq + p.lb[fl] @ y_lo[fl] + p.ub[fu] @ y_up[fu])
    obj = float(p.c @ z)
    gap = abs(obj - dual) / max(1.0, abs(obj))
    resid = p.residual(z)
    status: Status = "optimal" if gap <= ACCEPT_TOL and resid <= ACCEPT_TOL else "numeric-failure"
    return SolveReport(status, z, obj, gap, resid, iters, time.perf_counter() - t0, "highs", res.message,
                       {"ub": np.asarray(y_ub), "eq": np.asarray(y_eq)})


def _solve_clarabel(p: ConicProgram, tol: float, max_iter: int) -> SolveReport:
    import clarabel

    t0 = time.perf_counter()
    n = p.n_vars
    rows, rhs, cones = [], [], []
    if p.b_eq.size:
        rows.append(p.A_eq)
        rhs.append(p.b_eq)
        cones.append(clarabel.ZeroConeT(p.b_eq.size))
    lo, hi = np.flatnonzero(np.isfinite(p.lb)), np.flatnonzero(np.isfinite(p.ub))
    eye = np.eye(n)
    lin_A = [p.A_ub, -eye[lo], eye[hi]]
    lin_b = [p.b_ub, -p.lb[lo], p.ub[hi]]
    n_lin = sum(b.size for b in lin_b)
    if n_lin:
        rows.extend(lin_A)
        rhs.extend(lin_b)
        cones.append(clarabel.NonnegativeConeT(n_lin))
    for cone in p.cones:
        rows.append(-cone.F)
        rhs.append(cone.f)
        cones.append(clarabel.SecondOrderConeT(cone.f.size))
    A = sp.csc_matrix(np.vstack(rows) if rows else np.zeros((0, n)))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.max_iter = max_iter
    try:
        solver = clarabel.DefaultSolver(sp.csc_matrix((n, n)), np.asarray(p.c, float), A, b, cones, settings)
        sol = solver.solve()
    except Exception as exc:  # the extension raises its own error types
        return _failure("numeric-failure", "clarabel", t0, str(exc))
    status = str(sol.status)
    iters = int(sol.iterations)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return _failure("infeasible", "clarabel", t0, status, iters)
    if status in ("DualInfeasible", "AlmostDualInfeasible"):
        return _failure("unbounded", "clarabel", t0, status, iters)
    z = np.asarray(sol.x, dtype=float)
    if not np.all(np.isfinite(z)):
        return _failure("numeric-failure", "clarabel", t0, status, iters)
    obj = float(p.c @ z)
    gap = abs(obj - float(sol.obj_val_dual)) / max(1.0, abs(obj))
    resid = p.residual(z)
    ok = status in ("Solved", "AlmostSolved") and gap <= ACCEPT_TOL and resid <= ACCEPT_TOL
    return SolveReport("optimal" if ok else "numeric-failure", z, obj, gap, resid, iters,
                       time.perf_counter() - t0, "clarabel", status, {"conic": -np.asarray(sol.z, dtype=float)})


def solve_conic(p: ConicProgram, backend: str = "auto", tol: float = DEFAULT_TOL, max_iter: int = 200) -> SolveReport:
    """Solve a conic program and check the answer.

    ``backend`` is ``"highs"`` (LPs only), ``"clarabel"`` or ``"auto"``,
    which picks HiGHS when there are no cones. A report is ``optimal`` only
    if the relative duality gap and the scaled primal residual are at most
    ``1e-7``; anything else is ``numeric-failure``.
    """
    if backend == "auto":
        backend = "clarabel" if p.cones else "highs"
    if backend == "highs":
        if p.cones:
            raise DroError("the HiGHS back end cannot handle cone constraints")
        return _solve_highs(p, tol)
    if backend == "clarabel":
        return _solve_clarabel(p, tol, max_iter)
    raise DroError(f"unknown back end {backend!r}")


# ---------------------------------------------------------------------------
# program builders


def _check_samples(loss: PiecewiseAffineLoss, X: Polyhedron, samples: ArrayLike) -> NDArray:
    S = np.asarray(samples, dtype=float)
    if S.ndim == 1:
        S = S.reshape(-1, 1) if loss.r_dims == 1 else S.reshape(1, -1)
    if S.shape[0] == 0:
        raise DroError("at least one sample is required")
    if S.shape[1] != loss.r_dims:
        raise DroError(f"samples have {S.shape[1]} columns, loss expects {loss.r_dims}")
    if X.n != loss.n_decisions:
        raise DroError(f"feasible set has {X.n} variables, loss expects {loss.n_decisions}")
    if not np.all(np.isfinite(S)):
        raise DroError("samples contain non-finite values")
    return S


def shift_loss(loss: PiecewiseAffineLoss, center: ArrayLike, scale: float = 1.0) -> PiecewiseAffineLoss:
    """Same loss written in ``zeta`` where ``xi = center + scale * zeta``."""
    c = np.asarray(center, dtype=float).ravel()
    return PiecewiseAffineLoss(tuple(
        AffinePiece(scale * p.G, scale * p.g, p.h + p.G.T @ c, p.h0 + p.g @ c) for p in loss.pieces
    ))


def build_dro_socp(loss: PiecewiseAffineLoss, X: Polyhedron, samples: ArrayLike, eps: float,
                   center: ArrayLike | None = None, scale: float = 1.0,
                   form: Literal["displayed", "balanced"] = "displayed", kappa: float | None = None) -> ConicProgram:
    """Worst-case expected loss over a type-2 Wasserstein ball as an SOCP.

    Variables are laid out as ``[x (n), lam, gam (M)]``; the objective is
    ``eps^2 lam + mean(gam)``. Pieces are iterated outer, samples inner:
    cone ``j*M + m`` reads

        || [2 lam xi_m + a_j(x); lam |xi_m|^2 + gam_m - b_j(x) - lam] ||
            <= lam |xi_m|^2 + gam_m - b_j(x) + lam

    and the matching linear row is ``lam |xi_m|^2 + gam_m >= b_j(x)``.

    A ball of radius ``eps`` around the samples maps to a ball of radius
    ``eps / scale`` around ``(xi - center) / scale``, so passing ``center``
    and ``scale`` builds the same program in standardized outcomes (with
    ``lam`` rescaled accordingly). The optimal value is unchanged and the
    conic data are far better conditioned when outcomes sit away from the
    origin or spread widely.

    ``form="balanced"`` keeps the same variables and the same feasible set
    but writes each cone as

        || [a_j(x); kappa lam - v / kappa] || <= kappa lam + v / kappa,
        v = gam_m - b_j(x) - a_j(x)^T xi_m,

    with linear row ``v >= 0``. Both forms say ``|a|^2 <= 4 lam v``; the
    displayed one carries ``lam |xi_m|^2`` terms that are about
    ``spread / eps`` times the objective and lose digits to cancellation,
    while ``kappa = eps`` (the default) keeps both sides of the balanced
    cone comparable.
    """
    if form not in ("displayed", "balanced"):
        raise DroError(f"unknown cone form {form!r}")
    if eps < 0 or not math.isfinite(eps):
        raise DroError("radius must be finite and nonnegative")
    if not scale > 0:
        raise DroError("scale must be positive")
    S = _check_samples(loss, X, samples)
    if center is not None or scale != 1.0:
        center = np.zeros(S.shape[1]) if center is None else np.asarray(center, dtype=float).ravel()
        if center.size != S.shape[1]:
            raise DroError("center has the wrong dimension")
        loss, S, eps = shift_loss(loss, center, scale), (S - center) / scale, eps / scale
    M, R = S.shape
    n = X.n
    nv = n + 1 + M
    il = n
    c = np.zeros(nv)
    c[il] = eps * eps
    c[n + 1:] = 1.0 / M
    sq = np.sum(S * S, axis=1)
    if kappa is None:
        kappa = eps if eps > 0 else 1e-3
    if not kappa > 0:
        raise DroError("kappa must be positive")
    cones, ub_rows, ub_rhs = [], [], []
    for p in loss.pieces:
        for m in range(M):
            ig = n + 1 + m
            if form == "balanced":
                # v = gam - b(x) - a(x)^T xi
                V = np.zeros(nv)
                V[:n] = -p.h - S[m] @ p.G
                V[ig] = 1.0
                V0 = -p.h0 - S[m] @ p.g
                F = np.zeros((R + 2, nv))
                f = np.zeros(R + 2)
                F[0] = V / kappa
                F[0, il] += kappa
                f[0] = V0 / kappa
                F[1:R + 1, :n] = p.G
                f[1:R + 1] = p.g
                F[R + 1] = -V / kappa
                F[R + 1, il] += kappa
                f[R + 1] = -V0 / kappa
                cones.append(SocBlock(F, f))
                ub_rows.append(-V)
                ub_rhs.append(V0)
                continue
            # base row T = lam |xi|^2 + gam - b(x), as coefficients and offset
            T = np.zeros(nv)
            T[:n] = -p.h
            T[il] = sq[m]
            T[ig] = 1.0
            T0 = -p.h0
            F = np.zeros((R + 2, nv))
            f = np.zeros(R + 2)
            F[0] = T
            F[0, il] += 1.0
            f[0] = T0
            F[1:R + 1, :n] = p.G
            F[1:R + 1, il] = 2.0 * S[m]
            f[1:R + 1] = p.g
            F[R + 1] = T
            F[R + 1, il] -= 1.0
            f[R + 1] = T0
            cones.append(SocBlock(F, f))
            ub_rows.append(-T)
            ub_rhs.append(T0)
    Xp = X.extend(1 + M)
    lb = Xp.lb.copy()
    lb[il] = 0.0
    A_ub = np.vstack([Xp.A_ub, np.array(ub_rows)])
    b_ub = np.concatenate([Xp.b_ub, np.array(ub_rhs)])
    layout = {"x": [0, n], "lambda": il, "gamma": [n + 1, nv], "pieces": len(loss.pieces), "samples": M,
              "center": None if center is None else center.tolist(), "scale": float(scale),
              "form": form, "kappa": float(kappa)}
    return ConicProgram(c, Xp.A_eq, Xp.b_eq, A_ub, b_ub, lb, Xp.ub, tuple(cones), layout)


def build_weighted_lp(loss: PiecewiseAffineLoss, X: Polyhedron, samples: ArrayLike, weights: ArrayLike) -> ConicProgram:
    """Epigraph LP for ``min_x sum_m w_m max_j a_j(x)^T xi_m + b_j(x)``; layout ``[x, t (M)]``."""
    S = _check_samples(loss, X, samples)
    M = S.shape[0]
    w = np.asarray(weights, dtype=float).ravel()
    if w.size != M or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DroError("weights must be finite, nonnegative and match the samples")
    n = X.n
    c = np.r_[np.zeros(n), w]
    rows, rhs = [], []
    for p in loss.pieces:
        # a_j(x)^T xi + b_j(x) - t_m <= 0
        coef = S @ p.G + p.h
        block = np.hstack([coef, -np.eye(M)])
        rows.append(block)
        rhs.append(-(S @ p.g + p.h0))
    Xp = X.extend(M)
    A_ub = np.vstack([Xp.A_ub, *rows])
    b_ub = np.concatenate([Xp.b_ub, *rhs])
    return ConicProgram(c, Xp.A_eq, Xp.b_eq, A_ub, b_ub, Xp.lb, Xp.ub, (), {"x": [0, n], "t": [n, n + M]})


def saa_solve(loss: PiecewiseAffineLoss, X: Polyhedron, samples: ArrayLike, backend: str = "auto",
              tol: float = DEFAULT_TOL) -> SolveReport:
    S = _check_samples(loss, X, samples)
    return solve_conic(build_weighted_lp(loss, X, S, np.full(S.shape[0], 1.0 / S.shape[0])), backend, tol)


def weighted_solve(loss: PiecewiseAffineLoss, X: Polyhedron, samples: ArrayLike, weights: ArrayLike,
                   backend: str = "auto", tol: float = DEFAULT_TOL) -> SolveReport:
    return solve_conic(build_weighted_lp(loss, X, samples, weights), backend, tol)


def _zero_radius_check(rep: SolveReport, lp: SolveReport) -> SolveReport:
    """Keep the conic answer at ``eps = 0`` only if it reaches the SAA value it converges to."""
    if rep.ok and lp.ok and rep.objective - lp.objective <= ACCEPT_TOL * max(1.0, abs(lp.objective)):
        return rep
    if not lp.ok:
        return rep
    lp.message = f"SAA fallback after conic status {rep.message or rep.status}"
    return lp


_KAPPA_RETRIES = (1.0, 3.0, 0.3)


def _solve_balanced(build, eps: float, tol: float) -> SolveReport:
    """Solve ``build(kappa)`` with Clarabel, rescaling ``kappa`` after a numeric failure.

    Every ``kappa`` gives the same feasible set; only the conditioning of the
    cones changes, and an interior point run that stalls at reduced accuracy
    for one scaling usually converges for another.
    """
    k0 = eps if eps > 0 else 1e-3
    for m in _KAPPA_RETRIES:
        rep = solve_conic(build(k0 * m), "clarabel", tol)
        if rep.status != "numeric-failure":
            break
    return rep


def dro_solve(loss: PiecewiseAffineLoss, X: Polyhedron, samples: ArrayLike, eps: float,
              tol: float = DEFAULT_TOL, fallback: bool = True, center: bool = True) -> SolveReport:
    """Solve the Wasserstein DRO program in the balanced cone form.

    Samples are translated to their mean unless ``center`` is false. At
    ``eps = 0`` the multiplier ``lam`` has no cost and its optimum is at
    infinity, so the interior point answer only approaches the SAA value
    from above. With ``fallback`` the SAA LP is solved as well and replaces
    the conic answer when that one is uncertified or sits above it by more
    than the acceptance tolerance (``report.message`` says so).
    """
    S = _check_samples(loss, X, samples)
    c = S.mean(axis=0) if center else None
    rep = _solve_balanced(lambda k: build_dro_socp(loss, X, S, eps, c, form="balanced", kappa=k), eps, tol)
    if not fallback or eps > 0:
        return rep
    return _zero_radius_check(rep, saa_solve(loss, X, S, tol=tol))


def decision(rep: SolveReport, n: int) -> NDArray:
    if rep.x is None:
        raise DroError(f"no solution available (status {rep.status})")
    return rep.x[:n].copy()


# ---------------------------------------------------------------------------
# newsvendor


def build_newsvendor_socp(samples: ArrayLike, h: float, b: float, eps: float,
                          form: Literal["displayed", "balanced"] = "displayed", kappa: float | None = None) -> ConicProgram:
    """Two cones per demand sample with a shared support multiplier ``theta`` for ``omega >= 0``.

    Variable layout ``[q, lam, theta, s (M)]``. The holding piece has slope
    ``a = -h`` and intercept ``h q``, the backorder piece ``a = b`` and
    ``-b q``; ``theta`` enters every cone as ``a + theta``. The balanced
    form rewrites each cone as in :func:`build_dro_socp`, with
    ``v = s_m - b_j(q) - (a_j + theta) xi_m``.
    """
    if h <= 0 or b <= 0:
        raise DroError("holding and backorder costs must be positive")
    if eps < 0:
        raise DroError("radius must be nonnegative")
    if form not in ("displayed", "balanced"):
        raise DroError(f"unknown cone form {form!r}")
    xi = np.asarray(samples, dtype=float).ravel()
    M = xi.size
    if M == 0:
        raise DroError("at least one sample is required")
    if kappa is None:
        kappa = eps if eps > 0 else 1e-3
    nv = 3 + M
    iq, il, it = 0, 1, 2
    c = np.zeros(nv)
    c[il] = eps * eps
    c[3:] = 1.0 / M
    cones, rows, rhs = [], [], []
    for sign, cost in ((-1.0, h), (1.0, b)):
        # piece: a = sign*cost, intercept -sign*cost*q
        for m in range(M):
            F = np.zeros((3, nv))
            f = np.zeros(3)
            if form == "balanced":
                V = np.zeros(nv)
                V[iq] = sign * cost
                V[it] = -xi[m]
                V[3 + m] = 1.0
                V0 = -sign * cost * xi[m]
                F[0] = V / kappa
                F[0, il] += kappa
                f[0] = V0 / kappa
                F[1, it] = 1.0
                f[1] = sign * cost
                F[2] = -V / kappa
                F[2, il] += kappa
                f[2] = -V0 / kappa
                cones.append(SocBlock(F, f))
                rows.append(-V)
                rhs.append(V0)
                continue
            T = np.zeros(nv)
            T[il] = xi[m] ** 2
            T[iq] = sign * cost
            T[3 + m] = 1.0
            F[0] = T
            F[0, il] += 1.0
            F[1, il] = 2.0 * xi[m]
            F[1, it] = 1.0
            f[1] = sign * cost
            F[2] = T
            F[2, il] -= 1.0
            cones.append(SocBlock(F, f))
            rows.append(-T)
            rhs.append(0.0)
    lb = np.full(nv, -np.inf)
    lb[[iq, il, it]] = 0.0
    layout = {"q": iq, "lambda": il, "theta": it, "s": [3, nv], "form": form, "kappa": float(kappa)}
    return ConicProgram(c, np.zeros((0, nv)), np.zeros(0), np.array(rows), np.array(rhs), lb,
                        np.full(nv, np.inf), tuple(cones), layout)


def newsvendor_dro(samples: ArrayLike, h: float, b: float, eps: float, tol: float = DEFAULT_TOL) -> tuple[float, SolveReport]:
    """Robust order quantity for demand samples; returns ``(q, report)``.

    Solved in the balanced cone form, retried at a rescaled ``kappa`` if the
    solver stalls. At ``eps = 0`` the answer is checked
    against the SAA LP with ``q >= 0`` as in :func:`dro_solve`.
    """
    xi = np.asarray(samples, dtype=float).ravel()
    rep = _solve_balanced(lambda k: build_newsvendor_socp(xi, h, b, eps, form="balanced", kappa=k), eps, tol)
    if eps == 0:
        rep = _zero_radius_check(rep, saa_solve(newsvendor_loss(h, b), Polyhedron.box(1, lb=0.0), xi, tol=tol))
    return float(decision(rep, 1)[0]), rep


def newsvendor_fractile(samples: ArrayLike, h: float, b: float) -> float:
    """Smallest sample whose empirical CDF reaches ``b/(b+h)``."""
    xi = np.sort(np.asarray(samples, dtype=float).ravel())
    k = int(math.ceil(b / (b + h) * xi.size - 1e-12))
    return float(xi[max(k, 1) - 1])


# ---------------------------------------------------------------------------
# portfolio


@dataclass(frozen=True)
class PortfolioSolution:
    weights: NDArray
    beta: float
    report: SolveReport


def portfolio_dro(samples: ArrayLike, tau: float, eta: float, eps: float, tol: float = DEFAULT_TOL) -> PortfolioSolution:
    """Long-only fully invested mean-CVaR portfolio under a Wasserstein ball.

    Minimizes ``CVaR_tau(-x^T xi) - eta E[x^T xi]`` over the simplex,
    written as the two-piece loss over ``(x, beta)``.
    """
    R = np.atleast_2d(np.asarray(samples, dtype=float))
    D = R.shape[1]
    loss = mean_cvar_loss(D, tau, eta)
    X = Polyhedron(D + 1, A_eq=np.r_[np.ones(D), 0.0].reshape(1, -1), b_eq=[1.0],
                   lb=np.r_[np.zeros(D), -np.inf])
    rep = dro_solve(loss, X, R, eps, tol)
    z = decision(rep, D + 1)
    w = np.maximum(z[:D], 0.0)
    return PortfolioSolution(w / w.sum(), float(z[D]), rep)


def mean_cvar_objective(x: ArrayLike, returns: ArrayLike, tau: float, eta: float) -> float:
    """Empirical ``CVaR_tau(-x^T xi) - eta * mean(x^T xi)`` with the sample CVaR from the LP formula."""
    r = np.atleast_2d(np.asarray(returns, float)) @ np.asarray(x, float)
    loss = -r
    # CVaR = min_beta beta + mean((loss - beta)_+) / tau; the minimum is attained at a sample
    cands = np.sort(loss)
    vals = cands + np.maximum(loss[None, :] - cands[:, None], 0).mean(axis=1) / tau
    return float(vals.min() - eta * r.mean())
