"""Density-ratio weights, observational solves and Markovian multistage programs.

A fitted joint mixture over (covariate, outcome) turns historical outcomes
into a weighted sample for a new covariate without drawing anything:
``w_n = f(s | xi_n) / (f(s) N)``. Applied to consecutive stages of a
trajectory set the same ratios act as transition probabilities between
sample nodes, which drives both the exhaustive ``dp_solve`` and the
cut-based ``sddp_solve``.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from .dro import (
    DEFAULT_TOL,
    ConicProgram,
    PiecewiseAffineLoss,
    Polyhedron,
    SolveReport,
    build_weighted_lp,
    solve_conic,
)
from .gmm import GaussianMixture, Partition, conditional_log_density, log_pdf, marginal, sample
from .transport import discrete_ot


class MultistageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# weighted samples


@dataclass(frozen=True)
class WeightedSample:
    points: NDArray
    weights: NDArray
    normalized: bool = False

    def __post_init__(self):
        P = np.asarray(self.points, dtype=float)
        if P.ndim == 1:
            P = P[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size != P.shape[0]:
            raise MultistageError("one weight per point is required")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise MultistageError("weights must be finite and nonnegative")
        if self.normalized and abs(w.sum() - 1.0) > 1e-10:
            raise MultistageError("normalized weights must sum to one")
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "weights", w)

    def normalize(self) -> "WeightedSample":
        total = self.weights.sum()
        if total <= 0:
            raise MultistageError("cannot normalize all-zero weights")
        return WeightedSample(self.points, self.weights / total, True)

    @property
    def n(self) -> int:
        return self.points.shape[0]


def log_density_ratios(m: GaussianMixture, part: Partition, s: ArrayLike, outcomes: ArrayLike) -> NDArray:
    """``log f(s | xi_n) - log f(s)`` for each outcome row."""
    if m.dim != part.dim:
        raise MultistageError(f"mixture dimension {m.dim} != partition dimension {part.dim}")
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if s.size != part.q_dims:
        raise MultistageError(f"covariate has {s.size} entries, expected {part.q_dims}")
    X = np.asarray(outcomes, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, part.r_dims)
    if X.shape[0] == 0 or X.shape[1] != part.r_dims:
        raise MultistageError("outcomes must be a nonempty N x R matrix")
    cond = conditional_log_density(m, part.s_idx, part.xi_idx, s, X)
    # the marginal goes through the same code path with nothing to condition on
    marg = conditional_log_density(m, part.s_idx, [], s, np.zeros((1, 0)))[0]
    return cond - marg


def density_ratio_weights(m: GaussianMixture, part: Partition, s: ArrayLike, outcomes: ArrayLike) -> WeightedSample:
    """Raw observational weights ``f(s | xi_n) / (f(s) N)``; use ``.normalize()`` for a probability vector."""
    lr = log_density_ratios(m, part, s, outcomes)
    X = np.asarray(outcomes, dtype=float).reshape(lr.size, -1)
    return WeightedSample(X, np.exp(lr) / lr.size)


def normalized_ratio_weights(m: GaussianMixture, part: Partition, s: ArrayLike, outcomes: ArrayLike) -> WeightedSample:
    lr = log_density_ratios(m, part, s, outcomes)
    w = np.exp(lr - logsumexp(lr))
    X = np.asarray(outcomes, dtype=float).reshape(lr.size, -1)
    return WeightedSample(X, w / w.sum(), True)


def weighted_objective(loss: PiecewiseAffineLoss, x: ArrayLike, ws: WeightedSample) -> float:
    return float(ws.weights @ loss.value(x, ws.points))


def observational_solve(loss: PiecewiseAffineLoss, X: Polyhedron, ws: WeightedSample,
                        backend: str = "auto") -> SolveReport:
    """``min_x sum_n w_n loss(x, xi_n)`` as an epigraph LP, with the weights exactly as given."""
    return solve_conic(build_weighted_lp(loss, X, ws.points, ws.weights), backend)


def transition_weights(joint: GaussianMixture, current: ArrayLike, next_samples: ArrayLike) -> WeightedSample:
    """Raw ratios ``f(xi_t | xi_{t+1,n}) / (f(xi_t) N)`` from a mixture over ``(xi_t, xi_{t+1})``."""
    if joint.dim % 2:
        raise MultistageError("joint mixture must cover two stages of equal dimension")
    q = joint.dim // 2
    return density_ratio_weights(joint, Partition(q, q), current, next_samples)


def empirical_measure_radius(ws: WeightedSample, cond: GaussianMixture, m_draws: int, mixture_eps: float = 0.0,
                             concentration_term: float = 0.0, seed=None) -> float:
    """Radius covering the weighted empirical measure around the conditional mixture.

    The transport term is the W2 distance between the normalized weighted
    sample and ``m_draws`` fresh draws from ``cond`` (an OT LP with squared
    Euclidean cost). The sampling-concentration term has no closed form
    constant and is supplied by the caller, as is ``mixture_eps``, the
    radius between the true and estimated conditional mixtures.
    """
    if m_draws < 1:
        raise MultistageError("m_draws must be positive")
    if not ws.normalized:
        raise MultistageError("the weighted sample must be normalized")
    if min(mixture_eps, concentration_term) < 0:
        raise MultistageError("radius terms must be nonnegative")
    draws = sample(cond, m_draws, seed)
    return transport_term(ws, draws) + concentration_term + mixture_eps


def transport_term(ws: WeightedSample, draws: ArrayLike) -> float:
    D = np.atleast_2d(np.asarray(draws, dtype=float))
    cost = np.sum((ws.points[:, None, :] - D[None, :, :]) ** 2, axis=2)
    val = discrete_ot(cost, ws.weights, np.full(D.shape[0], 1.0 / D.shape[0])).value
    return math.sqrt(max(val, 0.0))


def stage_radii(eps: float | ArrayLike, horizon: int, eta: float = 1.0) -> NDArray:
    """Per-stage ambiguity radii: a scalar is broadcast, a vector must have one entry per stage.

    ``eta`` multiplies the whole radius.
    """
    e = np.broadcast_to(np.asarray(eps, dtype=float), (horizon,)).copy() if np.ndim(eps) == 0 else np.asarray(eps, float)
    if e.shape != (horizon,):
        raise MultistageError(f"need {horizon} radii, got {e.size}")
    if np.any(e < 0) or eta < 0:
        raise MultistageError("radii must be nonnegative")
    return eta * e


# ---------------------------------------------------------------------------
# stage problems


@dataclass(frozen=True)
class StageProblem:
    """``min c^T x`` s.t. ``A_ub x <= b_ub + B_ub x_prev + E_ub xi``, same for equalities, ``lb <= x <= ub``."""

    c: NDArray
    n_prev: int
    q_dims: int
    A_ub: NDArray | None = None
    b_ub: NDArray | None = None
    B_ub: NDArray | None = None
    E_ub: NDArray | None = None
    A_eq: NDArray | None = None
    b_eq: NDArray | None = None
    B_eq: NDArray | None = None
    E_eq: NDArray | None = None
    lb: NDArray | None = None
    ub: NDArray | None = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        n = c.size
        object.__setattr__(self, "c", c)
        for suffix in ("ub", "eq"):
            A = getattr(self, f"A_{suffix}")
            if A is None:
                rows = 0
                A = np.zeros((0, n))
            else:
                A = np.atleast_2d(np.asarray(A, dtype=float))
                rows = A.shape[0]
            if A.shape != (rows, n):
                raise MultistageError(f"A_{suffix} has shape {A.shape}, expected (*, {n})")

            def fill(name, shape):
                v = getattr(self, name)
                v = np.zeros(shape) if v is None else np.asarray(v, dtype=float).reshape(shape)
                object.__setattr__(self, name, v)

            object.__setattr__(self, f"A_{suffix}", A)
            fill(f"b_{suffix}", (rows,))
            fill(f"B_{suffix}", (rows, self.n_prev))
            fill(f"E_{suffix}", (rows, self.q_dims))
        lb = np.zeros(n) if self.lb is None else np.broadcast_to(np.asarray(self.lb, float), (n,)).copy()
        ub = np.full(n, np.inf) if self.ub is None else np.broadcast_to(np.asarray(self.ub, float), (n,)).copy()
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def n(self) -> int:
        return self.c.size

    def rhs(self, x_prev: NDArray, xi: NDArray) -> tuple[NDArray, NDArray]:
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        return (self.b_ub + self.B_ub @ x_prev + self.E_ub @ xi,
                self.b_eq + self.B_eq @ x_prev + self.E_eq @ xi)


@dataclass(frozen=True)
class MultistageProblem:
    """Stages ``1..T`` plus ``N`` sample trajectories of shape ``(N, T, Q)``.

    Stage 1 is solved at ``(x0, xi1)``; stage ``t > 1`` nodes are the
    trajectory values at that stage. ``value_lb`` is a valid lower bound
    on every cost-to-go, used to keep cut models bounded.
    """

    stages: tuple[StageProblem, ...]
    trajectories: NDArray
    x0: NDArray
    xi1: NDArray
    value_lb: float = -1e6

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise MultistageError("horizon must be at least 1")
        Tr = np.asarray(self.trajectories, dtype=float)
        if Tr.ndim == 2:
            Tr = Tr[:, :, None]
        T = len(stages)
        if Tr.ndim != 3 or Tr.shape[1] != T or Tr.shape[0] < 1:
            raise MultistageError(f"trajectories must be (N, {T}, Q)")
        q = Tr.shape[2]
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        xi1 = np.atleast_1d(np.asarray(self.xi1, dtype=float))
        if xi1.size != q:
            raise MultistageError("xi1 has the wrong dimension")
        prev = x0.size
        for t, st in enumerate(stages):
            if st.n_prev != prev or st.q_dims != q:
                raise MultistageError(f"stage {t + 1} does not chain with its predecessor")
            prev = st.n
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "trajectories", Tr)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "xi1", xi1)

    @property
    def horizon(self) -> int:
        return len(self.stages)

    @property
    def n_traj(self) -> int:
        return self.trajectories.shape[0]

    @property
    def q_dims(self) -> int:
        return self.trajectories.shape[2]


def read_trajectories(path: str | Path) -> NDArray:
    """CSV with columns ``trajectory, stage, v0, v1, ...``; returns ``(N, T, Q)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MultistageError("empty trajectory file")
    body = rows[1:]
    ids = sorted({int(r[0]) for r in body})
    stages = sorted({int(r[1]) for r in body})
    q = len(rows[0]) - 2
    out = np.full((len(ids), len(stages), q), np.nan)
    pos_i = {v: i for i, v in enumerate(ids)}
    pos_t = {v: i for i, v in enumerate(stages)}
    for r in body:
        out[pos_i[int(r[0])], pos_t[int(r[1])]] = [float(v) for v in r[2:]]
    if np.isnan(out).any():
        raise MultistageError("trajectories are not all full length")
    return out


def write_trajectories(traj: ArrayLike, path: str | Path) -> None:
    Tr = np.asarray(traj, dtype=float)
    if Tr.ndim == 2:
        Tr = Tr[:, :, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "stage"] + [f"xi{j}" for j in range(Tr.shape[2])])
        for i in range(Tr.shape[0]):
            for t in range(Tr.shape[1]):
                w.writerow([i, t + 1] + [repr(float(v)) for v in Tr[i, t]])


# ---------------------------------------------------------------------------
# transitions


class TransitionModel:
    """Normalized transition probabilities from a stage value to the next stage's sample nodes.

    ``joints`` is ``None`` (stagewise independent: uniform weights), one
    mixture over ``(xi_t, xi_{t+1})`` shared by all stages, or a list with
    one mixture per transition ``t -> t+1``.
    """

    def __init__(self, trajectories: NDArray, joints=None):
        self.trajectories = np.asarray(trajectories, dtype=float)
        T = self.trajectories.shape[1]
        if joints is None:
            self.joints = [None] * max(T - 1, 0)
        elif isinstance(joints, GaussianMixture):
            self.joints = [joints] * max(T - 1, 0)
        else:
            self.joints = list(joints)
            if len(self.joints) != T - 1:
                raise MultistageError(f"need {T - 1} transition mixtures, got {len(self.joints)}")
        q = self.trajectories.shape[2]
        for j in self.joints:
            if j is not None and j.dim != 2 * q:
                raise MultistageError("transition mixture dimension must be twice the stage dimension")
        self._cache: dict[tuple[int, int], NDArray] = {}

    @property
    def independent(self) -> bool:
        return all(j is None for j in self.joints)

    def weights(self, t: int, xi: ArrayLike) -> NDArray:
        """Probabilities over the ``N`` nodes of stage ``t + 1`` (0-based ``t``) given stage-``t`` value ``xi``."""
        N = self.trajectories.shape[0]
        joint = self.joints[t]
        if joint is None:
            return np.full(N, 1.0 / N)
        q = self.trajectories.shape[2]
        lr = log_density_ratios(joint, Partition(q, q), xi, self.trajectories[:, t + 1])
        w = np.exp(lr - logsumexp(lr))
        return w / w.sum()

    def weights_at(self, t: int, values: ArrayLike) -> NDArray:
        """Row ``i`` holds ``weights(t, values[i])``; one vectorized density pass for all rows.

        Uses ``log f(s | xi_j) - log f(s) = log f(s, xi_j) - log f(xi_j) - log f(s)``
        and drops the last term, which the normalization cancels.
        """
        N, _, q = self.trajectories.shape
        V = np.asarray(values, dtype=float).reshape(-1, q)
        joint = self.joints[t]
        if joint is None:
            return np.full((V.shape[0], N), 1.0 / N)
        nxt = self.trajectories[:, t + 1]
        pairs = np.hstack([np.repeat(V, N, axis=0), np.tile(nxt, (V.shape[0], 1))])
        lr = log_pdf(joint, pairs).reshape(V.shape[0], N) - log_pdf(marginal(joint, range(q, 2 * q)), nxt)
        w = np.exp(lr - logsumexp(lr, axis=1, keepdims=True))
        return w / w.sum(axis=1, keepdims=True)

    def node_weights(self, t: int, i: int) -> NDArray:
        """Weights out of in-sample node ``i`` of stage ``t`` (cached)."""
        key = (t, i)
        if key not in self._cache:
            self._cache[key] = self.weights(t, self.trajectories[i, t])
        return self._cache[key]


# ---------------------------------------------------------------------------
# exhaustive recursion on the scenario tree


@dataclass
class DpResult:
    value: float
    x1: NDArray
    n_nodes: int
    report: SolveReport


def dp_solve(prob: MultistageProblem, joints=None, max_nodes: int = 200_000, prune: float = 0.0) -> DpResult:
    """Exact value of the weighted recursion over the sample support.

    Cost-to-go functions depend on the incoming state, so exactness needs
    every path, i.e. a scenario tree with ``N^(t-1)`` nodes at stage
    ``t``. The whole tree is written as one extensive-form LP. Branches
    with transition weight ``<= prune`` are dropped (default: only exact
    zeros).
    """
    trans = TransitionModel(prob.trajectories, joints)
    T = prob.horizon
    # nodes: (stage, sample index or -1 for the root, parent id, probability)
    nodes = [(0, -1, -1, 1.0)]
    layer = [0]
    for t in range(1, T):
        nxt = []
        for nid in layer:
            st, idx, _, prob_ = nodes[nid]
            w = trans.weights(0, prob.xi1) if idx < 0 else trans.node_weights(st, idx)
            for j in np.flatnonzero(w > prune):
                nodes.append((t, int(j), nid, prob_ * float(w[j])))
                nxt.append(len(nodes) - 1)
            if len(nodes) > max_nodes:
                raise MultistageError(f"scenario tree exceeds {max_nodes} nodes; use sddp_solve")
        layer = nxt
    offsets = np.zeros(len(nodes) + 1, dtype=int)
    for k, (t, *_rest) in enumerate(nodes):
        offsets[k + 1] = offsets[k] + prob.stages[t].n
    nv = int(offsets[-1])
    c = np.zeros(nv)
    lb = np.empty(nv)
    ub = np.empty(nv)
    ub_blocks, ub_rhs, eq_blocks, eq_rhs = [], [], [], []
    for k, (t, idx, parent, pr) in enumerate(nodes):
        st = prob.stages[t]
        sl = slice(offsets[k], offsets[k + 1])
        c[sl] = pr * st.c
        lb[sl], ub[sl] = st.lb, st.ub
        xi = prob.xi1 if idx < 0 else prob.trajectories[idx, t]
        x_prev = prob.x0 if parent < 0 else None
        for A, b, B, E, blocks, rhs in ((st.A_ub, st.b_ub, st.B_ub, st.E_ub, ub_blocks, ub_rhs),
                                        (st.A_eq, st.b_eq, st.B_eq, st.E_eq, eq_blocks, eq_rhs)):
            if not A.shape[0]:
                continue
            row = sp.lil_matrix((A.shape[0], nv))
            row[:, sl] = A
            r = b + E @ xi
            if parent < 0:
                r = r + B @ x_prev
            else:
                row[:, offsets[parent]:offsets[parent + 1]] = -B
            blocks.append(row.tocsr())
            rhs.append(r)
    stack = lambda blocks: sp.vstack(blocks, format="csr") if blocks else sp.csr_matrix((0, nv))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
    lp = ConicProgram(c, stack(eq_blocks), cat(eq_rhs), stack(ub_blocks), cat(ub_rhs), lb, ub)
    rep = solve_conic(lp, "highs", tol=1e-10)
    if rep.status == "infeasible":
        raise MultistageError("a stage problem is infeasible (no relatively complete recourse)")
    if not rep.ok:
        raise MultistageError(f"extensive form solve failed: {rep.status} {rep.message}")
    return DpResult(rep.objective, rep.x[:prob.stages[0].n].copy(), len(nodes), rep)


# ---------------------------------------------------------------------------
# SDDP


@dataclass
class CutPool:
    """Per stage: cuts ``theta_j >= alpha + beta^T x`` on the next stage's cost-to-go at node ``j``."""

    n_nodes: int
    dims: int
    cap: int = 2000
    node: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    beta: list = field(default_factory=list)

    def add(self, j: int, a: float, b: NDArray) -> None:
        self.node.append(int(j))
        self.alpha.append(float(a))
        self.beta.append(np.asarray(b, dtype=float).copy())
        if len(self.node) > self.cap:
            excess = len(self.node) - self.cap
            del self.node[:excess], self.alpha[:excess], self.beta[:excess]

    def __len__(self) -> int:
        return len(self.node)

    def evaluate(self, j: int, x: NDArray, floor: float) -> float:
        vals = [a + b @ x for n, a, b in zip(self.node, self.alpha, self.beta) if n == j]
        return max([floor] + vals)

    def to_dict(self) -> dict:
        return {"node": self.node, "alpha": self.alpha, "beta": [b.tolist() for b in self.beta]}


class _StageSolver:
    """Persistent HiGHS model for one stage: the matrix is fixed, costs and row bounds change per solve."""

    def __init__(self, p: ConicProgram):
        import highspy

        self._hs = highspy
        inf = highspy.kHighsInf
        A = sp.csc_matrix(np.vstack([p.A_eq, p.A_ub]))
        self.m_eq, self.m = p.A_eq.shape[0], A.shape[0]
        lp = highspy.HighsLp()
        lp.num_col_, lp.num_row_ = p.n_vars, self.m
        lp.col_cost_ = np.asarray(p.c, float)
        lp.col_lower_ = np.where(np.isfinite(p.lb), p.lb, -inf)
        lp.col_upper_ = np.where(np.isfinite(p.ub), p.ub, inf)
        lp.row_lower_, lp.row_upper_ = self._row_bounds(p.b_eq, p.b_ub)
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_, lp.a_matrix_.index_, lp.a_matrix_.value_ = A.indptr, A.indices, A.data
        self.h = highspy.Highs()
        self.h.setOptionValue("output_flag", False)
        for name in ("primal_feasibility_tolerance", "dual_feasibility_tolerance"):
            self.h.setOptionValue(name, DEFAULT_TOL)
        self.h.passModel(lp)
        self._cols = np.arange(p.n_vars, dtype=np.int32)
        self._rows = np.arange(self.m, dtype=np.int32)

    def _row_bounds(self, b_eq: NDArray, b_ub: NDArray) -> tuple[NDArray, NDArray]:
        return np.r_[b_eq, np.full(b_ub.size, -self._hs.kHighsInf)], np.r_[b_eq, b_ub]

    def solve(self, c: NDArray, b_eq: NDArray, b_ub: NDArray) -> NDArray:
        lo, up = self._row_bounds(b_eq, b_ub)
        self.h.changeColsCost(self._cols.size, self._cols, np.asarray(c, float))
        if self.m:
            self.h.changeRowsBounds(self.m, self._rows, lo, up)
        self.h.run()
        status = self.h.getModelStatus()
        if status == self._hs.HighsModelStatus.kInfeasible:
            raise MultistageError("stage is infeasible (no relatively complete recourse)")
        if status != self._hs.HighsModelStatus.kOptimal:
            raise MultistageError(f"stage solve failed: {self.h.modelStatusToString(status)}")
        return np.asarray(self.h.getSolution().col_value)


@dataclass
class SddpPolicy:
    prob: MultistageProblem
    transitions: TransitionModel
    pools: list[CutPool]

    def stage_program(self, t: int, x_prev: NDArray, xi: NDArray, weights: NDArray | None) -> ConicProgram:
        """Stage ``t`` LP over ``[x_t, theta (N)]``; the last stage has no ``theta``."""
        st = self.prob.stages[t]
        n = st.n
        b_ub, b_eq = st.rhs(x_prev, xi)
        if t == self.prob.horizon - 1:
            return ConicProgram(st.c, st.A_eq, b_eq, st.A_ub, b_ub, st.lb, st.ub)
        pool = self.pools[t]
        N = pool.n_nodes
        c = np.r_[st.c, weights]
        pad = lambda A: np.hstack([A, np.zeros((A.shape[0], N))])
        rows = [pad(st.A_ub)]
        rhs = [b_ub]
        if len(pool):
            B = np.array(pool.beta)
            cut = np.zeros((len(pool), n + N))
            cut[:, :n] = B
            cut[np.arange(len(pool)), n + np.array(pool.node)] = -1.0
            rows.append(cut)
            rhs.append(-np.array(pool.alpha))
        lb = np.r_[st.lb, np.full(N, self.prob.value_lb)]
        ub = np.r_[st.ub, np.full(N, np.inf)]
        return ConicProgram(c, pad(st.A_eq), b_eq, np.vstack(rows), np.concatenate(rhs), lb, ub)

    def solve_stage(self, t: int, x_prev: NDArray, xi: NDArray, weights: NDArray | None = None):
        """Returns ``(value, x_t, stage cost, subgradient wrt x_prev)``."""
        p = self.stage_program(t, x_prev, xi, weights)
        rep = solve_conic(p, "highs")
        if rep.status == "infeasible":
            raise MultistageError(f"stage {t + 1} is infeasible (no relatively complete recourse)")
        if not rep.ok:
            raise MultistageError(f"stage {t + 1} solve failed: {rep.status} {rep.message}")
        st = self.prob.stages[t]
        x = rep.x[:st.n]
        m_ub = st.A_ub.shape[0]
        grad = st.B_ub.T @ rep.duals["ub"][:m_ub] + st.B_eq.T @ rep.duals["eq"]
        return rep.objective, x, float(st.c @ x), grad

    def simulate(self, paths: ArrayLike) -> NDArray:
        """Total cost of the policy along each path ``(n, T, Q)``; stage 1 always uses ``xi1``.

        Transition weights are recomputed at the realized values, so paths need
        not come from the sample trajectories.
        """
        P = np.asarray(paths, dtype=float)
        if P.ndim == 2:
            P = P[:, :, None]
        T, n = self.prob.horizon, P.shape[0]
        costs = np.zeros(n)
        X = np.tile(self.prob.x0, (n, 1))
        # stage-major: one persistent model per stage, weights for all paths at once
        for t in range(T):
            st = self.prob.stages[t]
            XI = np.tile(np.atleast_1d(self.prob.xi1), (n, 1)) if t == 0 else P[:, t]
            W = self.transitions.weights_at(t, XI) if t < T - 1 else None
            solver = _StageSolver(self.stage_program(t, X[0], XI[0], None if W is None else W[0]))
            cut_rhs = -np.array(self.pools[t].alpha) if t < T - 1 else np.zeros(0)
            X_new = np.empty((n, st.n))
            for i in range(n):
                b_ub, b_eq = st.rhs(X[i], XI[i])
                c = st.c if W is None else np.r_[st.c, W[i]]
                X_new[i] = solver.solve(c, b_eq, np.r_[b_ub, cut_rhs])[:st.n]
                costs[i] += float(st.c @ X_new[i])
            X = X_new
        return costs

    def first_stage(self) -> tuple[float, NDArray]:
        w = self.transitions.weights(0, self.prob.xi1) if self.prob.horizon > 1 else None
        val, x, _, _ = self.solve_stage(0, self.prob.x0, self.prob.xi1, w)
        return val, x

    def to_dict(self) -> dict:
        return {"horizon": self.prob.horizon, "x1": self.first_stage()[1].tolist(),
                "cuts": [p.to_dict() for p in self.pools]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class SddpResult:
    lb_trace: NDArray
    ub: float
    ub_mean: float
    ub_se: float
    policy: SddpPolicy
    wall_time: float

    @property
    def lower_bound(self) -> float:
        return float(self.lb_trace[-1])


def sddp_solve(prob: MultistageProblem, joints=None, iters: int = 10, samples_per_pass: int = 1, seed=0,
               cuts_max: int = 2000, n_eval: int = 100) -> SddpResult:
    """Multi-cut SDDP on the sample support with density-ratio transition weights.

    Each forward pass samples node indices from the normalized transition
    weights. The backward pass evaluates every node of stage ``t`` at each
    visited state ``x_{t-1}`` and adds one cut per node, tagged with it.
    The stage problem minimizes ``c^T x + sum_j w_j(xi_t) theta_j`` so a
    policy can be evaluated at realizations outside the sample. The upper
    bound is the mean plus two standard errors of ``n_eval`` simulated
    in-sample trajectories under the final policy.
    """
    t0 = time.perf_counter()
    if iters < 1 or samples_per_pass < 1:
        raise MultistageError("iters and samples_per_pass must be positive")
    rng = np.random.default_rng(seed)
    T, N = prob.horizon, prob.n_traj
    trans = TransitionModel(prob.trajectories, joints)
    pools = [CutPool(N, prob.stages[t].n, cuts_max) for t in range(T - 1)]
    pol = SddpPolicy(prob, trans, pools)

    def out_weights(t, idx):
        if t >= T - 1:
            return None
        return trans.weights(0, prob.xi1) if idx < 0 else trans.node_weights(t, idx)

    def forward(generator):
        x = prob.x0
        idx = -1
        states, total = [], 0.0
        for t in range(T):
            xi = prob.xi1 if idx < 0 else prob.trajectories[idx, t]
            w = out_weights(t, idx)
            _, x, cost, _ = pol.solve_stage(t, x, xi, w)
            states.append(x)
            total += cost
            if t < T - 1:
                idx = int(generator.choice(N, p=w))
        return states, total

    lbs = []
    for _ in range(iters):
        passes = [forward(rng)[0] for _ in range(samples_per_pass)]
        for t in range(T - 1, 0, -1):
            for states in passes:
                x_hat = states[t - 1]
                for j in range(N):
                    val, _, _, grad = pol.solve_stage(t, x_hat, prob.trajectories[j, t], out_weights(t, j))
                    pools[t - 1].add(j, val - grad @ x_hat, grad)
        lbs.append(pol.first_stage()[0])
    eval_rng = np.random.default_rng(rng.integers(2**63))
    sims = np.array([forward(eval_rng)[1] for _ in range(n_eval)])
    mean = float(sims.mean())
    se = float(sims.std(ddof=1) / math.sqrt(n_eval)) if n_eval > 1 else 0.0
    return SddpResult(np.array(lbs), mean + 2 * se, mean, se, pol, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# storage toy


@dataclass(frozen=True)
class StorageSpec:
    """Single-unit energy storage with day-ahead commitments.

    Each stage sees generation ``xi_t``, must deliver the commitment made
    the stage before (shortfall penalized at ``penalty * price``), and
    commits ``u_t`` for the next stage at ``price`` per unit.
    """

    price: float = 1.0
    penalty: float = 2.0
    capacity: float = 5.0
    leakage: float = 0.98
    eff_charge: float = 0.9
    eff_discharge: float = 0.9
    max_commit: float = 40.0
    initial_level: float = 5.0


# decision layout per stage: u, e_s, e_plus, e_minus, e_d, e_u, level
STORAGE_VARS = ("u", "e_s", "e_plus", "e_minus", "e_d", "e_u", "level")


def storage_stage(spec: StorageSpec, last: bool) -> StageProblem:
    n = len(STORAGE_VARS)
    iu, ies, iep, iem, ied, ieu, iy = range(n)
    c = np.zeros(n)
    c[iu] = -spec.price
    c[ieu] = spec.penalty * spec.price
    A = np.zeros((3, n))
    B = np.zeros((3, n))
    E = np.zeros((3, 1))
    # generation split: e_s + e_plus + e_d = xi
    A[0, [ies, iep, ied]] = 1.0
    E[0, 0] = 1.0
    # delivery of yesterday's commitment: e_s + e_minus + e_u = u_prev
    A[1, [ies, iem, ieu]] = 1.0
    B[1, iu] = 1.0
    # storage balance: level - eff_c e_plus + e_minus / eff_d = leakage * level_prev
    A[2, iy] = 1.0
    A[2, iep] = -spec.eff_charge
    A[2, iem] = 1.0 / spec.eff_discharge
    B[2, iy] = spec.leakage
    ub = np.full(n, np.inf)
    ub[iy] = spec.capacity
    ub[iu] = 0.0 if last else spec.max_commit
    return StageProblem(c, n, 1, A_eq=A, b_eq=np.zeros(3), B_eq=B, E_eq=E, lb=0.0, ub=ub)


def storage_problem(trajectories: ArrayLike, xi1: float, spec: StorageSpec = StorageSpec()) -> MultistageProblem:
    Tr = np.asarray(trajectories, dtype=float)
    if Tr.ndim == 2:
        Tr = Tr[:, :, None]
    T = Tr.shape[1]
    stages = tuple(storage_stage(spec, t == T - 1) for t in range(T))
    x0 = np.zeros(len(STORAGE_VARS))
    x0[STORAGE_VARS.index("level")] = spec.initial_level
    lb = -spec.price * spec.max_commit * T - 1.0
    return MultistageProblem(stages, Tr, x0, [xi1], lb)
