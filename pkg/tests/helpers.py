"""Brute-force oracles and trial drivers shared by the unit and acceptance tests."""

import itertools

import numpy as np

from scipy.optimize import minimize_scalar

from gmmcso.dro import AffinePiece, PiecewiseAffineLoss, Polyhedron, dro_solve, newsvendor_loss
from gmmcso.gmm import EmConfig, GaussianMixture, Partition, condition, fit_em, marginal, sample
from gmmcso.transport import w2_gmm_upper


def vertex_enumeration_ot(C, p, q):
    """Minimum of the transportation LP over all basic feasible solutions."""
    C = np.asarray(C, float)
    K, L = C.shape
    A = np.zeros((K + L, K * L))
    for i in range(K):
        A[i, i * L:(i + 1) * L] = 1.0
    for j in range(L):
        A[K + j, j::L] = 1.0
    A, b = A[:-1], np.concatenate([p, q])[:-1]  # one redundant row
    m = A.shape[0]
    combos = np.array(list(itertools.combinations(range(K * L), m)))
    B = A[:, combos].transpose(1, 0, 2)
    ok = np.abs(np.linalg.det(B)) > 1e-9
    xs = np.linalg.solve(B[ok], np.broadcast_to(b, (ok.sum(), m))[..., None])[..., 0]
    feas = np.all(xs >= -1e-12, axis=1)
    vals = np.sum(xs[feas] * C.ravel()[combos[ok][feas]], axis=1)
    return float(vals.min())


def lp_vertex_min(c, A, b):
    """``min c^T x`` s.t. ``A x <= b`` by enumerating every vertex (bounded feasible set assumed)."""
    A, b, c = np.asarray(A, float), np.asarray(b, float), np.asarray(c, float)
    n = A.shape[1]
    best = np.inf
    for rows in itertools.combinations(range(A.shape[0]), n):
        Ar = A[list(rows)]
        if abs(np.linalg.det(Ar)) < 1e-12:
            continue
        x = np.linalg.solve(Ar, b[list(rows)])
        if np.all(A @ x <= b + 1e-9):
            best = min(best, float(c @ x))
    return best


def random_joint(rng, k=2):
    """Well-conditioned scalar-covariate, scalar-outcome mixture."""
    w = rng.dirichlet(np.full(k, 3.0))
    mu = rng.normal(scale=2.0, size=(k, 2))
    covs = []
    for _ in range(k):
        A = rng.normal(scale=0.6, size=(2, 2))
        covs.append(A @ A.T + 0.3 * np.eye(2))
    return GaussianMixture(w, mu, np.array(covs))


def guarantee_trial(seed, n_train=500, n_draws=200, n_mc=100_000, h=3.0, b=1.0):
    """One out-of-sample check of the robust newsvendor with a radius covering the truth.

    Returns ``(true_loss, mc_se, dro_value, eps)``. The radius is the mixture
    W2 bound between the fitted and the true conditional at a covariate drawn
    from the true marginal; the program is centered at draws from the fitted
    conditional.
    """
    rng = np.random.default_rng(seed)
    part = Partition(1, 1)
    truth = random_joint(rng)
    data = sample(truth, n_train, rng)
    fit = fit_em(data, truth.n_components, EmConfig(seed=seed)).mixture
    s = sample(marginal(truth, [0]), 1, rng)[0]
    true_c, fit_c = condition(truth, part, s), condition(fit, part, s)
    eps = w2_gmm_upper(fit_c, true_c)
    draws = sample(fit_c, n_draws, rng)
    loss = newsvendor_loss(h, b)
    rep = dro_solve(loss, Polyhedron.free(1), draws, eps)
    q = rep.x[0]
    mc = loss.value([q], sample(true_c, n_mc, rng))
    return float(mc.mean()), float(mc.std(ddof=1) / np.sqrt(n_mc)), rep.objective, eps


def random_pwa_instance(rng, n=2, r=2, j=3, m=8):
    """Random piecewise-affine loss over the box ``[-1, 1]^n`` with ``m`` outcome samples."""
    pieces = tuple(AffinePiece(rng.normal(size=(r, n)), rng.normal(size=r), rng.normal(size=n), rng.normal())
                   for _ in range(j))
    return PiecewiseAffineLoss(pieces), Polyhedron.box(n, -1.0, 1.0), rng.normal(size=(m, r))


def brute_force_dro_value(loss, lo, hi, samples, eps):
    """Robust value for a scalar decision and scalar outcome from the penalized inner supremum.

    For fixed ``x`` and multiplier ``lam``, ``sup_w a w + b - lam (w - xi)^2``
    is ``a xi + b + a^2 / (4 lam)``, attained at ``w = xi + a / (2 lam)``.
    Both remaining one-dimensional problems are convex and solved by
    bounded scalar minimization.
    """
    xi = np.asarray(samples, float).ravel()

    def inner(x, lam):
        vals = [(p.G[0, 0] * x + p.g[0]) * xi + p.h[0] * x + p.h0 + (p.G[0, 0] * x + p.g[0]) ** 2 / (4 * lam)
                for p in loss.pieces]
        return lam * eps * eps + np.mean(np.max(vals, axis=0))

    def value(x):
        res = minimize_scalar(lambda t: inner(x, np.exp(t)), bounds=(-25, 25), method="bounded",
                              options={"xatol": 1e-10})
        return res.fun

    grid = np.linspace(lo, hi, 401)
    vals = [value(x) for x in grid]
    k = int(np.argmin(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = minimize_scalar(value, bounds=(a, b), method="bounded", options={"xatol": 1e-10})
    return float(min(res.fun, min(vals)))


def nested_tree_value(prob, weight_fn):
    """Extensive-form value of a multistage problem built by explicit recursion.

    ``weight_fn(t, xi)`` returns the probabilities over the stage ``t + 1``
    sample nodes (0-based ``t``) given the stage ``t`` value. Every node owns
    a copy of its stage variables; the LP is assembled densely and solved
    with HiGHS directly.
    """
    from scipy.optimize import linprog

    T = prob.horizon
    blocks = []  # (stage, xi, parent block index, probability)

    def grow(t, xi, parent, p):
        me = len(blocks)
        blocks.append((t, xi, parent, p))
        if t + 1 < T:
            w = weight_fn(t, xi)
            for j in range(prob.n_traj):
                if w[j] > 0:
                    grow(t + 1, prob.trajectories[j, t + 1], me, p * w[j])

    grow(0, prob.xi1, -1, 1.0)
    sizes = [prob.stages[t].n for t, *_ in blocks]
    start = np.concatenate([[0], np.cumsum(sizes)])
    nv = int(start[-1])
    c = np.zeros(nv)
    bounds = []
    Aeq, beq, Aub, bub = [], [], [], []
    for k, (t, xi, parent, p) in enumerate(blocks):
        st = prob.stages[t]
        c[start[k]:start[k + 1]] = p * st.c
        bounds += list(zip(st.lb, [None if not np.isfinite(u) else u for u in st.ub]))
        for A, b, B, E, rows, rhs in ((st.A_eq, st.b_eq, st.B_eq, st.E_eq, Aeq, beq),
                                      (st.A_ub, st.b_ub, st.B_ub, st.E_ub, Aub, bub)):
            for r in range(A.shape[0]):
                row = np.zeros(nv)
                row[start[k]:start[k + 1]] = A[r]
                val = b[r] + E[r] @ np.atleast_1d(xi)
                if parent < 0:
                    val += B[r] @ prob.x0
                else:
                    row[start[parent]:start[parent + 1]] -= B[r]
                rows.append(row)
                rhs.append(val)
    kw = {}
    if Aeq:
        kw.update(A_eq=np.array(Aeq), b_eq=np.array(beq))
    if Aub:
        kw.update(A_ub=np.array(Aub), b_ub=np.array(bub))
    res = linprog(c, bounds=bounds, method="highs", options={"primal_feasibility_tolerance": 1e-10,
                  "dual_feasibility_tolerance": 1e-10}, **kw)
    assert res.status == 0, res.message
    return float(res.fun), res.x[:prob.stages[0].n]


def storage_instance(T, N, rho, seed, z1=1.0):
    """Storage toy on AR(1) generation with the first stage pinned at ``z1``."""
    from gmmcso.bench import gen_markov_ar1, storage_generation
    from gmmcso.multistage import storage_problem

    rng = np.random.default_rng(seed)
    train = storage_generation(gen_markov_ar1(T, N, 1, rho, rng))
    return storage_problem(train, float(storage_generation(z1)))


def pair_mixture(traj, seed=0, k=(1, 2, 3)):
    """AIC-selected mixture over consecutive-stage pairs."""
    from gmmcso.gmm import select_k_aic

    pairs = np.column_stack([traj[:, :-1, 0].ravel(), traj[:, 1:, 0].ravel()])
    return select_k_aic(pairs, list(k), EmConfig(seed=seed)).mixture


def exact_policy_cost(policy, prob, trans):
    """Expected in-sample cost of an SDDP policy by enumerating every tree path."""
    T = prob.horizon
    paths, probs = [], []

    def walk(t, idx_path, p):
        if t == T:
            paths.append(idx_path)
            probs.append(p)
            return
        xi = prob.xi1 if t == 1 else prob.trajectories[idx_path[-1], t - 1]
        w = trans.weights(t - 1, xi)
        for j in np.flatnonzero(w > 0):
            walk(t + 1, idx_path + [j], p * w[j])

    walk(1, [], 1.0)
    P = np.zeros((len(paths), T, prob.q_dims))
    for k, path in enumerate(paths):
        P[k, 0] = prob.xi1
        for t, j in enumerate(path, start=1):
            P[k, t] = prob.trajectories[j, t]
    return float(np.dot(probs, policy.simulate(P)))


def weighted_quantile_oracle(xi, w, h, b):
    """Grid minimizer of the weighted newsvendor cost at resolution 1e-4."""
    cost = lambda q: float(np.sum(w * (h * np.maximum(q - xi, 0) + b * np.maximum(xi - q, 0))))
    coarse = np.arange(xi.min(), xi.max() + 1e-3, 1e-2)
    k = int(np.argmin([cost(q) for q in coarse]))
    fine = np.arange(coarse[max(k - 1, 0)], coarse[min(k + 1, coarse.size - 1)] + 1e-4, 1e-4)
    vals = [cost(q) for q in fine]
    return float(min(vals)), cost


def flattened_two_stage_value(prob, joint):
    """Two-stage extensive form written out by hand: ``x1`` plus one copy of ``x2`` per stage-2 node."""
    from scipy.optimize import linprog

    from gmmcso.multistage import TransitionModel

    w = TransitionModel(prob.trajectories, joint).weights(0, prob.xi1)
    s1, s2 = prob.stages
    N, n = prob.n_traj, s1.n
    m1, m2 = s1.A_eq.shape[0], s2.A_eq.shape[0]
    c = np.r_[s1.c, np.concatenate([w[j] * s2.c for j in range(N)])]
    A = np.zeros((m1 + N * m2, n + N * s2.n))
    b = np.zeros(m1 + N * m2)
    A[:m1, :n] = s1.A_eq
    b[:m1] = s1.b_eq + s1.B_eq @ prob.x0 + s1.E_eq @ np.atleast_1d(prob.xi1)
    for j in range(N):
        r = slice(m1 + m2 * j, m1 + m2 * (j + 1))
        A[r, n + s2.n * j:n + s2.n * (j + 1)] = s2.A_eq
        A[r, :n] = -s2.B_eq
        b[r] = s2.b_eq + s2.E_eq @ prob.trajectories[j, 1]
    lb = np.r_[s1.lb, np.tile(s2.lb, N)]
    ub = [None if np.isinf(u) else u for u in np.r_[s1.ub, np.tile(s2.ub, N)]]
    res = linprog(c, A_eq=A, b_eq=b, bounds=list(zip(lb, ub)), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    assert res.status == 0, res.message
    return float(res.fun)
