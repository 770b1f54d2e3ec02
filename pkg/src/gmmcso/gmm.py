"""Gaussian mixtures over a partitioned (covariate, outcome) space.

Everything density-related runs in log space. Mixtures are immutable once
built; the arrays they hold are made read-only.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))
WEIGHT_FLOOR = 1e-12


class GMMError(ValueError):
    """Raised for invalid mixtures, data or fits."""


class SingularCovarianceError(GMMError):
    """A covariance (or a block of one) could not be factorized."""


@dataclass(frozen=True)
class Partition:
    """Covariates occupy the first ``q_dims`` coordinates, outcomes the rest."""

    q_dims: int
    r_dims: int

    def __post_init__(self):
        if self.q_dims < 0 or self.r_dims < 1:
            raise GMMError(f"invalid partition q={self.q_dims}, r={self.r_dims}")

    @property
    def dim(self) -> int:
        return self.q_dims + self.r_dims

    @property
    def s_idx(self) -> NDArray:
        return np.arange(self.q_dims)

    @property
    def xi_idx(self) -> NDArray:
        return np.arange(self.q_dims, self.dim)


@dataclass(frozen=True)
class GaussianComponent:
    mean: NDArray
    cov: NDArray


def _readonly(a: NDArray) -> NDArray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture ``sum_k p_k N(mu_k, Sigma_k)``.

    Stored as stacked arrays: ``weights`` (K,), ``means`` (K, D), ``covs``
    (K, D, D). ``components`` gives the per-component view.
    """

    weights: NDArray
    means: NDArray
    covs: NDArray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.asarray(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        cov = np.asarray(self.covs, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None, None]
        k, d = mu.shape
        if k < 1 or w.shape != (k,) or cov.shape != (k, d, d):
            raise GMMError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise GMMError("non-finite mixture parameters")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise GMMError(f"weights must lie on the simplex (sum={w.sum()!r})")
        if np.max(np.abs(cov - np.swapaxes(cov, 1, 2)), initial=0.0) > 1e-10:
            raise GMMError("covariances must be symmetric")
        object.__setattr__(self, "weights", _readonly(w))
        object.__setattr__(self, "means", _readonly(mu))
        object.__setattr__(self, "covs", _readonly(0.5 * (cov + np.swapaxes(cov, 1, 2))))

    @classmethod
    def from_components(cls, weights: ArrayLike, components: Iterable[GaussianComponent]):
        comps = list(components)
        return cls(
            np.asarray(weights, dtype=float),
            np.stack([np.atleast_1d(np.asarray(c.mean, dtype=float)) for c in comps]),
            np.stack([np.atleast_2d(np.asarray(c.cov, dtype=float)) for c in comps]),
        )

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(m, c) for m, c in zip(self.means, self.covs)]

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "components": [{"mean": m.tolist(), "cov": c.tolist()} for m, c in zip(self.means, self.covs)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianMixture":
        comps = [GaussianComponent(np.asarray(c["mean"], float), np.asarray(c["cov"], float))
                 for c in doc["components"]]
        w = np.asarray(doc["weights"], dtype=float)
        return cls.from_components(w / w.sum(), comps)


def save_mixture(m: GaussianMixture, path: str | Path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=2))


def load_mixture(path: str | Path) -> GaussianMixture:
    return GaussianMixture.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Dataset:
    rows: NDArray
    partition: Partition
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if rows.shape[0] < 1:
            raise GMMError("dataset must contain at least one row")
        if rows.shape[1] != self.partition.dim:
            raise GMMError(f"rows have {rows.shape[1]} columns, partition expects {self.partition.dim}")
        if not np.all(np.isfinite(rows)):
            raise GMMError("dataset contains non-finite entries")
        object.__setattr__(self, "rows", _readonly(rows))

    @property
    def s(self) -> NDArray:
        return self.rows[:, : self.partition.q_dims]

    @property
    def xi(self) -> NDArray:
        return self.rows[:, self.partition.q_dims:]


def read_dataset(csv_path: str | Path, manifest_path: str | Path) -> Dataset:
    """Read a headered CSV; the JSON manifest lists ``covariates`` and ``outcomes`` columns."""
    manifest = json.loads(Path(manifest_path).read_text())
    cov_cols = list(manifest.get("covariates", []))
    out_cols = list(manifest["outcomes"])
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in cov_cols + out_cols if c not in (reader.fieldnames or [])]
        if missing:
            raise GMMError(f"columns missing from {csv_path}: {missing}")
        try:
            rows = [[float(r[c]) for c in cov_cols + out_cols] for r in reader]
        except ValueError as exc:
            raise GMMError(f"non-numeric cell in {csv_path}: {exc}") from None
    return Dataset(np.array(rows), Partition(len(cov_cols), len(out_cols)), tuple(cov_cols + out_cols))


def write_dataset(ds: Dataset, csv_path: str | Path, manifest_path: str | Path | None = None) -> None:
    q = ds.partition.q_dims
    cols = list(ds.columns) or [f"s{i + 1}" for i in range(q)] + [
        f"xi{i + 1}" for i in range(ds.partition.r_dims)
    ]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in ds.rows:
            w.writerow([repr(float(v)) for v in row])
    if manifest_path is not None:
        Path(manifest_path).write_text(json.dumps({"covariates": cols[:q], "outcomes": cols[q:]}, indent=2))


# ---------------------------------------------------------------------------
# densities


def _cholesky(cov: NDArray) -> NDArray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("covariance is not positive definite") from None


def _gauss_logpdf(x: NDArray, mean: NDArray, chol: NDArray) -> NDArray:
    """Row-wise log N(x | mean, L L^T) for x of shape (n, d)."""
    d = mean.shape[0]
    if d == 0:
        return np.zeros(x.shape[0])
    diff = (x - mean).T
    sol = np.linalg.solve(chol, diff) if d > 1 else diff / chol[0, 0]
    maha = np.sum(sol * sol, axis=0)
    return -0.5 * (d * LOG_2PI + maha) - np.sum(np.log(np.diag(chol)))


def component_log_pdf(m: GaussianMixture, x: ArrayLike) -> NDArray:
    """(n, K) matrix of ``log p_k + log N(x_n | mu_k, Sigma_k)``."""
    xs = np.atleast_2d(np.asarray(x, dtype=float))
    if xs.shape[1] != m.dim:
        raise GMMError(f"point has dimension {xs.shape[1]}, mixture has {m.dim}")
    out = np.empty((xs.shape[0], m.n_components))
    with np.errstate(divide="ignore"):
        logw = np.log(m.weights)
    for k in range(m.n_components):
        out[:, k] = logw[k] + _gauss_logpdf(xs, m.means[k], _cholesky(m.covs[k]))
    return out


def log_pdf(m: GaussianMixture, x: ArrayLike) -> float | NDArray:
    """Log density of the mixture; a single vector gives a float, a matrix gives one value per row."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr[None]
    single = arr.ndim == 1
    if single and m.dim != arr.shape[0]:
        if m.dim == 1:
            arr, single = arr[:, None], False
        else:
            raise GMMError(f"point has dimension {arr.shape[0]}, mixture has {m.dim}")
    vals = logsumexp(component_log_pdf(m, arr), axis=1)
    return float(vals[0]) if single else vals


# ---------------------------------------------------------------------------
# structural operations


def marginal(m: GaussianMixture, indices: Sequence[int]) -> GaussianMixture:
    idx = np.asarray(list(indices), dtype=int)
    if idx.size == 0:
        raise GMMError("marginal needs at least one index")
    if np.any(idx < 0) or np.any(idx >= m.dim) or len(set(idx.tolist())) != idx.size:
        raise GMMError(f"invalid marginal indices {idx.tolist()} for dimension {m.dim}")
    return GaussianMixture(m.weights, m.means[:, idx], m.covs[:, idx[:, None], idx[None, :]])


def _clamp_psd(cov: NDArray, tol: float = 1e-10) -> NDArray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] < -tol:
        raise GMMError(f"Schur complement has eigenvalue {vals[0]:.3e} < -{tol}")
    if vals[0] < 0:
        cov = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        cov = 0.5 * (cov + cov.T)
    return cov


def condition_on(
    m: GaussianMixture, given_idx: Sequence[int], target_idx: Sequence[int], given: ArrayLike
) -> GaussianMixture:
    """Mixture over ``target_idx`` conditioned on coordinates ``given_idx`` taking value ``given``."""
    g = np.asarray(list(given_idx), dtype=int)
    t = np.asarray(list(target_idx), dtype=int)
    val = np.atleast_1d(np.asarray(given, dtype=float))
    if val.shape != (g.size,):
        raise GMMError(f"conditioning value has shape {val.shape}, expected ({g.size},)")
    if g.size == 0:
        return marginal(m, t)
    K = m.n_components
    means = np.empty((K, t.size))
    covs = np.empty((K, t.size, t.size))
    logw = np.empty(K)
    with np.errstate(divide="ignore"):
        lp = np.log(m.weights)
    for k in range(K):
        mu, S = m.means[k], m.covs[k]
        S_gg = S[np.ix_(g, g)]
        S_tg = S[np.ix_(t, g)]
        L = _cholesky(S_gg)
        # K_gain = S_tg S_gg^{-1}
        gain = np.linalg.solve(L.T, np.linalg.solve(L, S_tg.T)).T
        means[k] = mu[t] + gain @ (val - mu[g])
        covs[k] = _clamp_psd(S[np.ix_(t, t)] - gain @ S_tg.T)
        logw[k] = lp[k] + _gauss_logpdf(val[None, :], mu[g], L)[0]
    w = np.exp(logw - logsumexp(logw))
    w = w / w.sum()
    return GaussianMixture(w, means, covs)


def condition(m: GaussianMixture, part: Partition, s: ArrayLike) -> GaussianMixture:
    """Conditional mixture of the outcomes given covariates ``s``.

    Component means shift by the regression ``Sigma_xs Sigma_ss^{-1} (s - mu_s)``,
    covariances become Schur complements, and weights are reweighted by the
    covariate likelihoods ``p_k N(s | mu_s, Sigma_ss)`` normalized in log space.
    With ``q_dims == 0`` the input mixture is returned unchanged.
    """
    if part.dim != m.dim:
        raise GMMError(f"partition dimension {part.dim} != mixture dimension {m.dim}")
    if part.q_dims == 0:
        return m
    return condition_on(m, part.s_idx, part.xi_idx, s)


def conditional_log_density(
    m: GaussianMixture,
    target_idx: Sequence[int],
    given_idx: Sequence[int],
    target: ArrayLike,
    given_rows: ArrayLike,
) -> NDArray:
    """``log f(target | given_n)`` for every row ``given_n`` (vectorized over rows).

    Conditional means are affine in the given value and conditional
    covariances do not depend on it, so each component is factored once.
    """
    t = np.asarray(list(target_idx), dtype=int)
    g = np.asarray(list(given_idx), dtype=int)
    y = np.atleast_1d(np.asarray(target, dtype=float))
    G = np.asarray(given_rows, dtype=float)
    if G.ndim == 1:
        G = G[:, None] if g.size == 1 else G.reshape(-1, g.size)
    n = G.shape[0]
    K = m.n_components
    with np.errstate(divide="ignore"):
        lp = np.log(m.weights)
    log_given = np.empty((n, K))
    log_target = np.empty((n, K))
    for k in range(K):
        mu, S = m.means[k], m.covs[k]
        if g.size:
            Lg = _cholesky(S[np.ix_(g, g)])
            log_given[:, k] = lp[k] + _gauss_logpdf(G, mu[g], Lg)
            S_tg = S[np.ix_(t, g)]
            gain = np.linalg.solve(Lg.T, np.linalg.solve(Lg, S_tg.T)).T
            cmeans = mu[t] + (G - mu[g]) @ gain.T
            ccov = _clamp_psd(S[np.ix_(t, t)] - gain @ S_tg.T)
        else:
            log_given[:, k] = lp[k]
            cmeans = np.broadcast_to(mu[t], (n, t.size))
            ccov = _clamp_psd(S[np.ix_(t, t)])
        Lc = _cholesky(ccov)
        diff = (y[None, :] - cmeans).T
        sol = np.linalg.solve(Lc, diff)
        log_target[:, k] = -0.5 * (t.size * LOG_2PI + np.sum(sol * sol, axis=0)) - np.sum(np.log(np.diag(Lc)))
    log_cw = log_given - logsumexp(log_given, axis=1, keepdims=True)
    return logsumexp(log_cw + log_target, axis=1)


def mixture_moments(m: GaussianMixture) -> tuple[NDArray, NDArray]:
    """Overall mean and covariance (law of total variance)."""
    mean = m.weights @ m.means
    second = np.einsum("k,kij->ij", m.weights, m.covs + np.einsum("ki,kj->kij", m.means, m.means))
    cov = second - np.outer(mean, mean)
    return mean, 0.5 * (cov + cov.T)


def sample(m: GaussianMixture, n: int, seed: int | np.random.Generator | None = None) -> NDArray:
    """Draw ``n`` points: categorical component index, then a Cholesky-scaled normal."""
    if n < 0:
        raise GMMError("sample size must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = rng.choice(m.n_components, size=n, p=m.weights)
    z = rng.standard_normal((n, m.dim))
    out = np.empty((n, m.dim))
    for k in range(m.n_components):
        sel = labels == k
        if np.any(sel):
            L = _cholesky(m.covs[k])
            out[sel] = m.means[k] + z[sel] @ L.T
    return out


# ---------------------------------------------------------------------------
# estimation


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 500
    tol_loglik: float = 1e-8
    cov_floor: float | None = None  # None: 1e-6 * trace(sample cov) / D
    n_restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or self.tol_loglik <= 0 or self.n_restarts < 1:
            raise GMMError("invalid EM configuration")
        if self.cov_floor is not None and self.cov_floor <= 0:
            raise GMMError("cov_floor must be positive")


@dataclass(frozen=True)
class EmResult:
    mixture: GaussianMixture
    loglik_trace: NDArray  # average log-likelihood per sample, one entry per iteration
    converged: bool
    raw_mixture: GaussianMixture | None = field(default=None, repr=False)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


def _as_matrix(data) -> NDArray:
    X = data.rows if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not np.all(np.isfinite(X)):
        raise GMMError("data contains non-finite entries")
    return np.array(X, dtype=float)


def default_cov_floor(X: NDArray) -> float:
    d = X.shape[1]
    tr = float(np.trace(np.atleast_2d(np.cov(X.T, bias=True)))) if X.shape[0] > 1 else 0.0
    return max(1e-6 * tr / d, 1e-12)


def _floor_eigs(cov: NDArray, floor: float) -> NDArray:
    """Closest covariance with all eigenvalues >= floor (Gaussian MLE under that constraint)."""
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] >= floor:
        return cov
    cov = (vecs * np.maximum(vals, floor)) @ vecs.T
    return 0.5 * (cov + cov.T)


def _kmeanspp(X: NDArray, k: int, rng: np.random.Generator) -> NDArray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        if tot <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / tot)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.stack(centers)


def _m_step(X: NDArray, resp: NDArray, floor: float, prev: GaussianMixture | None):
    n, d = X.shape
    nk = resp.sum(axis=0)
    K = resp.shape[1]
    weights = nk / n
    means = np.empty((K, d))
    covs = np.empty((K, d, d))
    for k in range(K):
        if nk[k] < 1e-10 * n:
            # empty component: keep old parameters
            if prev is not None:
                means[k], covs[k] = prev.means[k], prev.covs[k]
            else:
                means[k] = X.mean(axis=0)
                covs[k] = _floor_eigs(np.atleast_2d(np.cov(X.T, bias=True)), floor)
            continue
        mu = resp[:, k] @ X / nk[k]
        diff = X - mu
        cov = (resp[:, k, None] * diff).T @ diff / nk[k]
        means[k] = mu
        covs[k] = _floor_eigs(cov, floor)
    weights = weights / weights.sum()
    return GaussianMixture(weights, means, covs)


def _run_em(X: NDArray, k: int, cfg: EmConfig, floor: float, rng: np.random.Generator):
    n = X.shape[0]
    centers = _kmeanspp(X, k, rng)
    labels = np.argmin(((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), labels] = 1.0
    m = _m_step(X, resp, floor, None)
    trace = []
    converged = False
    for _ in range(cfg.max_iters):
        clp = component_log_pdf(m, X)
        ll_rows = logsumexp(clp, axis=1)
        trace.append(float(ll_rows.mean()))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < cfg.tol_loglik:
            converged = True
            break
        resp = np.exp(clp - ll_rows[:, None])
        m = _m_step(X, resp, floor, m)
    return m, np.array(trace), converged


def _apply_weight_floor(m: GaussianMixture) -> GaussianMixture:
    w = np.maximum(m.weights, WEIGHT_FLOOR)
    return GaussianMixture(w / w.sum(), m.means, m.covs)


def fit_em(data, k: int, cfg: EmConfig | None = None) -> EmResult:
    """Fit a ``k``-component mixture by EM with k-means++ seeding.

    Each restart seeds with k-means++, applies one M-step to the hard
    assignment, then alternates E/M steps until the per-sample average
    log-likelihood changes by less than ``cfg.tol_loglik``. The M-step
    clips covariance eigenvalues at the floor, which is the exact maximizer
    over the floored covariance set, so the trace stays nondecreasing.
    The best restart by final log-likelihood is returned.
    """
    cfg = cfg or EmConfig()
    X = _as_matrix(data)
    n = X.shape[0]
    if k < 1:
        raise GMMError("k must be at least 1")
    if n < k:
        raise GMMError(f"need at least k={k} samples, got {n}")
    floor = cfg.cov_floor if cfg.cov_floor is not None else default_cov_floor(X)
    root = np.random.SeedSequence(cfg.seed)
    best = None
    for child in root.spawn(cfg.n_restarts):
        rng = np.random.default_rng(child)
        try:
            m, trace, conv = _run_em(X, k, cfg, floor, rng)
        except GMMError:
            continue
        if not np.all(np.isfinite(trace)):
            continue
        if best is None or trace[-1] > best[1][-1]:
            best = (m, trace, conv)
    if best is None:
        raise GMMError(f"EM produced no valid fit for k={k}")
    m, trace, conv = best
    return EmResult(_apply_weight_floor(m), trace, conv, raw_mixture=m)


def n_free_params(k: int, d: int) -> int:
    return k - 1 + k * d + k * d * (d + 1) // 2


@dataclass(frozen=True)
class AicSelection:
    k: int
    table: dict[int, float]
    fits: dict[int, EmResult]

    @property
    def mixture(self) -> GaussianMixture:
        return self.fits[self.k].mixture


def select_k_aic(data, candidates: Sequence[int], cfg: EmConfig | None = None) -> AicSelection:
    """Pick the component count minimizing ``2 * n_params - 2 * loglik``; ties go to the smaller K."""
    cands = sorted(set(int(c) for c in candidates))
    if not cands:
        raise GMMError("empty candidate list")
    X = _as_matrix(data)
    n, d = X.shape
    if cands[-1] > n:
        raise GMMError(f"largest candidate {cands[-1]} exceeds sample size {n}")
    table: dict[int, float] = {}
    fits: dict[int, EmResult] = {}
    for k in cands:
        try:
            res = fit_em(X, k, cfg)
        except GMMError:
            continue
        total = float(np.sum(log_pdf(res.mixture, X)))
        table[k] = 2.0 * n_free_params(k, d) - 2.0 * total
        fits[k] = res
    if not table:
        raise GMMError("all fits failed")
    best_k = min(table, key=lambda kk: (table[kk], kk))
    return AicSelection(best_k, table, fits)
