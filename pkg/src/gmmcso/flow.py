"""Separable affine autoregressive flows on top of a Gaussian mixture base.

The flow maps latent ``z`` to data ``x = T(z)``. Coordinates are ordered so
that covariates come first in every autoregressive layer, which makes the
covariate block of ``T`` a function of the covariates alone. Conditioning
therefore happens in latent space: invert the covariates, condition the
base mixture, push samples forward.

Two layer types are provided:

* ``ElementwiseAffine``: ``x_i = z_i exp(a_i) + b_i`` on a subset of
  coordinates (identity elsewhere).
* ``MaskedAffine``: ``x_i = z_i exp(alpha_i(x_<i)) + m_i(x_<i)`` with a
  one-hidden-layer tanh conditioner masked so that output ``i`` only sees
  earlier coordinates.

Log-scales pass through the soft clamp ``c tanh(raw / c)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from .gmm import GaussianMixture, Partition, condition, log_pdf, sample

CLAMP = 5.0


class FlowError(ValueError):
    pass


def _clamp(raw: NDArray, c: float) -> NDArray:
    return c * np.tanh(raw / c)


def _unclamp(val: float, c: float) -> float:
    if abs(val) >= c:
        raise FlowError(f"log-scale {val} outside the clamp range (-{c}, {c})")
    return float(c * np.arctanh(val / c))


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class ElementwiseAffine:
    """Per-coordinate affine map on ``coords``; parameters ``[raw log-scales, shifts]``."""

    dim: int
    coords: tuple[int, ...] | None = None
    clamp: float = CLAMP

    def __post_init__(self):
        coords = tuple(range(self.dim)) if self.coords is None else tuple(int(c) for c in self.coords)
        if not coords or len(set(coords)) != len(coords) or min(coords) < 0 or max(coords) >= self.dim:
            raise FlowError("elementwise coordinates must be distinct and in range")
        object.__setattr__(self, "coords", coords)

    @property
    def n_params(self) -> int:
        return 2 * len(self.coords)

    def init_params(self, rng: np.random.Generator) -> NDArray:
        return np.zeros(self.n_params)

    def _unpack(self, p: NDArray):
        k = len(self.coords)
        return _clamp(p[:k], self.clamp), p[k:]

    def forward(self, p: NDArray, z: NDArray):
        a, b = self._unpack(p)
        x = z.copy()
        idx = list(self.coords)
        x[:, idx] = z[:, idx] * np.exp(a) + b
        ld = np.zeros_like(z)
        ld[:, idx] = a
        return x, ld

    def inverse(self, p: NDArray, y: NDArray):
        a, b = self._unpack(p)
        u = y.copy()
        idx = list(self.coords)
        u[:, idx] = (y[:, idx] - b) * np.exp(-a)
        ld = np.zeros_like(y)
        ld[:, idx] = -a
        return u, ld, None

    def backward(self, p: NDArray, y: NDArray, u: NDArray, cache, delta: NDArray):
        """Gradient of ``J(u) + sum(-ld)`` given ``delta = dJ/du``; returns ``(dJ/dy, dJ/dp)``."""
        a, _ = self._unpack(p)
        idx = list(self.coords)
        d = delta[:, idx]
        ea = np.exp(-a)
        g_a = np.sum(-d * u[:, idx], axis=0) + y.shape[0]
        g_raw = g_a * (1.0 - (a / self.clamp) ** 2)
        g_b = np.sum(-d * ea, axis=0)
        gy = delta.copy()
        gy[:, idx] = d * ea
        return gy, np.concatenate([g_raw, g_b])

    def describe(self) -> dict:
        return {"type": "elementwise", "dim": self.dim, "coords": list(self.coords), "clamp": self.clamp}

    @staticmethod
    def params_for(scale: ArrayLike, shift: ArrayLike, clamp: float = CLAMP) -> NDArray:
        """Parameter vector realizing ``x = scale * z + shift``."""
        s = np.atleast_1d(np.asarray(scale, dtype=float))
        if np.any(s <= 0):
            raise FlowError("scales must be positive")
        raw = [_unclamp(float(np.log(v)), clamp) for v in s]
        return np.concatenate([raw, np.atleast_1d(np.asarray(shift, dtype=float))])


@dataclass(frozen=True)
class MaskedAffine:
    """Affine autoregressive layer with a masked tanh conditioner.

    ``order`` lists coordinates in autoregressive order; covariates must
    occupy its first ``q_dims`` positions. Only unmasked weights are
    parameters, packed as ``[W1, b1, W_alpha, b_alpha, W_m, b_m]``.
    Output weights start at zero, so a fresh layer is the identity.
    """

    dim: int
    q_dims: int
    hidden: int = 16
    order: tuple[int, ...] | None = None
    clamp: float = CLAMP
    init_scale: float = 0.5

    def __post_init__(self):
        D = self.dim
        order = tuple(range(D)) if self.order is None else tuple(int(i) for i in self.order)
        if sorted(order) != list(range(D)):
            raise FlowError("order must be a permutation of the coordinates")
        if set(order[:self.q_dims]) != set(range(self.q_dims)):
            raise FlowError("covariates must precede outcomes in the autoregressive order")
        if self.hidden < 1:
            raise FlowError("hidden width must be positive")
        object.__setattr__(self, "order", order)
        deg = np.empty(D, dtype=int)
        deg[list(order)] = np.arange(1, D + 1)
        H = self.hidden if D > 1 else 0
        hdeg = (np.arange(H) % max(D - 1, 1)) + 1
        m1 = hdeg[:, None] >= deg[None, :]  # (H, D)
        m2 = deg[:, None] > hdeg[None, :]  # (D, H)
        object.__setattr__(self, "_m1", m1)
        object.__setattr__(self, "_m2", m2)
        object.__setattr__(self, "_H", H)

    @property
    def n_params(self) -> int:
        return int(self._m1.sum()) + self._H + 2 * (int(self._m2.sum()) + self.dim)

    def _sizes(self):
        n1, n2 = int(self._m1.sum()), int(self._m2.sum())
        return [n1, self._H, n2, self.dim, n2, self.dim]

    def _unpack(self, p: NDArray):
        parts = np.split(p, np.cumsum(self._sizes())[:-1])
        W1 = np.zeros(self._m1.shape)
        W1[self._m1] = parts[0]
        Wa = np.zeros(self._m2.shape)
        Wa[self._m2] = parts[2]
        Wm = np.zeros(self._m2.shape)
        Wm[self._m2] = parts[4]
        return W1, parts[1], Wa, parts[3], Wm, parts[5]

    def init_params(self, rng: np.random.Generator) -> NDArray:
        sizes = self._sizes()
        p = np.zeros(sum(sizes))
        p[:sizes[0]] = rng.normal(scale=self.init_scale, size=sizes[0])
        return p

    def _conditioner(self, p: NDArray, y: NDArray):
        W1, b1, Wa, ba, Wm, bm = self._unpack(p)
        h = np.tanh(y @ W1.T + b1) if self._H else np.zeros((y.shape[0], 0))
        alpha = _clamp(h @ Wa.T + ba, self.clamp)
        shift = h @ Wm.T + bm
        return alpha, shift, h

    def forward(self, p: NDArray, z: NDArray):
        x = np.zeros_like(z)
        alpha = np.zeros_like(z)
        for i in self.order:
            alpha, shift, _ = self._conditioner(p, x)
            x[:, i] = z[:, i] * np.exp(alpha[:, i]) + shift[:, i]
        alpha, shift, _ = self._conditioner(p, x)
        return x, alpha

    def inverse(self, p: NDArray, y: NDArray):
        alpha, shift, h = self._conditioner(p, y)
        u = (y - shift) * np.exp(-alpha)
        return u, -alpha, (alpha, h)

    def backward(self, p: NDArray, y: NDArray, u: NDArray, cache, delta: NDArray):
        W1, b1, Wa, ba, Wm, bm = self._unpack(p)
        alpha, h = cache
        ea = np.exp(-alpha)
        g_alpha = -delta * u + 1.0
        g_raw = g_alpha * (1.0 - (alpha / self.clamp) ** 2)
        g_m = -delta * ea
        gy = delta * ea
        g_Wa = g_raw.T @ h
        g_Wm = g_m.T @ h
        g_ba = g_raw.sum(axis=0)
        g_bm = g_m.sum(axis=0)
        if self._H:
            g_h = g_raw @ Wa + g_m @ Wm
            g_pre = g_h * (1.0 - h * h)
            g_W1 = g_pre.T @ y
            g_b1 = g_pre.sum(axis=0)
            gy = gy + g_pre @ W1
        else:
            g_W1 = np.zeros(self._m1.shape)
            g_b1 = np.zeros(0)
        grad = np.concatenate([g_W1[self._m1], g_b1, g_Wa[self._m2], g_ba, g_Wm[self._m2], g_bm])
        return gy, grad

    def describe(self) -> dict:
        return {"type": "masked", "dim": self.dim, "q_dims": self.q_dims, "hidden": self.hidden,
                "order": list(self.order), "clamp": self.clamp, "init_scale": self.init_scale}


def layer_from_dict(d: dict):
    kind = d["type"]
    if kind == "elementwise":
        return ElementwiseAffine(int(d["dim"]), tuple(d["coords"]), float(d.get("clamp", CLAMP)))
    if kind == "masked":
        return MaskedAffine(int(d["dim"]), int(d["q_dims"]), int(d["hidden"]), tuple(d["order"]),
                            float(d.get("clamp", CLAMP)), float(d.get("init_scale", 0.5)))
    raise FlowError(f"unknown layer type {kind!r}")


def block_reversed_order(part: Partition) -> tuple[int, ...]:
    """Covariates reversed then outcomes reversed: keeps separability while mixing the order."""
    return tuple(reversed(part.s_idx)) + tuple(reversed(part.xi_idx))


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class FlowModel:
    partition: Partition
    layers: tuple
    params: NDArray

    def __post_init__(self):
        layers = tuple(self.layers)
        D = self.partition.dim
        for L in layers:
            if L.dim != D:
                raise FlowError("layer dimension does not match the partition")
            if isinstance(L, MaskedAffine) and L.q_dims != self.partition.q_dims:
                raise FlowError("masked layer has a different covariate count")
        p = np.asarray(self.params, dtype=float).ravel().copy()
        if p.size != sum(L.n_params for L in layers):
            raise FlowError("parameter vector length does not match the layers")
        p.setflags(write=False)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "params", p)

    @classmethod
    def build(cls, part: Partition, layers: Sequence, seed=0) -> "FlowModel":
        rng = np.random.default_rng(seed)
        return cls(part, tuple(layers), np.concatenate([L.init_params(rng) for L in layers] or [np.zeros(0)]))

    @classmethod
    def default(cls, part: Partition, n_layers: int = 2, hidden: int = 16, seed=0) -> "FlowModel":
        """Masked layers alternating natural and block-reversed order, each followed by nothing else."""
        layers = []
        for k in range(n_layers):
            order = None if k % 2 == 0 else block_reversed_order(part)
            layers.append(MaskedAffine(part.dim, part.q_dims, hidden, order))
        return cls.build(part, layers, seed)

    @property
    def dim(self) -> int:
        return self.partition.dim

    @property
    def n_params(self) -> int:
        return self.params.size

    def _slices(self):
        out, start = [], 0
        for L in self.layers:
            out.append(slice(start, start + L.n_params))
            start += L.n_params
        return out

    def with_params(self, params: ArrayLike) -> "FlowModel":
        return FlowModel(self.partition, self.layers, params)

    def to_dict(self) -> dict:
        return {"partition": {"q_dims": self.partition.q_dims, "r_dims": self.partition.r_dims},
                "layers": [L.describe() for L in self.layers], "params": self.params.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FlowModel":
        part = Partition(int(d["partition"]["q_dims"]), int(d["partition"]["r_dims"]))
        return cls(part, tuple(layer_from_dict(L) for L in d["layers"]), np.asarray(d["params"], float))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "FlowModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _rows(fl: FlowModel, a: ArrayLike) -> tuple[NDArray, bool]:
    A = np.asarray(a, dtype=float)
    single = A.ndim == 1
    A = np.atleast_2d(A)
    if A.shape[1] != fl.dim:
        raise FlowError(f"input has {A.shape[1]} coordinates, flow expects {fl.dim}")
    return A, single


def _check_finite(a: NDArray) -> None:
    if not np.all(np.isfinite(a)):
        raise FlowError("non-finite value inside the flow")


def forward_batch(fl: FlowModel, z: ArrayLike) -> tuple[NDArray, NDArray]:
    """Latent rows to data rows with per-coordinate log-scales ``(n, D)``."""
    Z, _ = _rows(fl, z)
    ld = np.zeros_like(Z)
    x = Z
    for L, sl in zip(fl.layers, fl._slices()):
        x, l = L.forward(fl.params[sl], x)
        ld = ld + l
    _check_finite(x)
    return x, ld


def inverse_batch(fl: FlowModel, x: ArrayLike) -> tuple[NDArray, NDArray]:
    """Data rows to latent rows with per-coordinate inverse log-scales."""
    X, _ = _rows(fl, x)
    ld = np.zeros_like(X)
    u = X
    for L, sl in zip(reversed(fl.layers), reversed(fl._slices())):
        u, l, _ = L.inverse(fl.params[sl], u)
        ld = ld + l
    _check_finite(u)
    return u, ld


def forward(fl: FlowModel, z: ArrayLike):
    """``(x, log|det J_T(z)|)``; batched input gives arrays."""
    Z, single = _rows(fl, z)
    x, ld = forward_batch(fl, Z)
    tot = ld.sum(axis=1)
    return (x[0], float(tot[0])) if single else (x, tot)


def inverse(fl: FlowModel, x: ArrayLike):
    """``(z, log|det J_{T^-1}(x)|)``; batched input gives arrays."""
    X, single = _rows(fl, x)
    z, ld = inverse_batch(fl, X)
    tot = ld.sum(axis=1)
    return (z[0], float(tot[0])) if single else (z, tot)


def covariate_inverse(fl: FlowModel, s_data: ArrayLike) -> NDArray:
    """Latent covariates from data covariates; no outcome value is needed."""
    q = fl.partition.q_dims
    S = np.asarray(s_data, dtype=float)
    single = S.ndim <= 1
    S = S.reshape(-1, q)
    full = np.hstack([S, np.zeros((S.shape[0], fl.partition.r_dims))])
    z, _ = inverse_batch(fl, full)
    return z[0, :q] if single else z[:, :q]


def log_likelihood(fl: FlowModel, base: GaussianMixture, x: ArrayLike) -> NDArray:
    z, ld = inverse_batch(fl, x)
    return np.atleast_1d(log_pdf(base, z)) + ld.sum(axis=1)


def conditional_log_pdf(fl: FlowModel, base: GaussianMixture, s_data: ArrayLike, xi_data: ArrayLike) -> float | NDArray:
    """``log f(xi' | s')``: conditioned base density at the latent outcomes plus the outcome-block log-det.

    ``xi_data`` may be a single outcome vector or a matrix of rows for the same ``s_data``.
    """
    part = fl.partition
    s = np.atleast_1d(np.asarray(s_data, dtype=float))
    X = np.asarray(xi_data, dtype=float)
    single = X.ndim <= 1 and (X.size == part.r_dims)
    X = X.reshape(-1, part.r_dims)
    full = np.hstack([np.broadcast_to(s, (X.shape[0], s.size)), X])
    z, ld = inverse_batch(fl, full)
    zs = z[0, :part.q_dims]
    cond = condition(base, part, zs)
    val = np.atleast_1d(log_pdf(cond, z[:, part.q_dims:])) + ld[:, part.q_dims:].sum(axis=1)
    return float(val[0]) if single else val


def conditional_sample(fl: FlowModel, base: GaussianMixture, s_data: ArrayLike, n: int, seed=None) -> NDArray:
    """Outcome draws given data covariates through the latent conditioning pipeline."""
    if n < 1:
        raise FlowError("n must be positive")
    part = fl.partition
    zs = covariate_inverse(fl, s_data)
    cond = condition(base, part, zs)
    zx = sample(cond, n, seed)
    x, _ = forward_batch(fl, np.hstack([np.broadcast_to(zs, (n, part.q_dims)), zx]))
    return x[:, part.q_dims:]


# ---------------------------------------------------------------------------
# training


def _base_logpdf_grad(base: GaussianMixture, z: NDArray) -> tuple[NDArray, NDArray]:
    """``log f(z)`` and its gradient with respect to ``z`` for every row."""
    K = base.n_components
    n, D = z.shape
    logc = np.empty((n, K))
    grads = np.empty((K, n, D))
    with np.errstate(divide="ignore"):
        lw = np.log(base.weights)
    for k in range(K):
        L = np.linalg.cholesky(base.covs[k])
        diff = z - base.means[k]
        sol = np.linalg.solve(L, diff.T)
        logc[:, k] = lw[k] - 0.5 * (D * math.log(2 * math.pi) + np.sum(sol * sol, axis=0)) - np.sum(np.log(np.diag(L)))
        grads[k] = -np.linalg.solve(L.T, sol).T
    tot = logsumexp(logc, axis=1)
    r = np.exp(logc - tot[:, None])
    return tot, np.einsum("nk,knd->nd", r, grads)


def nll_and_grad(fl: FlowModel, base: GaussianMixture, x: ArrayLike, params: NDArray | None = None):
    """Average negative log-likelihood and its analytic parameter gradient."""
    p = fl.params if params is None else np.asarray(params, dtype=float)
    X, _ = _rows(fl, x)
    n = X.shape[0]
    slices = fl._slices()
    ys, caches = [X], []
    ldsum = np.zeros(n)
    u = X
    for L, sl in zip(reversed(fl.layers), reversed(slices)):
        u, ld, cache = L.inverse(p[sl], u)
        ys.append(u)
        caches.append(cache)
        ldsum += ld.sum(axis=1)
    _check_finite(u)
    lp, glp = _base_logpdf_grad(base, u)
    nll = -float(np.mean(lp + ldsum))
    grad = np.zeros_like(p)
    delta = -glp
    # walk back from the latent side: reversed layer k maps ys[k] to ys[k + 1]
    rev = list(zip(reversed(fl.layers), reversed(slices)))
    for k in range(len(rev) - 1, -1, -1):
        L, sl = rev[k]
        delta, g = L.backward(p[sl], ys[k], ys[k + 1], caches[k], delta)
        grad[sl] = g
    return nll, grad / n


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.01
    early_stop_patience: int = 30
    val_fraction: float = 0.2
    seed: int = 0
    gradient: str = "analytic"
    clip_norm: float = 10.0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise FlowError("val_fraction must lie in (0, 1)")
        if self.early_stop_patience < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise FlowError("invalid training schedule")
        if self.gradient != "analytic":
            raise FlowError("only analytic gradients are implemented")


@dataclass
class TrainResult:
    flow: FlowModel
    trace: list = field(default_factory=list)  # (epoch, train_nll, val_nll)
    best_epoch: int = 0
    initial_train_nll: float = math.nan
    final_train_nll: float = math.nan

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_nll", "val_nll"])
            for row in self.trace:
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def train_mle(fl: FlowModel, base: GaussianMixture, data, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Maximum likelihood training of the flow parameters against a fixed base.

    Plain minibatch gradient descent with gradient-norm clipping; the
    parameters with the best validation loss are kept. If those end up with
    a worse training loss than the initialization, the initialization is
    returned instead.
    """
    X = np.asarray(getattr(data, "rows", data), dtype=float)
    if base.dim != fl.dim or X.shape[1] != fl.dim:
        raise FlowError("flow, base and data dimensions differ")
    n = X.shape[0]
    if n < 2 * cfg.batch_size:
        raise FlowError(f"need at least {2 * cfg.batch_size} rows for batch size {cfg.batch_size}")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    if n_val < 1 or n_val >= n:
        raise FlowError("validation split is empty")
    Xv, Xt = X[perm[:n_val]], X[perm[n_val:]]
    p0 = fl.params.copy()
    train0 = nll_and_grad(fl, base, Xt, p0)[0]
    val0 = nll_and_grad(fl, base, Xv, p0)[0]
    trace = [(0, train0, val0)]
    p = p0.copy()
    best_p, best_val, best_epoch, stale = p0.copy(), val0, 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(Xt.shape[0])
        for start in range(0, Xt.shape[0], cfg.batch_size):
            batch = Xt[order[start:start + cfg.batch_size]]
            _, g = nll_and_grad(fl, base, batch, p)
            if not np.all(np.isfinite(g)):
                raise FlowError("gradient diverged")
            norm = float(np.linalg.norm(g))
            if norm > cfg.clip_norm:
                g = g * (cfg.clip_norm / norm)
            p = p - cfg.learning_rate * g
        tr = nll_and_grad(fl, base, Xt, p)[0]
        va = nll_and_grad(fl, base, Xv, p)[0]
        if not (math.isfinite(tr) and math.isfinite(va)):
            raise FlowError("training loss diverged")
        trace.append((epoch, tr, va))
        if va < best_val:
            best_p, best_val, best_epoch, stale = p.copy(), va, epoch, 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    final = nll_and_grad(fl, base, Xt, best_p)[0]
    if final > train0:
        best_p, final, best_epoch = p0, train0, 0
    return TrainResult(fl.with_params(best_p), trace, best_epoch, train0, final)
