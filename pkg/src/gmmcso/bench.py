"""Synthetic generators and end-to-end experiment runners.

Every runner takes an :class:`ExperimentConfig`, derives one RNG stream per
trial from ``(seed, trial index)`` and returns a list of :class:`ResultRow`.
A trial that raises is recorded as a status row and the batch continues.
"""

from __future__ import annotations

import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .dro import mean_cvar_objective, newsvendor_dro, newsvendor_fractile, portfolio_dro
from .flow import FlowModel, TrainConfig, conditional_log_pdf, conditional_sample, train_mle
from .gmm import Dataset, EmConfig, GaussianMixture, Partition, condition, log_pdf, sample, select_k_aic
from .multistage import sddp_solve, storage_problem

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class BenchError(ValueError):
    pass


EXPERIMENTS = ("inventory", "portfolio", "multistage", "conditioning-demo")

DEFAULT_METHODS = {
    "inventory": ("gmm", "saa"),
    "portfolio": ("gmm", "saa", "equal"),
    "multistage": ("independent", "gmm"),
    "conditioning-demo": ("gmm", "gmm-nf"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Configuration shared by all runners; fields irrelevant to an experiment are ignored."""

    experiment: str = "inventory"
    trials: int = 20
    train_size: int = 100
    test_size: int = 2000
    eps_grid: tuple[float, ...] = (0.01, 0.05, 0.1, 0.5, 1.0)
    k_candidates: tuple[int, ...] = (1, 2, 3, 4)
    seed: int = 0
    output: str | None = None
    methods: tuple[str, ...] = ()
    workers: int = 1
    # inventory
    q_dims: int = 1
    h: float = 10.0
    b: float = 2.0
    n_draws: int = 50
    val_fraction: float = 0.1
    # portfolio
    tau: float = 0.1
    eta_grid: tuple[float, ...] = (1.0, 3.0, 5.0, 7.0, 9.0)
    steps: int = 50
    n_assets: int = 5
    returns_csv: str | None = None
    sideinfo_csv: str | None = None
    scale_side: bool = True
    # multistage
    horizon: int = 4
    n_traj: int = 20
    rho: float = 0.9
    iters: int = 10
    cuts_max: int = 2000
    z1: float = 1.0
    n_eval: int = 20
    # flow
    flow_layers: int = 2
    flow_hidden: int = 16
    flow_epochs: int = 200
    flow_lr: float = 0.002

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise BenchError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.trials < 1:
            raise BenchError("trials must be at least 1")
        if self.experiment in ("inventory", "portfolio") and len(self.eps_grid) == 0:
            raise BenchError("eps grid must be nonempty for DRO runs")
        if any(e < 0 for e in self.eps_grid):
            raise BenchError("eps grid entries must be nonnegative")
        for name in ("eps_grid", "k_candidates", "methods", "eta_grid"):
            val = getattr(self, name)
            object.__setattr__(self, name, tuple(val) if not isinstance(val, str) else (val,))
        if not self.methods:
            object.__setattr__(self, "methods", DEFAULT_METHODS[self.experiment])

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BenchError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    """Read a TOML or JSON config file (chosen by suffix); keyword overrides win."""
    p = Path(path)
    text = p.read_text()
    d = json.loads(text) if p.suffix.lower() == ".json" else tomllib.loads(text)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


def trial_seed(master: int, trial: int) -> int:
    return int(np.random.SeedSequence(entropy=int(master), spawn_key=(int(trial),)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class ResultRow:
    method: str
    trial: int
    seed: int
    avg_loss: float
    p10: float
    p90: float
    wall_time: float
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.status == "ok" and not (self.p10 <= self.p90 or math.isnan(self.p10)):
            raise BenchError("percentiles out of order")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def key(self) -> tuple:
        """Everything except wall time, for reproducibility checks."""
        return (self.method, self.trial, self.seed, repr(self.avg_loss), repr(self.p10), repr(self.p90),
                self.status, json.dumps(self.extra, sort_keys=True))


RESULT_COLUMNS = ("method", "trial", "seed", "avg_loss", "p10", "p90", "wall_time", "status", "extra")


def loss_row(method: str, trial: int, seed: int, losses: ArrayLike, wall: float, **extra) -> ResultRow:
    L = np.asarray(losses, dtype=float)
    return ResultRow(method, trial, seed, float(L.mean()), float(np.percentile(L, 10)),
                     float(np.percentile(L, 90)), wall, "ok", extra)


def failed_row(method: str, trial: int, seed: int, exc: BaseException, wall: float) -> ResultRow:
    return ResultRow(method, trial, seed, math.nan, math.nan, math.nan, wall,
                     f"failed: {type(exc).__name__}: {exc}".replace("\n", " "))


def write_results(rows: Sequence[ResultRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r.method, r.trial, r.seed, repr(r.avg_loss), repr(r.p10), repr(r.p90),
                        repr(r.wall_time), r.status, json.dumps(r.extra, sort_keys=True)])


def read_results(path: str | Path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise BenchError(f"unexpected result columns in {path}")
        return [ResultRow(r["method"], int(r["trial"]), int(r["seed"]), float(r["avg_loss"]), float(r["p10"]),
                          float(r["p90"]), float(r["wall_time"]), r["status"], json.loads(r["extra"]))
                for r in reader]


def summarize(rows: Sequence[ResultRow]) -> dict:
    out: dict = {"methods": {}, "all_ok": all(r.ok for r in rows), "n_rows": len(rows)}
    for m in dict.fromkeys(r.method for r in rows):
        ok = [r for r in rows if r.method == m and r.ok]
        vals = np.array([r.avg_loss for r in ok])
        out["methods"][m] = {
            "n_ok": len(ok),
            "n_failed": sum(1 for r in rows if r.method == m and not r.ok),
            "mean_loss": float(vals.mean()) if ok else None,
            "se_loss": float(vals.std(ddof=1) / math.sqrt(len(ok))) if len(ok) > 1 else None,
            "mean_p10": float(np.mean([r.p10 for r in ok])) if ok else None,
            "mean_p90": float(np.mean([r.p90 for r in ok])) if ok else None,
            "mean_wall_time": float(np.mean([r.wall_time for r in ok])) if ok else None,
        }
    return out


def emit(rows: Sequence[ResultRow], output: str | Path) -> dict:
    """Write ``<output>.csv`` and ``<output>.json``; returns the summary."""
    base = Path(output)
    if base.suffix.lower() in (".csv", ".json"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    write_results(rows, base.with_suffix(".csv"))
    summ = summarize(rows)
    base.with_suffix(".json").write_text(json.dumps(summ, indent=2))
    return summ


# ---------------------------------------------------------------------------
# generators


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def inventory_demand(s: NDArray, rng: np.random.Generator, return_branch: bool = False):
    """Demand given covariates: ``0.3 sum(s) + d + 50`` or ``5 sum(s^2) + d + 42.5`` with equal odds."""
    S = np.atleast_2d(s)
    n = S.shape[0]
    branch = rng.random(n) < 0.5
    delta = rng.uniform(-2.0, 2.0, n)
    lin = 0.3 * S.sum(axis=1) + 50.0
    quad = 5.0 * np.sum(S * S, axis=1) + 42.5
    d = np.where(branch, lin, quad) + delta
    return (d, (~branch).astype(int)) if return_branch else d


def gen_inventory(q_dims: int, n: int, seed=None, return_branch: bool = False):
    """Covariates ``s ~ U(-2, 2)^Q`` and the two-branch demand; branch 0 is the linear one."""
    if q_dims < 1 or n < 1:
        raise BenchError("q_dims and n must be at least 1")
    rng = _rng(seed)
    S = rng.uniform(-2.0, 2.0, (n, q_dims))
    d, br = inventory_demand(S, rng, return_branch=True)
    cols = tuple(f"s{i + 1}" for i in range(q_dims)) + ("demand",)
    ds = Dataset(np.column_stack([S, d]), Partition(q_dims, 1), cols)
    return (ds, br) if return_branch else ds


YINYANG_OUTER = 1.0


def gen_yinyang(n: int, seed=None, return_label: bool = False):
    """Interlocking yin-yang stand-in on the unit disk.

    Class 0 lives on the upper half-annulus ``0.5 <= r <= 1`` (85%) and a disk
    of radius 0.15 at ``(0, -0.25)``; class 1 is its mirror image through the
    origin. Column 0 is the covariate, column 1 the outcome. ``n = 0`` gives
    an empty ``(0, 2)`` array.
    """
    rng = _rng(seed)
    label = (rng.random(n) < 0.5).astype(int)
    on_ring = rng.random(n) < 0.85
    r_ring = np.sqrt(rng.uniform(0.25, 1.0, n))
    th_ring = rng.uniform(0.0, math.pi, n)
    r_disk = 0.15 * np.sqrt(rng.random(n))
    th_disk = rng.uniform(0.0, 2 * math.pi, n)
    ring = np.column_stack([r_ring * np.cos(th_ring), r_ring * np.sin(th_ring)])
    disk = np.column_stack([r_disk * np.cos(th_disk), r_disk * np.sin(th_disk) - 0.25])
    pts = np.where(on_ring[:, None], ring, disk)
    pts = np.where(label[:, None] == 1, -pts, pts)
    if n == 0:
        pts = np.zeros((0, 2))
    if return_label:
        return pts, label
    return Dataset(pts, Partition(1, 1), ("x", "y")) if n > 0 else pts


def gen_markov_ar1(T: int, n: int, q_dims: int, rho: float, seed=None, z1: ArrayLike | None = None) -> NDArray:
    """Stationary Gaussian AR(1) trajectories ``(n, T, q_dims)``; ``z1`` pins the first stage."""
    if not abs(rho) < 1:
        raise BenchError("|rho| must be below 1")
    rng = _rng(seed)
    z = np.empty((n, T, q_dims))
    z[:, 0] = rng.normal(size=(n, q_dims)) if z1 is None else np.broadcast_to(np.asarray(z1, float), (n, q_dims))
    c = math.sqrt(1.0 - rho * rho)
    for t in range(1, T):
        z[:, t] = rho * z[:, t - 1] + c * rng.normal(size=(n, q_dims))
    return z


def storage_generation(z: ArrayLike, level: float = 10.0, spread: float = 3.0) -> NDArray:
    """Map a latent AR(1) path to nonnegative generation ``max(0, level + spread z)``."""
    return np.maximum(0.0, level + spread * np.asarray(z, dtype=float))


def gen_gm_market(n: int, n_assets: int = 5, seed=None) -> tuple[NDArray, NDArray]:
    """Side information and returns from a known two-regime market.

    A scalar signal ``s ~ N(0, 1)`` tilts the regime odds through a logistic
    link; regime 1 favors the even-indexed assets, regime 0 the others.
    """
    rng = _rng(seed)
    s = rng.normal(size=n)
    p1 = 1.0 / (1.0 + np.exp(-2.5 * s))
    reg = rng.random(n) < p1
    tilt = np.where(np.arange(n_assets) % 2 == 0, 1.0, -1.0)
    mu = 0.002 + 0.01 * np.where(reg[:, None], tilt, -tilt)
    vol = 0.01 + 0.004 * np.arange(n_assets) / max(n_assets - 1, 1)
    rets = mu + vol * rng.normal(size=(n, n_assets))
    return s[:, None], rets


# ---------------------------------------------------------------------------
# conditional models


class GmmConditional:
    """Conditional sampler from a joint mixture."""

    def __init__(self, mixture: GaussianMixture, part: Partition):
        self.mixture, self.part = mixture, part

    def draw(self, s: ArrayLike, n: int, rng) -> NDArray:
        return sample(condition(self.mixture, self.part, s), n, rng)

    def log_density(self, s: ArrayLike, xi: ArrayLike) -> NDArray:
        return np.atleast_1d(log_pdf(condition(self.mixture, self.part, s), np.atleast_2d(xi)))


class FlowConditional:
    """Conditional sampler from a separable flow and its base mixture."""

    def __init__(self, flow: FlowModel, base: GaussianMixture):
        self.flow, self.base = flow, base

    def draw(self, s: ArrayLike, n: int, rng) -> NDArray:
        return conditional_sample(self.flow, self.base, s, n, rng)

    def log_density(self, s: ArrayLike, xi: ArrayLike) -> NDArray:
        return np.atleast_1d(conditional_log_pdf(self.flow, self.base, s, xi))


def fit_gmm(rows: NDArray, part: Partition, k_candidates: Sequence[int], seed: int) -> GmmConditional:
    ks = [k for k in k_candidates if k <= rows.shape[0]]
    sel = select_k_aic(rows, ks, EmConfig(seed=seed))
    return GmmConditional(sel.mixture, part)


def fit_flow(rows: NDArray, part: Partition, cfg: ExperimentConfig, seed: int) -> FlowConditional:
    """AIC-selected base on raw data, then flow training against that fixed base."""
    base = fit_gmm(rows, part, cfg.k_candidates, seed).mixture
    fl = FlowModel.default(part, cfg.flow_layers, cfg.flow_hidden, seed)
    batch = max(1, min(64, rows.shape[0] // 2))
    res = train_mle(fl, base, rows, TrainConfig(max_epochs=cfg.flow_epochs, batch_size=batch,
                                                learning_rate=cfg.flow_lr, seed=seed))
    return FlowConditional(res.flow, base)


# ---------------------------------------------------------------------------
# inventory


def newsvendor_cost(q: ArrayLike, d: ArrayLike, h: float, b: float) -> NDArray:
    q, d = np.asarray(q, float), np.asarray(d, float)
    return h * np.maximum(q - d, 0.0) + b * np.maximum(d - q, 0.0)


def contextual_orders(model, S: NDArray, eps: float, cfg: ExperimentConfig, rng) -> NDArray:
    """Order quantity per covariate row: conditional draws, then the DRO newsvendor."""
    qs = np.empty(S.shape[0])
    for i, s in enumerate(S):
        draws = model.draw(s, cfg.n_draws, rng)[:, 0]
        q, rep = newsvendor_dro(draws, cfg.h, cfg.b, eps)
        if not rep.ok:
            raise BenchError(f"newsvendor solve failed: {rep.status} {rep.message}")
        qs[i] = q
    return qs


def tune_eps(cfg: ExperimentConfig, data: Dataset, model=None, seed: int | None = None) -> float:
    """Hold-out grid search for the radius; ties go to the smaller value.

    A share ``val_fraction`` of the rows is reserved for validation; the
    model is fitted on the rest unless one is supplied. Each grid value is
    scored by the average newsvendor cost at the validation outcomes, with
    the same conditional draws reused across the grid.
    """
    grid = sorted(set(float(e) for e in cfg.eps_grid))
    if not grid:
        raise BenchError("empty eps grid")
    if len(grid) == 1:
        return grid[0]
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n = data.rows.shape[0]
    n_val = max(1, int(round(cfg.val_fraction * n)))
    if n_val >= n:
        raise BenchError("data too small to split off a validation set")
    perm = rng.permutation(n)
    val, fit_rows = data.rows[perm[:n_val]], data.rows[perm[n_val:]]
    part = data.partition
    if model is None:
        model = fit_gmm(fit_rows, part, cfg.k_candidates, seed)
    draws = [model.draw(r[:part.q_dims], cfg.n_draws, rng)[:, 0] for r in val]
    scores = []
    for eps in grid:
        qs = []
        for d in draws:
            q, rep = newsvendor_dro(d, cfg.h, cfg.b, eps)
            if not rep.ok:
                raise BenchError(f"newsvendor solve failed: {rep.status}")
            qs.append(q)
        scores.append(float(np.mean(newsvendor_cost(qs, val[:, part.q_dims], cfg.h, cfg.b))))
    return grid[min(range(len(grid)), key=lambda i: (scores[i], grid[i]))]


def _inventory_trial(cfg: ExperimentConfig, i: int) -> list[ResultRow]:
    seed = trial_seed(cfg.seed, i)
    rng = np.random.default_rng(seed)
    train = gen_inventory(cfg.q_dims, cfg.train_size, rng)
    test = gen_inventory(cfg.q_dims, cfg.test_size, rng)
    rows = []
    for m in cfg.methods:
        t0 = time.perf_counter()
        mrng = np.random.default_rng([seed, len(rows)])
        try:
            if m == "saa":
                q = newsvendor_fractile(train.xi[:, 0], cfg.h, cfg.b)
                losses = newsvendor_cost(q, test.xi[:, 0], cfg.h, cfg.b)
                extra = {"q": q}
            elif m in ("gmm", "gmm-nf"):
                if m == "gmm":
                    model = fit_gmm(train.rows, train.partition, cfg.k_candidates, seed)
                    extra = {"k": model.mixture.n_components}
                else:
                    model = fit_flow(train.rows, train.partition, cfg, seed)
                    extra = {"k": model.base.n_components}
                eps = tune_eps(cfg, train, None if m == "gmm" else model, seed)
                qs = contextual_orders(model, test.s, eps, cfg, mrng)
                losses = newsvendor_cost(qs, test.xi[:, 0], cfg.h, cfg.b)
                extra["eps"] = eps
            else:
                raise BenchError(f"unknown inventory method {m!r}")
            rows.append(loss_row(m, i, seed, losses, time.perf_counter() - t0, **extra))
        except Exception as exc:  # recorded, batch continues
            rows.append(failed_row(m, i, seed, exc, time.perf_counter() - t0))
    return rows


def _run_trials(cfg: ExperimentConfig, fn: Callable[[ExperimentConfig, int], list[ResultRow]]) -> list[ResultRow]:
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            chunks = list(pool.map(fn, [cfg] * cfg.trials, range(cfg.trials)))
    else:
        chunks = [fn(cfg, i) for i in range(cfg.trials)]
    return [r for c in chunks for r in c]


def run_inventory(cfg: ExperimentConfig) -> list[ResultRow]:
    """Contextual newsvendor with ``h``/``b`` costs against an unconditional SAA baseline."""
    return _run_trials(cfg, _inventory_trial)


# ---------------------------------------------------------------------------
# portfolio


def read_dated_csv(path: str | Path) -> tuple[list[str], list[str], NDArray]:
    """First column holds dates, the rest numeric values; returns ``(dates, columns, values)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise BenchError(f"{path}: need a date column and at least one value column")
        dates, vals = [], []
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise BenchError(f"{path}:{ln}: expected {len(header)} cells")
            try:
                vals.append([float(c) for c in row[1:]])
            except ValueError:
                raise BenchError(f"{path}:{ln}: non-numeric cell") from None
            dates.append(row[0])
    if not dates:
        raise BenchError(f"{path}: no rows")
    return dates, header[1:], np.array(vals)


def write_dated_csv(path: str | Path, dates: Sequence[str], columns: Sequence[str], values: ArrayLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *columns])
        for d, row in zip(dates, np.atleast_2d(values)):
            w.writerow([d, *(repr(float(v)) for v in row)])


def align_dated(returns_csv: str | Path, sideinfo_csv: str | Path) -> tuple[list[str], NDArray, NDArray]:
    rd, _, R = read_dated_csv(returns_csv)
    sd, _, S = read_dated_csv(sideinfo_csv)
    pos = {d: i for i, d in enumerate(sd)}
    missing = [d for d in rd if d not in pos]
    if missing:
        raise BenchError(f"side information missing for {len(missing)} dates, first {missing[0]!r}")
    return rd, S[[pos[d] for d in rd]], R


def plugin_bandwidth(S: ArrayLike) -> NDArray:
    """Per-covariate normal-reference bandwidth ``1.06 sigma n^(-1/5)``; zero spread maps to 1."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    sd = S.std(axis=0, ddof=1) if S.shape[0] > 1 else np.zeros(S.shape[1])
    bw = 1.06 * sd * S.shape[0] ** (-0.2)
    return np.where(bw > 0, bw, 1.0)


def scale_side_information(S: ArrayLike, bandwidth: ArrayLike | None = None) -> NDArray:
    """Divide each covariate by its bandwidth."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    bw = plugin_bandwidth(S) if bandwidth is None else np.asarray(bandwidth, dtype=float)
    return S / bw


def cvar(losses: ArrayLike, tau: float) -> float:
    """Empirical CVaR of the worst ``tau`` share of ``losses``."""
    L = np.asarray(losses, dtype=float)
    return mean_cvar_objective([1.0], -L[:, None], tau, 0.0)


def portfolio_metrics(realized: ArrayLike, tau: float, eta: float) -> dict:
    r = np.asarray(realized, dtype=float)
    sd = float(r.std(ddof=1)) if r.size > 1 else 0.0
    c = cvar(-r, tau)
    return {"mean_return": float(r.mean()), "cvar": c,
            "sharpe": float(r.mean() / sd) if sd > 1e-12 else math.nan,
            "objective": c - eta * float(r.mean())}


def rolling_portfolio(S: NDArray, R: NDArray, cfg: ExperimentConfig, eta: float, method: str, seed: int) -> NDArray:
    """Realized returns of one method over the rolling horizon."""
    n, D = R.shape
    W = cfg.train_size
    steps = min(cfg.steps, n - W)
    if steps < 1:
        raise BenchError(f"need more than {W} dated rows for a rolling window of {W}")
    rng = np.random.default_rng(seed)
    eps = min(cfg.eps_grid) if cfg.eps_grid else 0.0
    out = np.empty(steps)
    for k in range(steps):
        t = W + k
        if method == "equal" or D == 1:
            x = np.full(D, 1.0 / D)
        elif method == "saa":
            x = portfolio_dro(R[t - W:t], cfg.tau, eta, eps).weights
        elif method == "gmm":
            Sw = S[t - W:t + 1]
            if cfg.scale_side:
                Sw = scale_side_information(Sw, plugin_bandwidth(Sw[:-1]))
            part = Partition(S.shape[1], D)
            model = fit_gmm(np.hstack([Sw[:-1], R[t - W:t]]), part, cfg.k_candidates, seed + k)
            x = portfolio_dro(model.draw(Sw[-1], cfg.n_draws, rng), cfg.tau, eta, eps).weights
        else:
            raise BenchError(f"unknown portfolio method {method!r}")
        out[k] = float(R[t] @ x)
    return out


def run_portfolio(cfg: ExperimentConfig, returns_csv: str | Path | None = None,
                  sideinfo_csv: str | Path | None = None) -> list[ResultRow]:
    """Rolling-horizon mean-CVaR over ingested CSVs; one trial, one row per (method, eta).

    ``avg_loss`` is the realized mean-CVaR objective; percentiles are of the
    realized per-step losses ``-r^T x``. The radius used is the smallest grid value.
    """
    rc = returns_csv or cfg.returns_csv
    sc = sideinfo_csv or cfg.sideinfo_csv
    if rc is None or sc is None:
        raise BenchError("portfolio runs need returns and side-information CSVs")
    _, S, R = align_dated(rc, sc)
    rows = []
    for eta in cfg.eta_grid:
        for m in cfg.methods:
            t0 = time.perf_counter()
            try:
                real = rolling_portfolio(S, R, cfg, eta, m, cfg.seed)
                met = portfolio_metrics(real, cfg.tau, eta)
                L = -real
                rows.append(ResultRow(m, 0, cfg.seed, met["objective"], float(np.percentile(L, 10)),
                                      float(np.percentile(L, 90)), time.perf_counter() - t0, "ok",
                                      {"eta": eta, **met}))
            except Exception as exc:
                row = failed_row(m, 0, cfg.seed, exc, time.perf_counter() - t0)
                rows.append(replace(row, extra={"eta": eta}))
    return rows


# ---------------------------------------------------------------------------
# multistage


def _multistage_trial(cfg: ExperimentConfig, i: int) -> list[ResultRow]:
    seed = trial_seed(cfg.seed, i)
    rng = np.random.default_rng(seed)
    T = cfg.horizon
    train = storage_generation(gen_markov_ar1(T, cfg.n_traj, 1, cfg.rho, rng))
    xi1 = float(storage_generation(cfg.z1))
    test = storage_generation(gen_markov_ar1(T, cfg.test_size, 1, cfg.rho, rng, z1=cfg.z1))
    prob = storage_problem(train, xi1)
    rows = []
    for m in cfg.methods:
        t0 = time.perf_counter()
        try:
            if m == "independent":
                joints, extra = None, {}
            elif m == "gmm":
                pairs = np.column_stack([train[:, :-1, 0].ravel(), train[:, 1:, 0].ravel()])
                sel = select_k_aic(pairs, [k for k in cfg.k_candidates if k <= pairs.shape[0]], EmConfig(seed=seed))
                joints, extra = sel.mixture, {"k": sel.k}
            else:
                raise BenchError(f"unknown multistage method {m!r}")
            res = sddp_solve(prob, joints, iters=cfg.iters, seed=seed, cuts_max=cfg.cuts_max, n_eval=cfg.n_eval)
            costs = res.policy.simulate(test)
            rows.append(loss_row(m, i, seed, costs, time.perf_counter() - t0, lower_bound=res.lower_bound,
                                 upper_bound=res.ub, ub_se=res.ub_se, lb_trace=res.lb_trace.tolist(), **extra))
        except Exception as exc:
            rows.append(failed_row(m, i, seed, exc, time.perf_counter() - t0))
    return rows


def run_multistage(cfg: ExperimentConfig) -> list[ResultRow]:
    """Storage toy on AR(1) generation: SDDP with independent versus mixture transition weights.

    ``avg_loss`` is the out-of-sample mean cost over ``test_size`` fresh paths
    started from ``z1``; both methods see the same paths.
    """
    return _run_trials(cfg, _multistage_trial)


# ---------------------------------------------------------------------------
# conditioning demo


def _demo_trial(cfg: ExperimentConfig, i: int) -> list[ResultRow]:
    seed = trial_seed(cfg.seed, i)
    rng = np.random.default_rng(seed)
    train = gen_yinyang(cfg.train_size, rng)
    test = gen_yinyang(cfg.test_size, rng)
    rows = []
    for m in cfg.methods:
        t0 = time.perf_counter()
        try:
            if m == "gmm":
                model = fit_gmm(train.rows, train.partition, cfg.k_candidates, seed)
                nll = -np.array([model.log_density(r[:1], r[1:])[0] for r in test.rows])
            elif m == "gmm-nf":
                model = fit_flow(train.rows, train.partition, cfg, seed)
                nll = -np.array([model.log_density(r[:1], r[1:])[0] for r in test.rows])
            else:
                raise BenchError(f"unknown demo method {m!r}")
            rows.append(loss_row(m, i, seed, nll, time.perf_counter() - t0))
        except Exception as exc:
            rows.append(failed_row(m, i, seed, exc, time.perf_counter() - t0))
    return rows


def run_conditioning_demo(cfg: ExperimentConfig) -> list[ResultRow]:
    """Conditional negative log-likelihood on the yin-yang stand-in; lower is better."""
    return _run_trials(cfg, _demo_trial)


RUNNERS = {"inventory": run_inventory, "multistage": run_multistage, "conditioning-demo": run_conditioning_demo,
           "portfolio": run_portfolio}


def run_experiment(cfg: ExperimentConfig) -> list[ResultRow]:
    return RUNNERS[cfg.experiment](cfg)
