"""Command-line entry point: ``gmmcso <subcommand> ...``.

Subcommands print a JSON document on stdout. ``bench`` writes a CSV of
result rows and a JSON summary and exits nonzero if any trial failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .dro import DEFAULT_TOL, build_newsvendor_socp, newsvendor_dro, portfolio_dro
from .flow import FlowModel, TrainConfig, train_mle
from .gmm import (EmConfig, Partition, condition, load_mixture, mixture_moments, read_dataset, sample,
                  save_mixture, select_k_aic)
from .multistage import read_trajectories, sddp_solve, storage_problem

log = logging.getLogger("gmmcso")


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _read_matrix(path: str) -> np.ndarray:
    """Headered numeric CSV as a 2-D array."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError:
        raise SystemExit(f"{path}: non-numeric cell") from None
    if data.size == 0:
        raise SystemExit(f"{path}: no data rows")
    return data


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text)
    print(text)


def cmd_fit(args) -> int:
    ds = read_dataset(args.data, args.manifest)
    sel = select_k_aic(ds.rows, _ints(args.k), EmConfig(seed=args.seed))
    save_mixture(sel.mixture, args.out)
    result = {"k": sel.k, "aic": {str(k): v for k, v in sel.table.items()},
              "q_dims": ds.partition.q_dims, "r_dims": ds.partition.r_dims, "mixture": args.out}
    if args.flow_out:
        fl = FlowModel.default(ds.partition, args.flow_layers, args.flow_hidden, args.seed)
        res = train_mle(fl, sel.mixture, ds.rows, TrainConfig(max_epochs=args.epochs, batch_size=args.batch_size,
                                                              learning_rate=args.lr, seed=args.seed))
        res.flow.save(args.flow_out)
        if args.trace_out:
            res.write_trace(args.trace_out)
        result.update(flow=args.flow_out, initial_nll=res.initial_train_nll, final_nll=res.final_train_nll,
                      best_epoch=res.best_epoch)
    _emit(result, None)
    return 0


def cmd_condition(args) -> int:
    m = load_mixture(args.mixture)
    s = _floats(args.s)
    part = Partition(len(s), m.dim - len(s))
    cond = condition(m, part, s)
    mean, cov = mixture_moments(cond)
    out = {"conditional": cond.to_dict(), "mean": mean.tolist(), "cov": cov.tolist()}
    if args.samples:
        draws = sample(cond, args.samples, args.seed)
        if args.samples_out:
            with open(args.samples_out, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"xi{j + 1}" for j in range(part.r_dims)])
                w.writerows([[repr(float(v)) for v in row] for row in draws])
        else:
            out["samples"] = draws.tolist()
    _emit(out, args.out)
    return 0


def _demand_samples(args) -> np.ndarray:
    if args.samples:
        return _read_matrix(args.samples)[:, -1]
    if args.mixture and args.s:
        m = load_mixture(args.mixture)
        s = _floats(args.s)
        return sample(condition(m, Partition(len(s), m.dim - len(s)), s), args.n_draws, args.seed)[:, 0]
    raise SystemExit("give --samples, or --mixture together with --s")


def cmd_newsvendor(args) -> int:
    xi = _demand_samples(args)
    if args.dump_program:
        Path(args.dump_program).write_text(build_newsvendor_socp(xi, args.h, args.b, args.eps).to_json())
    q, rep = newsvendor_dro(xi, args.h, args.b, args.eps, args.solver_tol)
    _emit({"q": q, "objective": rep.objective, "status": rep.status, "gap": rep.gap, "residual": rep.residual,
           "iterations": rep.iterations, "wall_time": rep.wall_time, "backend": rep.backend}, args.out)
    return 0 if rep.ok else 1


def cmd_portfolio(args) -> int:
    R = _read_matrix(args.returns)
    sol = portfolio_dro(R, args.tau, args.eta, args.eps, args.solver_tol)
    rep = sol.report
    _emit({"weights": sol.weights.tolist(), "beta": sol.beta, "objective": rep.objective, "status": rep.status,
           "gap": rep.gap, "wall_time": rep.wall_time}, args.out)
    return 0 if rep.ok else 1


def cmd_sddp(args) -> int:
    traj = read_trajectories(args.trajectories)
    if args.horizon is not None:
        if args.horizon > traj.shape[1]:
            raise SystemExit(f"trajectories have only {traj.shape[1]} stages")
        traj = traj[:, :args.horizon]
    xi1 = float(traj[:, 0, 0].mean()) if args.xi1 is None else args.xi1
    prob = storage_problem(traj, xi1)
    joints = None
    if args.joint:
        joints = load_mixture(args.joint)
    elif args.gmm:
        pairs = np.column_stack([traj[:, :-1].reshape(-1, traj.shape[2]), traj[:, 1:].reshape(-1, traj.shape[2])])
        joints = select_k_aic(pairs, _ints(args.k), EmConfig(seed=args.seed)).mixture
    res = sddp_solve(prob, joints, iters=args.iters, seed=args.seed, cuts_max=args.cuts_max, n_eval=args.n_eval)
    if args.policy_out:
        Path(args.policy_out).write_text(res.policy.to_json())
    _emit({"lower_bound": res.lower_bound, "upper_bound": res.ub, "ub_mean": res.ub_mean, "ub_se": res.ub_se,
           "lb_trace": res.lb_trace.tolist(), "wall_time": res.wall_time}, args.out)
    return 0


def cmd_bench(args) -> int:
    overrides = {"experiment": args.experiment, "trials": args.trials, "seed": args.seed, "output": args.output}
    if args.config:
        cfg = bench.load_config(args.config, **overrides)
    else:
        cfg = bench.ExperimentConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    rows = bench.run_experiment(cfg)
    output = cfg.output or f"{cfg.experiment}_results"
    summ = bench.emit(rows, output)
    print(json.dumps(summ, indent=2))
    return 0 if summ["all_ok"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmmcso", description="Contextual stochastic optimization with Gaussian mixtures.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a joint mixture (AIC over K) and optionally a flow")
    f.add_argument("--data", required=True, help="headered CSV")
    f.add_argument("--manifest", required=True, help="JSON listing covariates and outcomes columns")
    f.add_argument("--k", default="1,2,3,4", help="comma-separated K candidates")
    f.add_argument("--out", required=True, help="mixture JSON")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--flow-out", help="also train a flow and write it here")
    f.add_argument("--trace-out", help="CSV loss trace for the flow")
    f.add_argument("--flow-layers", type=int, default=2)
    f.add_argument("--flow-hidden", type=int, default=16)
    f.add_argument("--epochs", type=int, default=200)
    f.add_argument("--batch-size", type=int, default=64)
    f.add_argument("--lr", type=float, default=0.002)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("condition", help="condition a joint mixture on covariates")
    c.add_argument("--mixture", required=True)
    c.add_argument("--s", required=True, help="comma-separated covariate values (leading coordinates)")
    c.add_argument("--samples", type=int, default=0, help="number of conditional draws")
    c.add_argument("--samples-out", help="CSV for the draws")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_condition)

    n = sub.add_parser("solve-newsvendor", help="Wasserstein-robust newsvendor")
    n.add_argument("--samples", help="CSV whose last column holds demands")
    n.add_argument("--mixture", help="joint mixture to draw conditional demands from")
    n.add_argument("--s", help="covariates for --mixture")
    n.add_argument("--n-draws", type=int, default=100)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--eps", type=float, default=0.0)
    n.add_argument("--h", type=float, default=10.0)
    n.add_argument("--b", type=float, default=2.0)
    n.add_argument("--solver-tol", type=float, default=DEFAULT_TOL)
    n.add_argument("--dump-program", help="write the conic program as JSON")
    n.add_argument("--out")
    n.set_defaults(func=cmd_newsvendor)

    pf = sub.add_parser("solve-portfolio", help="Wasserstein-robust mean-CVaR portfolio")
    pf.add_argument("--returns", required=True, help="headered CSV, one column per asset")
    pf.add_argument("--tau", type=float, default=0.1)
    pf.add_argument("--eta", type=float, default=1.0)
    pf.add_argument("--eps", type=float, default=0.0)
    pf.add_argument("--solver-tol", type=float, default=DEFAULT_TOL)
    pf.add_argument("--out")
    pf.set_defaults(func=cmd_portfolio)

    s = sub.add_parser("sddp", help="SDDP on the storage toy from trajectory CSV")
    s.add_argument("--trajectories", required=True)
    s.add_argument("--xi1", type=float, help="first-stage generation (default: sample mean)")
    s.add_argument("--horizon", type=int)
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--cuts-max", type=int, default=2000)
    s.add_argument("--n-eval", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--joint", help="mixture JSON over consecutive stage pairs")
    g.add_argument("--gmm", action="store_true", help="fit the pair mixture by AIC")
    s.add_argument("--k", default="1,2,3")
    s.add_argument("--policy-out")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sddp)

    b = sub.add_parser("bench", help="run an experiment from a TOML/JSON config")
    b.add_argument("--config")
    b.add_argument("--experiment", choices=bench.EXPERIMENTS)
    b.add_argument("--trials", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--output", help="path prefix for the CSV and JSON summary")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return int(args.func(args))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
