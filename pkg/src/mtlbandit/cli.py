"""Command-line driver: ``mtlbandit {train,eval,decomp-check,bandit-sim,report}``.

Exit codes: 0 success, 1 tolerance failure, 2 usage or configuration error.
The default output directory is taken from ``MTLBANDIT_OUT`` (else ``runs``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bandit as bandits
from .config import load_config
from .decomp import neural_check, quadratic_check
from .influence import InfluenceMatrix, block_summary, read_matrix_csv, write_matrix_csv
from .reporting import write_gap_table, write_influence_long, write_regret_csv
from .tasks import ConfigurationError, TaskRegistry
from .trainer import EvalReport, evaluate_suite, load_checkpoint, save_checkpoint, train

OUT_ENV = "MTLBANDIT_OUT"
TOLERANCE = {"quadratic": 1e-9, "neural": 0.05}


class UsageError(Exception):
    pass


def _out_dir(arg: str | None, fallback: str | None, name: str) -> Path:
    path = Path(arg or fallback or Path(os.environ.get(OUT_ENV, "runs")) / name)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    return path


def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2) + "\n")


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "budget": args.budget}
    exp = load_config(args.config, overrides)
    cfg = exp.train
    out = _out_dir(args.out, exp.out_dir, "train")
    result = train(cfg)
    save_checkpoint(out / "checkpoint.json", cfg, result)
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in result.metrics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    mdir = out / "matrices"
    mdir.mkdir(exist_ok=True)
    for old in mdir.glob("window_*.csv"):
        old.unlink()
    names = cfg.registry.names
    for k, M in enumerate(result.matrices, 1):
        write_matrix_csv(mdir / f"window_{k:05d}.csv", M.values, names)
    write_matrix_csv(out / "W.csv", result.avg_influence.W, names)
    report = result.report.to_dict() if result.report is not None else None
    _dump_json(out / "report.json", report)
    summary = block_summary(result.avg_influence.W, cfg.registry)
    print(f"steps={result.steps} windows={len(result.matrices)} out={out}")
    if result.report is not None:
        print(f"total_gap={result.report.total_gap:.6f} " + " ".join(f"{k}={v:.4f}" for k, v in result.report.gaps.items()))
    print(f"intra_mean_abs={summary['intra_mean_abs']:.6f} inter_mean_abs={summary['inter_mean_abs']:.6f}")
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    registry = ck.registry
    if args.config:
        cfg_reg = load_config(args.config).train.registry
        if cfg_reg != registry:
            raise UsageError(f"config tasks {cfg_reg.names} do not match checkpoint tasks {registry.names}")
    sched = ck.config.get("schedule", "model")
    method = args.method or (f"bandit-{ck.config.get('algorithm')}" if sched == "bandit" else sched)
    report = evaluate_suite(ck.params, registry, args.n, args.seed, method=method)
    reports = [report]
    if args.baseline:
        base = EvalReport.from_dict(json.loads(Path(args.baseline).read_text()))
        if list(base.gaps) != list(report.gaps):
            raise UsageError(f"baseline tasks {list(base.gaps)} do not match {list(report.gaps)}")
        if base.method == report.method:
            base.method = f"{base.method} (baseline)"
        report = report.with_gain(base)
        reports = [report, base]
    out = _out_dir(args.out, None, "eval")
    _dump_json(out / "eval_report.json", report.to_dict())
    write_gap_table(out / "gaps.csv", reports, reference=report.method if args.baseline else None)
    print(f"total_gap={report.total_gap:.6f}" + (f" gain={report.total_gain:.6f}" if args.baseline else ""))
    return 0


def cmd_decomp_check(args) -> int:
    if args.mode == "quadratic":
        rep = quadratic_check(args.dim, args.optimizer, n_windows=args.windows or 24, seed=args.seed)
    else:
        rep = neural_check(optimizer=args.optimizer, n_windows=args.windows or 50, seed=args.seed)
    print("window,task,delta_loss,a,b,c,residual,relative_residual")
    for r in rep.records:
        print(f"{r.window},{r.task},{r.delta_loss:.6e},{r.a:.6e},{r.b:.6e},{r.c:.6e},{r.residual:.3e},{r.relative:.3e}")
    tol = TOLERANCE[args.mode]
    ok = rep.passed(tol)
    stat = rep.max_residual if args.mode == "quadratic" else rep.median_relative
    label = "max_residual" if args.mode == "quadratic" else "median_relative_residual"
    print(f"{label}={stat:.3e} tolerance={tol:g} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_bandit_sim(args) -> int:
    env = bandits.parse_env(args.env)
    seeds = list(range(args.seed, args.seed + args.seeds))
    regrets, rates, means = [], [], []
    for s in seeds:
        # played-arm-only feedback makes Exp3 importance weight its rewards
        sampler = bandits.make_sampler(args.alg, env.n_arms, horizon=args.horizon,
                                       feedback="partial" if args.feedback == "bandit" else "full",
                                       discount=args.discount)
        tr = bandits.simulate(sampler, env, args.horizon, np.random.default_rng(s), feedback=args.feedback)
        regrets.append(tr.regret)
        rates.append(tr.best_arm_rate(min(1000, args.horizon)))
        means.append(float(tr.rewards.mean()))
    out = _out_dir(args.out, None, "bandit-sim")
    write_regret_csv(out / f"regret_{args.alg}.csv", np.array(regrets), seeds)
    print(f"alg={args.alg} env={args.env} horizon={args.horizon} seeds={len(seeds)} "
          f"mean_final_regret={np.mean([r[-1] for r in regrets]):.6f} "
          f"median_best_arm_rate_last1000={np.median(rates):.6f} mean_reward={np.mean(means):.6f}")
    return 0


def _load_run(run: Path):
    ck = load_checkpoint(run / "checkpoint.json")
    report = json.loads((run / "report.json").read_text())
    W, names = read_matrix_csv(run / "W.csv")
    mats = []
    for k, p in enumerate(sorted((run / "matrices").glob("window_*.csv")), 1):
        vals, _ = read_matrix_csv(p)
        mats.append(InfluenceMatrix(vals, k, k, names))
    return ck.registry, report, W, mats


def cmd_report(args) -> int:
    runs = [Path(r) for r in args.runs]
    loaded = []
    for run in runs:
        try:
            loaded.append(_load_run(run))
        except OSError as exc:
            raise UsageError(f"cannot read run {run}: {exc.strerror or exc}") from None
    registry: TaskRegistry = loaded[0][0]
    for run, (reg, *_) in zip(runs, loaded):
        if reg != registry:
            raise UsageError(f"run {run} has tasks {reg.names}, expected {registry.names}")
    out = _out_dir(args.out, None, "report")
    names = registry.names
    W = np.mean([w for _, _, w, _ in loaded], axis=0)
    write_matrix_csv(out / "W.csv", W, names)
    write_influence_long(out / "influence_long.csv", {run.name: mats for run, (_, _, _, mats) in zip(runs, loaded)})
    reports = []
    for run, (_, rep, _, _) in zip(runs, loaded):
        if rep is not None:
            r = EvalReport.from_dict(rep)
            r.method = run.name if len(runs) > 1 else r.method
            reports.append(r)
    if reports:
        write_gap_table(out / "gaps.csv", reports, reference=reports[0].method if len(reports) > 1 else None)
    summary = block_summary(W, registry)
    line = f"intra_mean_abs={summary['intra_mean_abs']:.6f} inter_mean_abs={summary['inter_mean_abs']:.6f}"
    (out / "summary.txt").write_text(line + "\n")
    print(line)
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtlbandit", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train with a task schedule",
                       description="Writes checkpoint.json, metrics.jsonl (one record per window), "
                                   "matrices/window_NNNNN.csv, W.csv and report.json into the output directory.")
    t.add_argument("config", help="experiment config file (INI)")
    t.add_argument("--seed", type=int, help="root seed (overrides [schedule] seed)")
    t.add_argument("--budget", type=float, help="total weighted-step budget (overrides [budget] total)")
    t.add_argument("--out", help="output directory (overrides [output] dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against exact oracles",
                       description="Writes eval_report.json and gaps.csv (tasks x methods, Total Gap row, "
                                   "and a 'Gain by' row when --baseline is given).")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="config whose tasks must match the checkpoint")
    e.add_argument("--n", type=int, default=1000, help="evaluation instances per task")
    e.add_argument("--seed", type=int, default=2024, help="evaluation set seed")
    e.add_argument("--baseline", help="report JSON of a baseline method")
    e.add_argument("--method", help="method label for this checkpoint")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decomp-check", help="verify the loss-change attribution",
                       description="Prints one line per window and task; exits 1 if the residual tolerance "
                                   "is exceeded (1e-9 quadratic, 5% median relative for neural).")
    d.add_argument("--mode", choices=("quadratic", "neural"), default="quadratic")
    d.add_argument("--optimizer", choices=("gd", "adam"), default="gd")
    d.add_argument("--dim", type=int, default=10, help="quadratic dimension")
    d.add_argument("--windows", type=int)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_decomp_check)

    b = sub.add_parser("bandit-sim", help="simulate a bandit on a synthetic environment",
                       description="Writes regret_<alg>.csv: cumulative regret per step and seed, "
                                   "their mean, and a final summary row.")
    b.add_argument("--alg", default="ts", choices=sorted(bandits.SAMPLERS))
    b.add_argument("--env", default="bernoulli:0.9,0.1", help="bernoulli:p1,p2,... | gaussian:m1,m2[:sd] | single")
    b.add_argument("--horizon", type=int, default=10_000)
    b.add_argument("--seeds", type=int, default=20)
    b.add_argument("--seed", type=int, default=0, help="first seed")
    b.add_argument("--feedback", choices=("bandit", "full"), default="bandit")
    b.add_argument("--discount", type=float)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bandit_sim)

    r = sub.add_parser("report", help="aggregate training runs",
                       description="Writes W.csv (mean over runs), influence_long.csv (run, window, target, "
                                   "source, value), gaps.csv and summary.txt.")
    r.add_argument("runs", nargs="+", help="run directories written by 'train'")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
