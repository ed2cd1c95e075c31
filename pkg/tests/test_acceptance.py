"""End-to-end acceptance checks; each records one PASS/FAIL line for the run summary."""

import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdcheck import check_config, random_config
from mtlbandit.bandit import BernoulliArms, make_sampler, simulate
from mtlbandit.cli import main
from mtlbandit.decomp import SegmentLayout, neural_check, quadratic_check
from mtlbandit.influence import GradientLedger, block_summary, build_matrix, reward
from mtlbandit.model import init_params
from mtlbandit.reporting import read_gap_table, write_gap_table
from mtlbandit.tasks import Task, TaskRegistry
from mtlbandit.trainer import EvalReport, TrainConfig, compare_schedules, task_gaps, train

SIX = TaskRegistry({"tsp": [5, 8, 10], "kp": [10, 15, 20]})
SEEDS = range(5)


# 1 ------------------------------------------------------------------


def test_decomposition_exact_on_quadratics(criterion):
    start = time.perf_counter()
    worst = 0.0
    for dim in (1, 10):
        for optimizer in ("gd", "adam"):
            for seed in range(3):
                worst = max(worst, quadratic_check(dim, optimizer, n_windows=24, seed=seed).max_residual)
    elapsed = time.perf_counter() - start
    ok = criterion(1, worst <= 1e-9 and elapsed < 1.0, f"max |dL + (a+b+c)| = {worst:.2e}, {elapsed:.2f}s")
    assert ok


# 2 ------------------------------------------------------------------


def test_decomposition_approximates_neural_run(criterion):
    start = time.perf_counter()
    rep = neural_check(optimizer="gd", lr=1e-3, freq=12, n_windows=50, seed=0)
    elapsed = time.perf_counter() - start
    med = rep.median_relative
    windows = len({r.window for r in rep.records})
    ok = criterion(2, med <= 0.05 and windows == 50 and elapsed < 300,
                   f"median relative residual {med:.2e} over {windows} windows x 4 targets, {elapsed:.1f}s")
    assert ok


# 3 ------------------------------------------------------------------


def test_gradients_match_finite_differences(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(20)
    results = []
    while len(results) < 20:
        task, spec, seed = random_config(rng)
        if len(init_params(spec, TaskRegistry({task.cop: [task.scale]}), seed)) > 200:
            continue
        results.append(check_config(task, spec, seed))
    elapsed = time.perf_counter() - start
    worst = max(err for _, err in results)
    ok = criterion(3, worst <= 1e-4 and elapsed < 60,
                   f"max rel err {worst:.2e} over 20 configs (<= {max(n for n, _ in results)} params), {elapsed:.1f}s")
    assert ok


# 4 ------------------------------------------------------------------

LAYOUT = SegmentLayout({"shared": 3, "tsp": 2, "kp": 2})
REG = TaskRegistry({"tsp": [5, 8], "kp": [10, 15]})
_violations: list[str] = []
_elapsed4 = [0.0]

window = st.lists(
    st.tuples(st.integers(0, 3), st.lists(st.floats(-5, 5), min_size=7, max_size=7)),
    min_size=1,
    max_size=8,
)


def _ledger(windows, scale=None):
    L = GradientLedger(REG, LAYOUT)
    step = 1
    for w in windows:
        if not L.empty:
            L.clear()
        for k, g in w:
            g = np.asarray(g)
            L.record(step, k, g if scale is None else scale[k] * g)
            step += 1
    return L


@settings(max_examples=150, deadline=None)
@given(st.lists(window, min_size=1, max_size=3), st.lists(st.floats(0.01, 100), min_size=4, max_size=4))
def test_influence_properties(windows, scale):
    start = time.perf_counter()
    L = _ledger(windows)
    M = build_matrix(L).values
    checks = {
        "range": np.all((M >= -1) & (M <= 1)),
        "self": all(M[k, k] == 1 for k in range(4) if L.counts[k] and np.linalg.norm(L.acc[k]) >= 1e-12),
        "reward": np.allclose(reward(M).raw, M.sum(axis=0), rtol=0, atol=1e-12),
        "scale": np.allclose(build_matrix(_ledger(windows, scale)).values, M, rtol=0, atol=1e-9),
    }
    if len(windows[-1]) == 1:
        checks["single-step"] = np.count_nonzero(np.any(M != 0, axis=0)) <= 1
    bad = [name for name, ok in checks.items() if not ok]
    _elapsed4[0] += time.perf_counter() - start
    _violations.extend(bad)
    assert not bad


def test_influence_invariants_summary(criterion):
    elapsed = _elapsed4[0]
    ok = criterion(4, not _violations and elapsed < 10,
                   f"{'no' if not _violations else sorted(set(_violations))} violations, {elapsed:.1f}s")
    assert ok


# 5, 7 ---------------------------------------------------------------


@pytest.fixture(scope="module")
def six_task_runs():
    out = []
    start = time.perf_counter()
    for seed in SEEDS:
        res = train(TrainConfig(SIX, schedule="bandit", algorithm="exp3", budget=1500, eval_instances=0, seed=seed))
        out.append(res)
    return out, time.perf_counter() - start


def test_block_structure(six_task_runs, criterion):
    runs, elapsed = six_task_runs
    windows = min(len(r.metrics) for r in runs)
    summ = [block_summary(r.avg_influence.W, SIX) for r in runs]
    intra = float(np.median([s["intra_mean_abs"] for s in summ]))
    inter = float(np.median([s["inter_mean_abs"] for s in summ]))
    ok = criterion(5, intra > inter and windows >= 200 and elapsed < 1800,
                   f"median intra {intra:.4f} vs inter {inter:.4f}, >= {windows} windows, {elapsed:.0f}s")
    assert ok


def test_tsp5_quality(six_task_runs, criterion):
    runs, _ = six_task_runs
    start = time.perf_counter()
    gap = float(np.mean(task_gaps(runs[0].params, Task("tsp", 5), 1000, 7)))
    ok = criterion(7, gap <= 5.0, f"TSP-5 greedy gap {gap:.3f}% over 1000 instances, {time.perf_counter() - start:.1f}s eval")
    assert ok


# 6 ------------------------------------------------------------------


def test_bandit_sanity(criterion):
    start = time.perf_counter()
    env = BernoulliArms([0.9, 0.1])
    horizon = 10_000
    rates, exp3_means, identical = [], [], True
    for seed in range(20):
        ts = simulate(make_sampler("ts", 2, horizon=horizon), env, horizon, np.random.default_rng(seed))
        rates.append(float(np.mean(ts.arms[-1000:] == ts.best_arm)))
        dts = simulate(make_sampler("dts", 2, horizon=horizon, discount=1.0), env, horizon, np.random.default_rng(seed))
        identical &= np.array_equal(ts.arms, dts.arms) and np.array_equal(ts.rewards, dts.rewards)
        ex = simulate(make_sampler("exp3", 2, horizon=horizon, feedback="partial"), env, horizon,
                      np.random.default_rng(seed))
        exp3_means.append(float(ex.rewards.mean()))
    elapsed = time.perf_counter() - start
    rate, mean = float(np.median(rates)), float(np.mean(exp3_means))
    ok = criterion(6, rate >= 0.95 and mean >= 0.8 and identical and elapsed < 60,
                   f"TS best-arm rate {rate:.3f}, Exp3 mean reward {mean:.3f}, DTS(1)==TS {identical}, {elapsed:.1f}s")
    assert ok


# 8 ------------------------------------------------------------------


def test_scheduler_comparison_harness(tmp_path, criterion, capsys):
    ours, stl = EvalReport("Ours", {"total-only": 8.515}), EvalReport("STL_avg", {"total-only": 18.897})
    write_gap_table(tmp_path / "totals.csv", [ours, stl], reference="Ours")
    gain = read_gap_table(tmp_path / "totals.csv")["STL_avg"]["Gain by Ours"]
    arithmetic = gain == pytest.approx(-10.382, abs=1e-9)

    diffs, shaped = [], True
    for seed in SEEDS:
        reps = compare_schedules(TrainConfig(SIX, budget=600, eval_instances=200, seed=seed))
        path = tmp_path / f"gaps_{seed}.csv"
        write_gap_table(path, list(reps.values()), reference="bandit")
        table = read_gap_table(path)
        shaped &= list(table) == ["bandit", "round-robin", "stl-avg", "stl-bal"]
        for name, col in table.items():
            tasks = sum(col[t] for t in SIX.names)
            shaped &= col["Total Gap"] == pytest.approx(tasks, abs=1e-5)
            if name != "bandit":
                shaped &= col["Gain by bandit"] == pytest.approx(table["bandit"]["Total Gap"] - col["Total Gap"], abs=1e-5)
        diffs.append(reps["bandit"].total_gap - reps["round-robin"].total_gap)
    margin = float(np.median(diffs))
    flag = "holds" if margin <= 0 else "FLAGGED: does not hold at this scale"
    ok = criterion(8, arithmetic and shaped,
                   f"gain {gain:.3f}, table shape ok={shaped}; bandit - round-robin median {margin:+.3f} ({flag})")
    with capsys.disabled():
        print(f"\nscheduler comparison: per-seed bandit - round-robin total gap {np.round(diffs, 3).tolist()} ({flag})")
    assert ok


# 9 ------------------------------------------------------------------

CLI_CONFIG = """\
[tasks]
tsp = 5, 8
kp = 10

[schedule]
kind = bandit
algorithm = exp3
freq = 3
seed = 3

[optimizer]
batch_size = 4
rollouts = 3

[budget]
total = 30

[eval]
instances = 20
"""


def _run_all(root: Path, cfg: Path) -> None:
    assert main(["train", str(cfg), "--out", str(root / "train")]) == 0
    assert main(["eval", str(root / "train" / "checkpoint.json"), "--n", "20",
                 "--baseline", str(root / "train" / "report.json"), "--out", str(root / "eval")]) == 0
    assert main(["bandit-sim", "--alg", "dts", "--horizon", "500", "--seeds", "3", "--out", str(root / "sim")]) == 0
    assert main(["report", str(root / "train"), "--out", str(root / "report")]) == 0


def test_cli_determinism(tmp_path, criterion):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(CLI_CONFIG)
    _run_all(tmp_path / "a", cfg)
    _run_all(tmp_path / "b", cfg)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = criterion(9, files and not differ, f"{len(files)} files compared, {len(differ)} differ {differ[:3]}")
    assert ok
