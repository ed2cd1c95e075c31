"""CSV emitters for gap tables, influence distributions and bandit traces."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .influence import InfluenceMatrix
from .oracles import gain
from .trainer import EvalReport


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def gap_table(reports: Sequence[EvalReport], reference: str | None = None) -> list[list[str]]:
    """Tasks by methods, a total row, and a ``Gain by <reference>`` row.

    The gain row holds ``total(reference) - total(method)`` for every other
    method, so negative values mean the reference has the smaller total gap.
    """
    methods = [r.method for r in reports]
    tasks = list(reports[0].gaps)
    for r in reports[1:]:
        if list(r.gaps) != tasks:
            raise ValueError(f"report {r.method!r} covers different tasks")
    rows = [["task", *methods]]
    for t in tasks:
        rows.append([t, *(_fmt(r.gaps[t]) for r in reports)])
    rows.append(["Total Gap", *(_fmt(r.total_gap) for r in reports)])
    if reference is not None:
        ref = reports[methods.index(reference)]
        rows.append([f"Gain by {reference}",
                     *("" if r is ref else _fmt(gain(ref.total_gap, r.total_gap)) for r in reports)])
    return rows


def write_gap_table(path: str | Path, reports: Sequence[EvalReport], reference: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(gap_table(reports, reference))


def read_gap_table(path: str | Path) -> dict[str, dict[str, float]]:
    """Column-major view: ``{method: {row label: value}}`` (blank cells skipped)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    methods = rows[0][1:]
    out = {m: {} for m in methods}
    for row in rows[1:]:
        for m, cell in zip(methods, row[1:]):
            if cell:
                out[m][row[0]] = float(cell)
    return out


def write_influence_long(path: str | Path, runs: dict[str, Sequence[InfluenceMatrix]]) -> None:
    """Every window entry as one ``(run, window, target, source, value)`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "window", "target", "source", "value"])
        for run, matrices in runs.items():
            for k, M in enumerate(matrices, 1):
                for i, target in enumerate(M.names):
                    for j, source in enumerate(M.names):
                        w.writerow([run, k, target, source, _fmt(M.values[i, j])])


def write_regret_csv(path: str | Path, regrets: np.ndarray, seeds: Sequence[int]) -> None:
    """One row per step with per-seed cumulative regret and the mean; a final summary row."""
    regrets = np.asarray(regrets)
    mean = regrets.mean(axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *(f"seed_{s}" for s in seeds), "mean"])
        for t in range(regrets.shape[1]):
            w.writerow([t + 1, *(_fmt(x) for x in regrets[:, t]), _fmt(mean[t])])
        w.writerow(["final", *(_fmt(x) for x in regrets[:, -1]), _fmt(mean[-1])])
