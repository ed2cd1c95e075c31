"""Gradient ledger, pairwise task influence, rewards and loss-change attribution.

Within an update window every training step records the gradient of the
task it trained. At the end of the window the influence of a source task on
a target task is the cosine between the target's reference gradient and the
source's summed window gradient; across COP types both vectors are first
restricted to the shared (encoder) segment. Column sums of the resulting
matrix are the rewards fed to the task sampler.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import GradientVector, Layout
from .tasks import ConfigurationError, ProtocolError, Task, TaskRegistry

NORM_EPS = 1e-12


def _values(grad) -> np.ndarray:
    return grad.values if isinstance(grad, GradientVector) else np.asarray(grad, float)


def cosine(x: np.ndarray, y: np.ndarray) -> float:
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx < NORM_EPS or ny < NORM_EPS:
        return 0.0
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


@dataclass
class StaleEntry:
    step: int
    grad: np.ndarray


class GradientLedger:
    """Per-window accumulation of task gradients plus a stale-gradient cache."""

    def __init__(self, registry: TaskRegistry, layout: Layout, start: int = 1):
        self.registry = registry
        self.layout = layout
        N = len(registry)
        self.acc = np.zeros((N, layout.size))
        self.counts = np.zeros(N, dtype=int)
        self.stale: dict[int, StaleEntry] = {}
        self.log: list[tuple[int, int]] = []
        self.t1 = start
        self._last_step: int | None = None

    def _idx(self, task) -> int:
        return task if isinstance(task, (int, np.integer)) else self.registry.index(task)

    def record(self, step: int, task, grad) -> "GradientLedger":
        k = self._idx(task)
        if self._last_step is not None and step <= self._last_step:
            raise ProtocolError(f"step {step} already recorded (last was {self._last_step})")
        if step < self.t1:
            raise ProtocolError(f"step {step} precedes window start {self.t1}")
        g = _values(grad)
        if g.shape != (self.layout.size,):
            raise ProtocolError(f"gradient length {g.shape} does not match layout {self.layout.size}")
        self.acc[k] += g
        self.counts[k] += 1
        self.log.append((step, k))
        self._last_step = step
        return self

    @property
    def t2(self) -> int:
        return self._last_step if self._last_step is not None else self.t1 - 1

    @property
    def selected(self) -> np.ndarray:
        return self.counts > 0

    def window_gradient(self, task) -> np.ndarray:
        return self.acc[self._idx(task)]

    def target_reference(self, task) -> np.ndarray:
        """Average window gradient if selected, else the stale cache, else zeros."""
        k = self._idx(task)
        if self.counts[k] > 0:
            return self.acc[k] / self.counts[k]
        if k in self.stale:
            return self.stale[k].grad
        return np.zeros(self.layout.size)

    def clear(self) -> "GradientLedger":
        """Close the window: move averages of selected tasks into the stale cache."""
        for k in np.nonzero(self.counts)[0]:
            last = max(s for s, j in self.log if j == k)
            self.stale[int(k)] = StaleEntry(last, self.acc[k] / self.counts[k])
        self.acc[:] = 0.0
        self.counts[:] = 0
        self.log = []
        self.t1 = self.t2 + 1 if self._last_step is not None else self.t1
        return self

    @property
    def empty(self) -> bool:
        return not self.log


def influence_entry(ledger: GradientLedger, target, source) -> float:
    ti, si = ledger._idx(target), ledger._idx(source)
    if ti == si and ledger.counts[ti] > 0 and np.linalg.norm(ledger.acc[ti]) >= NORM_EPS:
        # the reference is a positive multiple of the window gradient
        return 1.0
    ref = ledger.target_reference(ti)
    src = ledger.acc[si]
    reg = ledger.registry
    if reg[ti].cop != reg[si].cop:
        sl = ledger.layout.segments["shared"]
        ref, src = ref[sl], src[sl]
    return cosine(ref, src)


@dataclass
class InfluenceMatrix:
    """``values[target, source]`` over the window ``[t1, t2]``."""

    values: np.ndarray
    t1: int
    t2: int
    names: list[str]

    @property
    def n(self) -> int:
        return len(self.names)


def _cosine_matrix(R: np.ndarray, S: np.ndarray) -> np.ndarray:
    nr = np.linalg.norm(R, axis=1)
    ns = np.linalg.norm(S, axis=1)
    ok = (nr[:, None] >= NORM_EPS) & (ns[None, :] >= NORM_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        C = (R @ S.T) / (nr[:, None] * ns[None, :])
    return np.where(ok, np.clip(C, -1.0, 1.0), 0.0)


def build_matrix(ledger: GradientLedger) -> InfluenceMatrix:
    reg = ledger.registry
    N = len(reg)
    refs = np.stack([ledger.target_reference(k) for k in range(N)])
    src = ledger.acc
    sl = ledger.layout.segments["shared"]
    full = _cosine_matrix(refs, src)
    shared = _cosine_matrix(refs[:, sl], src[:, sl])
    cop = np.array([reg.cop_index(k) for k in range(N)])
    M = np.where(cop[:, None] == cop[None, :], full, shared)
    sel = ledger.selected & (np.linalg.norm(src, axis=1) >= NORM_EPS)
    M[np.arange(N)[sel], np.arange(N)[sel]] = 1.0
    return InfluenceMatrix(M, ledger.t1, ledger.t2, reg.names)


@dataclass
class RewardVector:
    raw: np.ndarray
    normalized: np.ndarray


def reward(M: InfluenceMatrix | np.ndarray) -> RewardVector:
    """Column sums of the influence matrix and their map onto ``[0, 1]``."""
    values = M.values if isinstance(M, InfluenceMatrix) else np.asarray(M, float)
    N = values.shape[0]
    raw = values.sum(axis=0)
    return RewardVector(raw, np.clip((raw + N) / (2.0 * N), 0.0, 1.0))


@dataclass
class AvgInfluence:
    """Running mean of window influence matrices."""

    W: np.ndarray
    n: int = 0
    window_length: int = 1

    @classmethod
    def zeros(cls, N: int, window_length: int = 1) -> "AvgInfluence":
        return cls(np.zeros((N, N)), 0, window_length)

    def update(self, M: InfluenceMatrix | np.ndarray) -> "AvgInfluence":
        values = M.values if isinstance(M, InfluenceMatrix) else np.asarray(M, float)
        if values.shape != self.W.shape:
            raise ProtocolError(f"matrix shape {values.shape} does not match {self.W.shape}")
        n = self.n + 1
        return AvgInfluence(self.W + (values - self.W) / n, n, self.window_length)


def update_avg(W: AvgInfluence, M) -> AvgInfluence:
    return W.update(M)


def block_summary(W: np.ndarray, registry: TaskRegistry) -> dict[str, float]:
    """Mean ``|W|`` over same-COP off-diagonal pairs and over cross-COP pairs."""
    N = len(registry)
    cop = np.array([registry.cop_index(k) for k in range(N)])
    same = (cop[:, None] == cop[None, :]) & ~np.eye(N, dtype=bool)
    cross = cop[:, None] != cop[None, :]
    A = np.abs(W)
    return {
        "intra_mean_abs": float(A[same].mean()) if same.any() else float("nan"),
        "inter_mean_abs": float(A[cross].mean()) if cross.any() else float("nan"),
    }


# ------------------------------------------------------------------- CSV


def write_matrix_csv(path: str | Path, values: np.ndarray, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target\\source", *names])
        for name, row in zip(names, values):
            w.writerow([name, *(f"{x:.6f}" for x in row)])


def read_matrix_csv(path: str | Path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    if [r[0] for r in rows[1:]] != names:
        raise ValueError(f"{path}: row labels do not match column labels")
    return np.array([[float(x) for x in r[1:]] for r in rows[1:]]), names


# ------------------------------------------------------ loss attribution


@dataclass
class TrajectoryStep:
    """One optimiser step: which task was trained, its gradient and the step size.

    For Adam, ``optimizer_state`` is the state *after* the step (it provides
    the step counter and second moment that scale the update).
    """

    step: int
    task: Task
    grad: np.ndarray
    lr: float
    optimizer_state: object = None


def _attributed_updates(trajectory, optimizer, initial_moments):
    """Total parameter displacement (descent direction) attributed to each task."""
    updates: dict[Task, np.ndarray] = {}
    if optimizer == "gd":
        for st in trajectory:
            g = _values(st.grad)
            updates[st.task] = updates.get(st.task, 0.0) + st.lr * g
        return updates
    if optimizer != "adam":
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")
    moments = {k: np.array(v, float) for k, v in (initial_moments or {}).items()}
    for st in trajectory:
        s = st.optimizer_state
        if s is None:
            raise ConfigurationError("adam attribution needs the optimizer state of every step")
        g = _values(st.grad)
        for k in moments:
            moments[k] *= s.beta1
        moments[st.task] = moments.get(st.task, np.zeros_like(g)) + (1.0 - s.beta1) * g
        vhat = s.v / (1.0 - s.beta2**s.t)
        rate = st.lr / ((1.0 - s.beta1**s.t) * (np.sqrt(vhat) + s.eps))
        for k, m in moments.items():
            updates[k] = updates.get(k, 0.0) + rate * m
    return updates


def decomposition_effects(
    trajectory: Sequence[TrajectoryStep],
    target: Task,
    reference_grad,
    layout: Layout,
    optimizer: str = "gd",
    initial_moments: dict | None = None,
) -> tuple[float, float, float]:
    """Effects ``(a, b, c)`` of training the target, its sibling scales and other COPs.

    ``loss(t2) - loss(t1)`` is approximated by ``-(a + b + c)``; the identity is
    exact when ``reference_grad`` is the gradient at the mean-value point.
    ``initial_moments`` maps tasks to their share of the Adam first moment at
    the start of the window (zero if omitted).
    """
    if optimizer not in ("gd", "adam"):
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")
    if not trajectory:
        return 0.0, 0.0, 0.0
    ref = _values(reference_grad)
    own = layout.mask("shared", target.cop)
    ref_own = np.where(own, ref, 0.0)
    ref_shared = np.where(layout.mask("shared"), ref, 0.0)
    a = b = c = 0.0
    for task, u in _attributed_updates(trajectory, optimizer, initial_moments).items():
        if task == target:
            a += float(ref_own @ u)
        elif task.cop == target.cop:
            b += float(ref_own @ u)
        else:
            c += float(ref_shared @ u)
    return a, b, c
