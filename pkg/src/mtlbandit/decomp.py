"""Numerical checks of the loss-change attribution ``dL ~ -(a + b + c)``.

Two harnesses: multi-task quadratics, where the mean-value reference is the
gradient at the midpoint and the identity is exact, and a small neural run
where the change of a frozen surrogate loss is compared with the effects
computed from the averaged gradient along the window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import eval_set
from .influence import TrajectoryStep, decomposition_effects
from .model import ModelSpec, sample_rollouts, surrogate_loss
from .tasks import ConfigurationError, Task, TaskRegistry
from .trainer import AdamState, TrainConfig, step_adam, train


class SegmentLayout:
    """Bare segment map with the ``mask`` interface of a model layout."""

    def __init__(self, sizes: dict[str, int]):
        self.segments, pos = {}, 0
        for name, n in sizes.items():
            self.segments[name] = slice(pos, pos + n)
            pos += n
        self.size = pos

    def mask(self, *segments: str) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        for s in segments:
            m[self.segments[s]] = True
        return m


@dataclass
class QuadraticSuite:
    """Task losses ``0.5 (x - c)^T A (x - c)`` on the shared plus own-COP coordinates."""

    layout: SegmentLayout
    tasks: list[Task]
    A: list[np.ndarray]
    c: list[np.ndarray]

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator) -> "QuadraticSuite":
        tasks = [Task("tsp", 5), Task("tsp", 8), Task("kp", 10), Task("kp", 15)]
        if dim == 1:
            layout = SegmentLayout({"shared": 1, "tsp": 0, "kp": 0})
        else:
            own = (dim - dim // 2) // 2
            layout = SegmentLayout({"shared": dim - 2 * own, "tsp": own, "kp": own})
        A, c = [], []
        for t in tasks:
            m = layout.mask("shared", t.cop)
            Q = rng.normal(size=(dim, dim))
            S = Q @ Q.T / dim + np.eye(dim)
            A.append(np.where(np.outer(m, m), S, 0.0))
            c.append(np.where(m, rng.normal(size=dim), 0.0))
        return cls(layout, tasks, A, c)

    def loss(self, k: int, x: np.ndarray) -> float:
        d = x - self.c[k]
        return 0.5 * float(d @ self.A[k] @ d)

    def grad(self, k: int, x: np.ndarray) -> np.ndarray:
        return self.A[k] @ (x - self.c[k])


@dataclass
class DecompRecord:
    window: int
    task: str
    delta_loss: float
    a: float
    b: float
    c: float

    @property
    def residual(self) -> float:
        return abs(self.delta_loss + self.a + self.b + self.c)

    @property
    def relative(self) -> float:
        return self.residual / abs(self.delta_loss) if self.delta_loss != 0 else float("inf")

    def to_dict(self) -> dict:
        return {"window": self.window, "task": self.task, "delta_loss": self.delta_loss, "a": self.a, "b": self.b,
                "c": self.c, "residual": self.residual, "relative_residual": self.relative}


@dataclass
class DecompReport:
    mode: str
    optimizer: str
    records: list[DecompRecord] = field(default_factory=list)

    @property
    def max_residual(self) -> float:
        return max(r.residual for r in self.records)

    @property
    def median_relative(self) -> float:
        return float(np.median([r.relative for r in self.records]))

    def passed(self, tol: float) -> bool:
        if self.mode == "quadratic":
            return self.max_residual <= tol
        return self.median_relative <= tol

    def summary(self) -> dict:
        return {"mode": self.mode, "optimizer": self.optimizer, "records": len(self.records),
                "max_residual": self.max_residual, "median_relative_residual": self.median_relative}


def _advance_moments(moments: dict, task: Task, g: np.ndarray, beta1: float) -> None:
    for k in moments:
        moments[k] *= beta1
    moments[task] = moments.get(task, np.zeros_like(g)) + (1.0 - beta1) * g


def quadratic_check(dim: int = 10, optimizer: str = "gd", lr: float = 0.05, n_windows: int = 24,
                    seed: int = 0) -> DecompReport:
    """Windows of 1..``n_windows`` steps with random task choices.

    The reference for each target is its gradient at the midpoint of the
    window's endpoints, the exact mean-value point for a quadratic.
    """
    if optimizer not in ("gd", "adam"):
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")
    rng = np.random.default_rng(seed)
    suite = QuadraticSuite.random(dim, rng)
    x = rng.normal(size=dim)
    state = AdamState.zeros(dim)
    moments: dict = {}
    report = DecompReport("quadratic", optimizer)
    for w in range(n_windows):
        start = x.copy()
        start_moments = {k: v.copy() for k, v in moments.items()}
        traj = []
        for s in range(w + 1):
            k = int(rng.integers(len(suite.tasks)))
            g = suite.grad(k, x)
            if optimizer == "gd":
                x = x - lr * g
                traj.append(TrajectoryStep(s, suite.tasks[k], g, lr))
            else:
                t = state.t + 1
                m = state.beta1 * state.m + (1 - state.beta1) * g
                v = state.beta2 * state.v + (1 - state.beta2) * g * g
                state = AdamState(m, v, t, state.beta1, state.beta2, state.eps)
                x = x - lr * (m / (1 - state.beta1**t)) / (np.sqrt(v / (1 - state.beta2**t)) + state.eps)
                _advance_moments(moments, suite.tasks[k], g, state.beta1)
                traj.append(TrajectoryStep(s, suite.tasks[k], g, lr, state))
        mid = 0.5 * (start + x)
        for k, task in enumerate(suite.tasks):
            a, b, c = decomposition_effects(traj, task, suite.grad(k, mid), suite.layout, optimizer,
                                            initial_moments=start_moments if optimizer == "adam" else None)
            report.records.append(DecompRecord(w + 1, task.name, suite.loss(k, x) - suite.loss(k, start), a, b, c))
    return report


def neural_check(registry: TaskRegistry | None = None, optimizer: str = "gd", lr: float = 1e-3, freq: int = 12,
                 n_windows: int = 50, eval_size: int = 16, n_rollouts: int = 8, hidden: int = 16,
                 seed: int = 0) -> DecompReport:
    """Attribution on a bandit-scheduled run, measured on frozen surrogate losses.

    Each task gets a fixed evaluation batch of sampled constructions with
    fixed advantages. The reference gradient of a window is the average of the
    frozen-loss gradient over the window's iterates.
    """
    if registry is None:
        registry = TaskRegistry({"tsp": [5, 8], "kp": [10, 15]})
    cfg = TrainConfig(registry, optimizer=optimizer, lr=lr, freq=freq, budget=float(freq * n_windows),
                      budget_weights="uniform", decay_at=1.0, eval_instances=0, seed=seed,
                      model=ModelSpec(hidden=hidden), n_rollouts=n_rollouts)
    steps = []

    def log(step, task, params, grad, step_lr, opt):
        after = step_adam(params, grad, opt, step_lr)[1] if opt is not None else None
        steps.append((step, task, params, grad.values, step_lr, after))

    result = train(cfg, on_step=log)
    iterates = [s[2] for s in steps] + [result.params]

    rng = np.random.default_rng(seed)
    frozen = {}
    for task in registry:
        inst = eval_set(task, eval_size, seed)
        ro = sample_rollouts(iterates[0], task, inst, n_rollouts, rng)
        frozen[task] = (ro, ro.advantages())

    report = DecompReport("neural", optimizer)
    moments: dict = {}
    for w in range(len(steps) // freq):
        lo, hi = w * freq, (w + 1) * freq
        traj = [TrajectoryStep(s, t, g, l, st) for s, t, _, g, l, st in steps[lo:hi]]
        start_moments = {k: v.copy() for k, v in moments.items()}
        if optimizer == "adam":
            for st in traj:
                _advance_moments(moments, st.task, st.grad, st.optimizer_state.beta1)
        for task in registry:
            ro, adv = frozen[task]
            losses, grads = zip(*(surrogate_loss(p, ro, adv) for p in iterates[lo:hi + 1]))
            ref = np.mean([g.values for g in grads], axis=0)
            a, b, c = decomposition_effects(traj, task, ref, iterates[0].layout, optimizer,
                                            initial_moments=start_moments if optimizer == "adam" else None)
            report.records.append(DecompRecord(w + 1, task.name, losses[-1] - losses[0], a, b, c))
    return report
