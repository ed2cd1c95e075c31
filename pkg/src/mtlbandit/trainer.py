"""Training loop with bandit task selection, optimisers, schedules and evaluation."""

from __future__ import annotations

import functools
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import bandit as bandits
from .envs import eval_set, sample_instances
from .influence import AvgInfluence, GradientLedger, InfluenceMatrix, build_matrix, reward
from .model import GradientVector, Layout, ModelSpec, ParamStore, init_params, policy_gradient_loss, sample_rollouts
from .oracles import gain, oracle_solve
from .tasks import ConfigurationError, Task, TaskRegistry

CHECKPOINT_VERSION = 1

# Minutes per epoch for small / median / large scales, used as relative step costs.
EPOCH_MINUTES = {
    "tsp": (0.19, 0.39, 0.75),
    "cvrp": (0.27, 0.50, 0.90),
    "op": (0.20, 0.41, 0.60),
    "kp": (0.34, 0.61, 1.10),
}

SCHEDULES = ("bandit", "round-robin", "uniform", "stl")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of the root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


# ---------------------------------------------------------------- optimisers


def step_gd(params: ParamStore, grad, lr: float) -> ParamStore:
    g = grad.values if isinstance(grad, GradientVector) else grad
    return params.replace(params.flat - lr * g)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, beta1, beta2, eps)

    def to_dict(self):
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["m"], float), np.array(d["v"], float), d["t"], d["beta1"], d["beta2"], d["eps"])


def step_adam(params: ParamStore, grad, state: AdamState, lr: float) -> tuple[ParamStore, AdamState]:
    """Bias-corrected Adam with one moment state over the whole parameter vector."""
    g = grad.values if isinstance(grad, GradientVector) else grad
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = m / (1.0 - state.beta1**t)
    vhat = v / (1.0 - state.beta2**t)
    new = params.replace(params.flat - lr * mhat / (np.sqrt(vhat) + state.eps))
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


# -------------------------------------------------------------------- budget


@dataclass
class BudgetModel:
    weights: dict[Task, float]

    def __post_init__(self):
        if any(w <= 0 for w in self.weights.values()):
            raise ConfigurationError("budget weights must be positive")

    def __getitem__(self, task: Task) -> float:
        return self.weights[task]

    @classmethod
    def uniform(cls, registry: TaskRegistry) -> "BudgetModel":
        return cls({t: 1.0 for t in registry})

    @classmethod
    def from_table(cls, registry: TaskRegistry) -> "BudgetModel":
        """Relative step costs from the per-epoch timings, normalised to mean 1.

        Scales of a COP are ranked small to large; more than three scales are
        interpolated over the three reference timings.
        """
        raw = {}
        for cop in registry.cops:
            tasks = sorted(registry.tasks_of(cop), key=lambda t: t.scale)
            ref = EPOCH_MINUTES[cop]
            if len(tasks) <= 3:
                vals = ref[: len(tasks)]
            else:
                vals = np.interp(np.linspace(0, 2, len(tasks)), [0, 1, 2], ref)
            raw.update(zip(tasks, vals))
        mean = float(np.mean(list(raw.values())))
        return cls({t: float(raw[t]) / mean for t in registry})


def make_stl_schedule(budget: float, registry: TaskRegistry, allocation: str = "avg") -> dict[Task, float]:
    """Split ``budget`` equally across COP types, then across scales.

    ``avg`` splits a COP's share equally; ``bal`` uses a 1:2:3 ratio from the
    smallest to the largest scale and needs exactly three scales per COP.
    """
    if budget <= 0:
        raise ConfigurationError("budget must be positive")
    per_cop = budget / len(registry.cops)
    out = {}
    for cop in registry.cops:
        tasks = sorted(registry.tasks_of(cop), key=lambda t: t.scale)
        if allocation == "avg":
            shares = [1.0] * len(tasks)
        elif allocation == "bal":
            if len(tasks) != 3:
                raise ConfigurationError(f"balanced allocation needs 3 scales for {cop}, got {len(tasks)}")
            shares = [1.0, 2.0, 3.0]
        else:
            raise ConfigurationError(f"unknown allocation {allocation!r}")
        total = sum(shares)
        for t, s in zip(tasks, shares):
            out[t] = per_cop * s / total
    return {t: out[t] for t in registry}


# -------------------------------------------------------------------- config


@dataclass
class TrainConfig:
    registry: TaskRegistry
    schedule: str = "bandit"
    algorithm: str = "exp3"
    freq: int | None = None
    gamma: float | None = None
    discount: float = 0.95
    feedback: str = "full"
    stl_task: str | None = None
    warmup: bool = True
    model: ModelSpec = field(default_factory=ModelSpec)
    optimizer: str = "adam"
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_at: float = 0.9
    decay_factor: float = 0.1
    batch_size: int = 16
    n_rollouts: int = 8
    budget: float = 600.0
    budget_weights: str | dict = "table"
    eval_instances: int = 200
    eval_seed: int = 2024
    seed: int = 0

    def __post_init__(self):
        if self.freq is None:
            self.freq = len(self.registry)
        if self.freq < 1:
            raise ConfigurationError("freq must be at least 1")
        if self.budget <= 0:
            raise ConfigurationError("budget must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.schedule == "stl":
            if self.stl_task is None:
                raise ConfigurationError("stl schedule needs exactly one task (stl_task)")
            self.registry.index(Task.parse(self.stl_task))
        if self.optimizer not in ("gd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.n_rollouts < 2:
            raise ConfigurationError("n_rollouts must be at least 2")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")

    def budget_model(self) -> BudgetModel:
        if isinstance(self.budget_weights, dict):
            return BudgetModel({Task.parse(k) if isinstance(k, str) else k: float(v) for k, v in self.budget_weights.items()})
        if self.budget_weights == "uniform":
            return BudgetModel.uniform(self.registry)
        if self.budget_weights == "table":
            return BudgetModel.from_table(self.registry)
        raise ConfigurationError(f"unknown budget weights {self.budget_weights!r}")

    def expected_windows(self) -> int:
        mean_w = float(np.mean(list(self.budget_model().weights.values())))
        return max(1, int(self.budget / mean_w) // self.freq)

    def make_sampler(self) -> bandits.Sampler:
        N = len(self.registry)
        if self.schedule == "bandit":
            return bandits.make_sampler(
                self.algorithm, N, horizon=self.expected_windows(), gamma=self.gamma,
                discount=self.discount, feedback=self.feedback,
            )
        if self.schedule == "round-robin":
            return bandits.RoundRobin(N)
        if self.schedule == "uniform":
            return bandits.Uniform(N)
        return bandits.Fixed(N, self.registry.index(Task.parse(self.stl_task)))

    @property
    def label(self) -> str:
        if self.schedule == "bandit":
            return f"bandit-{self.algorithm}"
        if self.schedule == "stl":
            return f"stl-{self.stl_task}"
        return self.schedule

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("registry", "model")}
        d["registry"] = self.registry.to_dict()
        d["model"] = {"hidden": self.model.hidden, "depth": self.model.depth, "init_scale": self.model.init_scale}
        return d


# -------------------------------------------------------------------- report


@dataclass
class EvalReport:
    method: str
    gaps: dict[str, float]
    steps: dict[str, int] = field(default_factory=dict)
    budget_used: float = 0.0
    n_instances: int = 0
    baseline: str | None = None
    gains: dict[str, float] = field(default_factory=dict)

    @property
    def total_gap(self) -> float:
        return float(sum(self.gaps.values()))

    @property
    def total_gain(self) -> float | None:
        return self.gains.get("total")

    def with_gain(self, baseline: "EvalReport") -> "EvalReport":
        if list(baseline.gaps) != list(self.gaps):
            raise ConfigurationError("reports cover different task sets")
        gains = {k: gain(self.gaps[k], baseline.gaps[k]) for k in self.gaps}
        gains["total"] = gain(self.total_gap, baseline.total_gap)
        return EvalReport(self.method, dict(self.gaps), dict(self.steps), self.budget_used, self.n_instances, baseline.method, gains)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "gaps": self.gaps,
            "total_gap": self.total_gap,
            "steps": self.steps,
            "budget_used": self.budget_used,
            "n_instances": self.n_instances,
            "baseline": self.baseline,
            "gains": self.gains,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["method"], dict(d["gaps"]), dict(d.get("steps", {})), d.get("budget_used", 0.0),
                   d.get("n_instances", 0), d.get("baseline"), dict(d.get("gains", {})))


@functools.lru_cache(maxsize=256)
def oracle_values(task: Task, n_instances: int, seed: int) -> np.ndarray:
    return np.array([oracle_solve(task, x).value for x in eval_set(task, n_instances, seed)])


def task_gaps(params: ParamStore, task: Task, n_instances: int, seed: int) -> np.ndarray:
    """Per-instance greedy optimality gap (percent) against the exact oracle."""
    instances = eval_set(task, n_instances, seed)
    ro = sample_rollouts(params, task, instances, 1, mode="greedy")
    obj = ro.costs if task.minimize else -ro.costs
    gt = oracle_values(task, n_instances, seed)
    with np.errstate(divide="ignore", invalid="ignore"):
        gaps = np.abs(obj / gt - 1.0) * 100.0
    # OP instances where nothing is reachable: both objective and optimum are 0
    return np.where(gt == 0, np.where(obj == 0, 0.0, np.inf), gaps)


def evaluate_suite(params, registry: TaskRegistry, n_instances: int, seed: int,
                   method: str = "model", baseline: EvalReport | None = None, tasks=None) -> EvalReport:
    tasks = list(registry) if tasks is None else tasks
    gaps = {t.name: float(np.mean(task_gaps(params, t, n_instances, seed))) for t in tasks}
    report = EvalReport(method, gaps, n_instances=n_instances)
    return report.with_gain(baseline) if baseline is not None else report


# ---------------------------------------------------------------------- train


@dataclass
class TrainResult:
    params: ParamStore
    avg_influence: AvgInfluence
    report: EvalReport | None
    metrics: list[dict]
    matrices: list[InfluenceMatrix]
    optimizer_state: AdamState | None
    sampler: bandits.Sampler
    steps: int
    selections: list[int]


def train(config: TrainConfig, on_step: Callable | None = None) -> TrainResult:
    """Run the select / train / record / reward loop until the budget is spent."""
    reg = config.registry
    N = len(reg)
    weights = config.budget_model()
    params = init_params(config.model, reg, int(substream(config.seed, "params").integers(2**31)))
    inst_rng = substream(config.seed, "instances")
    roll_rng = substream(config.seed, "rollouts")
    bandit_rng = substream(config.seed, "bandit")
    sampler = config.make_sampler()
    opt = AdamState.zeros(len(params), config.beta1, config.beta2, config.eps) if config.optimizer == "adam" else None
    ledger = GradientLedger(reg, params.layout)
    avg = AvgInfluence.zeros(N, config.freq)
    forced = list(range(N)) if config.schedule == "bandit" and config.warmup else []

    metrics, matrices, selections = [], [], []
    steps_per_task = np.zeros(N, dtype=int)
    used_per_task = np.zeros(N)
    loss_ema = [None] * N
    cost_ema = [None] * N
    budget_used = 0.0
    step = 0
    while budget_used < config.budget:
        step += 1
        k = forced[step - 1] if step <= len(forced) else sampler.select(bandit_rng)
        task = reg[k]
        lr = config.lr * (config.decay_factor if budget_used >= config.decay_at * config.budget else 1.0)
        batch = sample_instances(task, inst_rng, config.batch_size)
        loss, grad, ro = policy_gradient_loss(params, task, batch, config.n_rollouts, roll_rng, return_rollouts=True)
        if on_step is not None:
            on_step(step, task, params, grad, lr, opt)
        if opt is None:
            params = step_gd(params, grad, lr)
        else:
            params, opt = step_adam(params, grad, opt, lr)
        ledger.record(step, k, grad)
        selections.append(k)
        steps_per_task[k] += 1
        used_per_task[k] += weights[task]
        budget_used += weights[task]
        mean_cost = float(ro.costs.mean())
        loss_ema[k] = loss if loss_ema[k] is None else 0.9 * loss_ema[k] + 0.1 * loss
        cost_ema[k] = mean_cost if cost_ema[k] is None else 0.9 * cost_ema[k] + 0.1 * mean_cost
        if step % config.freq == 0:
            M = build_matrix(ledger)
            rv = reward(M)
            updated = [int(j) for j in np.nonzero(ledger.selected)[0]]
            sampler.update({j: float(rv.normalized[j]) for j in updated})
            avg = avg.update(M)
            matrices.append(M)
            metrics.append({
                "window": len(matrices),
                "t1": M.t1,
                "t2": M.t2,
                "selected_counts": ledger.counts.tolist(),
                "raw_rewards": rv.raw.tolist(),
                "normalized_rewards": rv.normalized.tolist(),
                "updated_arms": updated,
                "per_task_loss_ema": loss_ema,
                "per_task_cost_ema": cost_ema,
                "budget_used": budget_used,
            })
            loss_ema, cost_ema = list(loss_ema), list(cost_ema)
            ledger.clear()

    report = None
    if config.eval_instances > 0:
        report = evaluate_suite(params, reg, config.eval_instances, config.eval_seed, method=config.label)
        report.steps = {t.name: int(s) for t, s in zip(reg, steps_per_task)}
        report.budget_used = budget_used
    return TrainResult(params, avg, report, metrics, matrices, opt, sampler, step, selections)


def train_stl_suite(config: TrainConfig, allocation: str = "avg") -> EvalReport:
    """Single-task baseline: one separately trained model per task on its budget share."""
    budgets = make_stl_schedule(config.budget, config.registry, allocation)
    gaps, steps, used = {}, {}, 0.0
    weights = config.budget_model()
    for task, share in budgets.items():
        sub = TaskRegistry({task.cop: [task.scale]})
        cfg = TrainConfig(**{**_fields(config), "registry": sub, "schedule": "stl", "stl_task": task.name,
                             "budget": share / weights[task], "budget_weights": "uniform", "eval_instances": 0,
                             "freq": 1, "warmup": False})
        res = train(cfg)
        gaps[task.name] = float(np.mean(task_gaps(res.params, task, config.eval_instances, config.eval_seed)))
        steps[task.name] = res.steps
        used += res.steps * weights[task]
    return EvalReport(f"stl-{allocation}", gaps, steps, used, config.eval_instances)


def _fields(config: TrainConfig) -> dict:
    return {f: getattr(config, f) for f in config.__dataclass_fields__}


def compare_schedules(config: TrainConfig, schedules=("bandit", "round-robin", "stl-avg", "stl-bal")) -> dict[str, EvalReport]:
    """Equal-budget comparison of schedules; returns one report per schedule."""
    out = {}
    for name in schedules:
        if name.startswith("stl-"):
            out[name] = train_stl_suite(config, name.split("-", 1)[1])
        else:
            cfg = TrainConfig(**{**_fields(config), "schedule": name})
            rep = train(cfg).report
            rep.method = name
            out[name] = rep
    return out


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, config: TrainConfig, result: TrainResult) -> None:
    data = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "registry": config.registry.to_dict(),
        "model": {"hidden": config.model.hidden, "depth": config.model.depth, "init_scale": config.model.init_scale},
        "params": result.params.flat.tolist(),
        "optimizer": result.optimizer_state.to_dict() if result.optimizer_state is not None else None,
        "sampler": result.sampler.to_dict(),
        "avg_influence": {"W": result.avg_influence.W.tolist(), "n": result.avg_influence.n,
                          "window_length": result.avg_influence.window_length},
        "steps": result.steps,
    }
    Path(path).write_text(json.dumps(data))


@dataclass
class Checkpoint:
    registry: TaskRegistry
    params: ParamStore
    optimizer_state: AdamState | None
    sampler: bandits.Sampler
    avg_influence: AvgInfluence
    config: dict
    steps: int


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = json.loads(Path(path).read_text())
    if data.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {data.get('version')!r}")
    reg = TaskRegistry(data["registry"])
    spec = ModelSpec(**data["model"])
    layout = Layout(spec, reg.cops)
    params = ParamStore(layout, np.array(data["params"], float))
    opt = AdamState.from_dict(data["optimizer"]) if data["optimizer"] else None
    a = data["avg_influence"]
    avg = AvgInfluence(np.array(a["W"], float), a["n"], a["window_length"])
    return Checkpoint(reg, params, opt, bandits.Sampler.from_dict(data["sampler"]), avg, data["config"], data["steps"])
