"""COP instances, feasibility rules, objectives and batched construction states.

Action conventions (a solution is the ordered list of actions taken):

* TSP: node indices ``0..n-1``; a tour is a permutation, closed implicitly.
* CVRP: node ``0`` is the depot, customers are ``1..n``. Choosing ``0``
  returns to the depot and starts a new route; the final return is implicit.
* OP: node ``0`` is the depot, ``1..n`` are prize nodes. Choosing ``0``
  terminates the tour (returns to the depot); a missing trailing ``0`` is
  accepted by the validator.
* KP: items ``0..n-1``; action ``n`` terminates. A missing trailing
  terminate is accepted by the validator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tasks import ConfigurationError, Task, check_scale

EPS = 1e-9
OP_MAX_LENGTH = 2.0
CVRP_CAPACITY = 30
INPUT_DIMS = {"tsp": 2, "cvrp": 3, "op": 3, "kp": 2}


class InfeasibleSolution(ValueError):
    """A solution violates a constraint; ``constraint`` names which one."""

    def __init__(self, constraint: str, detail: str = ""):
        self.constraint = constraint
        super().__init__(f"{constraint}: {detail}" if detail else constraint)


class TerminalState(RuntimeError):
    """Raised when an action is requested from a completed construction."""


@dataclass(frozen=True, eq=False)
class TSPInstance:
    coords: np.ndarray
    seed: int | None = None
    cop = "tsp"

    @property
    def n(self) -> int:
        return len(self.coords)


@dataclass(frozen=True, eq=False)
class CVRPInstance:
    depot: np.ndarray
    coords: np.ndarray
    demands: np.ndarray
    capacity: float = CVRP_CAPACITY
    seed: int | None = None
    cop = "cvrp"

    @property
    def n(self) -> int:
        return len(self.coords)


@dataclass(frozen=True, eq=False)
class OPInstance:
    depot: np.ndarray
    coords: np.ndarray
    prizes: np.ndarray
    max_length: float = OP_MAX_LENGTH
    seed: int | None = None
    cop = "op"

    @property
    def n(self) -> int:
        return len(self.coords)


@dataclass(frozen=True, eq=False)
class KPInstance:
    weights: np.ndarray
    values: np.ndarray
    capacity: float
    seed: int | None = None
    cop = "kp"

    @property
    def n(self) -> int:
        return len(self.weights)


Instance = TSPInstance | CVRPInstance | OPInstance | KPInstance

_ARRAY_FIELDS = {
    "tsp": ("coords",),
    "cvrp": ("depot", "coords", "demands"),
    "op": ("depot", "coords", "prizes"),
    "kp": ("weights", "values"),
}
_SCALAR_FIELDS = {"tsp": (), "cvrp": ("capacity",), "op": ("max_length",), "kp": ("capacity",)}
_CLASSES = {"tsp": TSPInstance, "cvrp": CVRPInstance, "op": OPInstance, "kp": KPInstance}


def _unit(rng: np.random.Generator, shape) -> np.ndarray:
    # uniform on (0, 1]
    return 1.0 - rng.random(shape)


def sample_instances(task: Task, rng: np.random.Generator, count: int, seed=None) -> list[Instance]:
    """Draw ``count`` instances of ``task`` from ``rng``."""
    check_scale(task)
    n = task.scale
    if task.cop == "tsp":
        coords = rng.random((count, n, 2))
        return [TSPInstance(coords[b], seed) for b in range(count)]
    if task.cop == "cvrp":
        depot = rng.random((count, 2))
        coords = rng.random((count, n, 2))
        demands = rng.integers(1, 10, size=(count, n)).astype(float)
        return [CVRPInstance(depot[b], coords[b], demands[b], float(CVRP_CAPACITY), seed) for b in range(count)]
    if task.cop == "op":
        depot = rng.random((count, 2))
        coords = rng.random((count, n, 2))
        d = np.linalg.norm(coords - depot[:, None, :], axis=-1)
        dmax = d.max(axis=1, keepdims=True)
        prizes = (1.0 + np.floor(99.0 * d / np.maximum(dmax, 1e-300))) / 100.0
        return [OPInstance(depot[b], coords[b], prizes[b], OP_MAX_LENGTH, seed) for b in range(count)]
    if task.cop == "kp":
        weights = _unit(rng, (count, n))
        values = _unit(rng, (count, n))
        caps = np.maximum(n / 8.0, weights.max(axis=1))
        return [KPInstance(weights[b], values[b], float(caps[b]), seed) for b in range(count)]
    raise ConfigurationError(f"unknown COP {task.cop!r}")


def gen_instance(task: Task, seed: int) -> Instance:
    """Deterministic instance for ``(task, seed)``."""
    return sample_instances(task, np.random.default_rng(seed), 1, seed=seed)[0]


def eval_set(task: Task, n_instances: int, seed: int) -> list[Instance]:
    return [gen_instance(task, seed * 1_000_003 + k) for k in range(n_instances)]


# ---------------------------------------------------------------- validation


def _as_actions(solution: Sequence[int]) -> list[int]:
    return [int(a) for a in solution]


def _dist(a, b) -> float:
    return float(np.hypot(*(np.asarray(a, float) - np.asarray(b, float))))


def validate(task: Task, instance: Instance, solution: Sequence[int]) -> None:
    """Raise :class:`InfeasibleSolution` if ``solution`` is not feasible."""
    acts = _as_actions(solution)
    n = instance.n
    cop = task.cop
    if instance.cop != cop or n != task.scale:
        raise InfeasibleSolution("task mismatch", f"{instance.cop}-{n} vs {task.name}")
    if cop == "tsp":
        if any(a < 0 or a >= n for a in acts):
            raise InfeasibleSolution("index out of range")
        if len(set(acts)) != len(acts):
            raise InfeasibleSolution("duplicate visit")
        if len(acts) != n:
            raise InfeasibleSolution("incomplete tour", f"{len(acts)} of {n} nodes")
    elif cop == "cvrp":
        if any(a < 0 or a > n for a in acts):
            raise InfeasibleSolution("index out of range")
        customers = [a for a in acts if a != 0]
        if len(set(customers)) != len(customers):
            raise InfeasibleSolution("duplicate visit")
        if len(customers) != n:
            raise InfeasibleSolution("unserved customer", f"{n - len(set(customers))} left")
        load = 0.0
        for a in acts:
            if a == 0:
                load = 0.0
                continue
            load += instance.demands[a - 1]
            if load > instance.capacity + EPS:
                raise InfeasibleSolution("capacity exceeded", f"route load {load}")
    elif cop == "op":
        if acts and acts[-1] == 0:
            acts = acts[:-1]
        if any(a < 1 or a > n for a in acts):
            raise InfeasibleSolution("index out of range")
        if len(set(acts)) != len(acts):
            raise InfeasibleSolution("duplicate visit")
        length = _op_length(instance, acts)
        if length > instance.max_length + EPS:
            raise InfeasibleSolution("length budget exceeded", f"{length:.6f} > {instance.max_length}")
    elif cop == "kp":
        if acts and acts[-1] == n:
            acts = acts[:-1]
        if any(a < 0 or a >= n for a in acts):
            raise InfeasibleSolution("index out of range")
        if len(set(acts)) != len(acts):
            raise InfeasibleSolution("duplicate item")
        weight = float(np.sum(instance.weights[acts])) if acts else 0.0
        if weight > instance.capacity + EPS:
            raise InfeasibleSolution("capacity exceeded", f"{weight:.6f} > {instance.capacity}")
    else:
        raise ConfigurationError(f"unknown COP {cop!r}")


def _op_length(instance: OPInstance, nodes: list[int]) -> float:
    pts = [instance.depot] + [instance.coords[a - 1] for a in nodes] + [instance.depot]
    return sum(_dist(p, q) for p, q in zip(pts, pts[1:]))


def evaluate(task: Task, instance: Instance, solution: Sequence[int]) -> float:
    """Objective of a feasible solution (length for TSP/CVRP, prize/value for OP/KP)."""
    validate(task, instance, solution)
    acts = _as_actions(solution)
    if task.cop == "tsp":
        c = instance.coords[acts]
        return float(np.sum(np.linalg.norm(c - np.roll(c, -1, axis=0), axis=1)))
    if task.cop == "cvrp":
        pts = [instance.depot]
        for a in acts:
            pts.append(instance.depot if a == 0 else instance.coords[a - 1])
        pts.append(instance.depot)
        return sum(_dist(p, q) for p, q in zip(pts, pts[1:]))
    if task.cop == "op":
        nodes = [a for a in acts if a != 0]
        return float(np.sum(instance.prizes[[a - 1 for a in nodes]])) if nodes else 0.0
    nodes = [a for a in acts if a != instance.n]
    return float(np.sum(instance.values[nodes])) if nodes else 0.0


def signed_cost(task: Task, objective):
    """Cost to minimise: the objective for min-sense COPs, its negation otherwise."""
    return objective if task.minimize else -objective


# ------------------------------------------------------- batched construction


class BatchState:
    """Vectorised construction state for ``T`` trajectories over ``B`` instances.

    Trajectory ``r`` builds a solution for instance ``inst[r]``. Subclasses
    expose the quantities the policy consumes: node input features, the
    feasibility mask, the current node, scalar state features and per-action
    features.
    """

    cop: str
    n_state: int
    n_action_feats: int
    has_terminate = False

    def __init__(self, instances: Sequence[Instance], inst: np.ndarray):
        self.instances = list(instances)
        self.inst = np.asarray(inst, dtype=int)
        self.T = len(self.inst)
        self.done = np.zeros(self.T, dtype=bool)
        self.actions: list[list[int]] = [[] for _ in range(self.T)]

    # node embeddings are indexed by action for the first ``n_nodes`` actions
    @property
    def n_actions(self) -> int:
        return self.n_nodes + int(self.has_terminate)

    def step(self, actions: np.ndarray) -> None:
        actions = np.asarray(actions, dtype=int)
        act = ~self.done
        mask = self.mask()
        rows = np.nonzero(act)[0]
        if not np.all(mask[rows, actions[rows]]):
            bad = rows[~mask[rows, actions[rows]]][0]
            raise InfeasibleSolution("infeasible action", f"trajectory {bad} action {actions[bad]}")
        for r in rows:
            self.actions[r].append(int(actions[r]))
        self._apply(actions, act)

    def mask(self) -> np.ndarray:
        m = self._mask()
        m[self.done] = False
        return m

    def costs(self) -> np.ndarray:
        """Signed cost per trajectory (lower is better for every COP)."""
        raise NotImplementedError


def _pairwise(points: np.ndarray) -> np.ndarray:
    diff = points[:, :, None, :] - points[:, None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


class TSPState(BatchState):
    cop = "tsp"
    n_state = 1
    n_action_feats = 2

    def __init__(self, instances, inst):
        super().__init__(instances, inst)
        self.coords = np.stack([x.coords for x in self.instances])
        self.node_feats = self.coords
        self.n_nodes = self.coords.shape[1]
        self.D = _pairwise(self.coords)
        self.visited = np.zeros((self.T, self.n_nodes), dtype=bool)
        self.cur = np.full(self.T, -1)
        self.first = np.full(self.T, -1)
        self.length = np.zeros(self.T)

    def _mask(self):
        return ~self.visited

    def state_feats(self):
        return (1.0 - self.visited.mean(axis=1))[:, None]

    def action_feats(self):
        D = self.D[self.inst]
        rows = np.arange(self.T)
        started = self.cur >= 0
        f = np.zeros((self.T, self.n_nodes, 2))
        f[started, :, 0] = D[rows, np.maximum(self.cur, 0)][started]
        f[started, :, 1] = D[rows, np.maximum(self.first, 0)][started]
        return f

    def _apply(self, a, act):
        rows = np.nonzero(act)[0]
        a = a[rows]
        started = self.cur[rows] >= 0
        D = self.D[self.inst[rows]]
        step_len = np.where(started, D[np.arange(len(rows)), np.maximum(self.cur[rows], 0), a], 0.0)
        self.length[rows] += step_len
        self.first[rows] = np.where(started, self.first[rows], a)
        self.cur[rows] = a
        self.visited[rows, a] = True
        fin = rows[self.visited[rows].all(axis=1)]
        self.length[fin] += self.D[self.inst[fin], self.cur[fin], self.first[fin]]
        self.done[fin] = True

    def costs(self):
        return self.length.copy()


class CVRPState(BatchState):
    cop = "cvrp"
    n_state = 2
    n_action_feats = 2

    def __init__(self, instances, inst):
        super().__init__(instances, inst)
        pts = np.stack([np.vstack([x.depot, x.coords]) for x in self.instances])
        dem = np.stack([np.concatenate([[0.0], x.demands]) for x in self.instances])
        self.capacity = np.array([x.capacity for x in self.instances])
        self.demand = dem
        self.node_feats = np.concatenate([pts, (dem / self.capacity[:, None])[..., None]], axis=-1)
        self.n_nodes = pts.shape[1]
        self.D = _pairwise(pts)
        self.visited = np.zeros((self.T, self.n_nodes), dtype=bool)
        self.visited[:, 0] = True
        self.cur = np.zeros(self.T, dtype=int)
        self.remaining = self.capacity[self.inst].copy()
        self.length = np.zeros(self.T)

    def _mask(self):
        m = (~self.visited) & (self.demand[self.inst] <= self.remaining[:, None] + EPS)
        m[:, 0] = self.cur != 0
        return m

    def state_feats(self):
        left = 1.0 - self.visited[:, 1:].mean(axis=1)
        return np.stack([self.remaining / self.capacity[self.inst], left], axis=1)

    def action_feats(self):
        D = self.D[self.inst]
        rows = np.arange(self.T)
        return np.stack([D[rows, self.cur], D[:, 0, :]], axis=-1)

    def _apply(self, a, act):
        rows = np.nonzero(act)[0]
        a = a[rows]
        ii = self.inst[rows]
        self.length[rows] += self.D[ii, self.cur[rows], a]
        depot = a == 0
        self.remaining[rows] = np.where(depot, self.capacity[ii], self.remaining[rows] - self.demand[ii, a])
        self.visited[rows, a] = True
        self.cur[rows] = a
        fin = rows[self.visited[rows].all(axis=1)]
        self.length[fin] += self.D[self.inst[fin], self.cur[fin], 0]
        self.cur[fin] = 0
        self.done[fin] = True

    def costs(self):
        return self.length.copy()


class OPState(BatchState):
    cop = "op"
    n_state = 1
    n_action_feats = 2

    def __init__(self, instances, inst):
        super().__init__(instances, inst)
        pts = np.stack([np.vstack([x.depot, x.coords]) for x in self.instances])
        prize = np.stack([np.concatenate([[0.0], x.prizes]) for x in self.instances])
        self.budget = np.array([x.max_length for x in self.instances])
        self.prize = prize
        self.node_feats = np.concatenate([pts, prize[..., None]], axis=-1)
        self.n_nodes = pts.shape[1]
        self.D = _pairwise(pts)
        self.visited = np.zeros((self.T, self.n_nodes), dtype=bool)
        self.cur = np.zeros(self.T, dtype=int)
        self.length = np.zeros(self.T)
        self.collected = np.zeros(self.T)

    def _mask(self):
        D = self.D[self.inst]
        rows = np.arange(self.T)
        need = self.length[:, None] + D[rows, self.cur] + D[:, :, 0]
        m = (~self.visited) & (need <= self.budget[self.inst][:, None] + EPS)
        m[:, 0] = True
        return m

    def state_feats(self):
        return (1.0 - self.length / self.budget[self.inst])[:, None]

    def action_feats(self):
        D = self.D[self.inst]
        rows = np.arange(self.T)
        return np.stack([D[rows, self.cur], D[:, 0, :]], axis=-1)

    def _apply(self, a, act):
        rows = np.nonzero(act)[0]
        a = a[rows]
        ii = self.inst[rows]
        self.length[rows] += self.D[ii, self.cur[rows], a]
        self.collected[rows] += self.prize[ii, a]
        self.visited[rows, a] = True
        self.cur[rows] = a
        self.done[rows[a == 0]] = True

    def costs(self):
        return -self.collected


class KPState(BatchState):
    cop = "kp"
    n_state = 1
    n_action_feats = 2
    has_terminate = True

    def __init__(self, instances, inst):
        super().__init__(instances, inst)
        w = np.stack([x.weights for x in self.instances])
        v = np.stack([x.values for x in self.instances])
        self.w, self.v = w, v
        self.capacity = np.array([x.capacity for x in self.instances])
        self.node_feats = np.stack([w, v], axis=-1)
        self.n_nodes = w.shape[1]
        self.taken = np.zeros((self.T, self.n_nodes), dtype=bool)
        self.remaining = self.capacity[self.inst].copy()
        self.value = np.zeros(self.T)
        self.cur = np.full(self.T, -1)

    def _mask(self):
        m = np.ones((self.T, self.n_nodes + 1), dtype=bool)
        m[:, :-1] = (~self.taken) & (self.w[self.inst] <= self.remaining[:, None] + EPS)
        return m

    def state_feats(self):
        return (self.remaining / self.capacity[self.inst])[:, None]

    def action_feats(self):
        w = self.w[self.inst]
        v = self.v[self.inst]
        f = np.zeros((self.T, self.n_nodes + 1, 2))
        f[:, :-1, 0] = np.minimum(w / np.maximum(self.remaining[:, None], EPS), 1.0)
        f[:, :-1, 1] = v / (v + w)
        return f

    def _apply(self, a, act):
        rows = np.nonzero(act)[0]
        a = a[rows]
        ii = self.inst[rows]
        term = a == self.n_nodes
        items = ~term
        r_it, a_it = rows[items], a[items]
        self.taken[r_it, a_it] = True
        self.remaining[r_it] -= self.w[ii[items], a_it]
        self.value[r_it] += self.v[ii[items], a_it]
        self.done[rows[term]] = True

    def costs(self):
        return -self.value


_STATES = {"tsp": TSPState, "cvrp": CVRPState, "op": OPState, "kp": KPState}


def make_state(task: Task, instances: Sequence[Instance], repeats: int = 1) -> BatchState:
    """Batched state with ``repeats`` trajectories per instance (instance-major)."""
    for x in instances:
        if x.cop != task.cop or x.n != task.scale:
            raise ConfigurationError(f"instance {x.cop}-{x.n} does not match task {task.name}")
    inst = np.repeat(np.arange(len(instances)), repeats)
    return _STATES[task.cop](instances, inst)


def replay(task: Task, instance: Instance, partial: Sequence[int]) -> BatchState:
    state = make_state(task, [instance])
    for a in partial:
        if state.done[0]:
            raise InfeasibleSolution("action after completion", str(a))
        state.step(np.array([a]))
    return state


def feasible_actions(task: Task, instance: Instance, partial: Sequence[int]) -> np.ndarray:
    """Boolean mask over actions; all-False once the construction is complete."""
    return replay(task, instance, partial).mask()[0]


# ------------------------------------------------------------- serialisation


def instance_to_dict(instance: Instance) -> dict:
    d = {"cop": instance.cop, "seed": instance.seed}
    for f in _ARRAY_FIELDS[instance.cop]:
        d[f] = np.asarray(getattr(instance, f)).tolist()
    for f in _SCALAR_FIELDS[instance.cop]:
        d[f] = float(getattr(instance, f))
    return d


def instance_from_dict(d: dict) -> Instance:
    cop = d["cop"]
    if cop not in _CLASSES:
        raise ConfigurationError(f"unknown COP {cop!r}")
    kwargs = {f: np.asarray(d[f], dtype=float) for f in _ARRAY_FIELDS[cop]}
    kwargs.update({f: float(d[f]) for f in _SCALAR_FIELDS[cop]})
    return _CLASSES[cop](seed=d.get("seed"), **kwargs)


def dump_instances(path: str | Path, instances: Iterable[Instance]) -> None:
    with open(path, "w") as fh:
        for x in instances:
            fh.write(json.dumps(instance_to_dict(x)) + "\n")


def load_instances(path: str | Path) -> list[Instance]:
    with open(path) as fh:
        return [instance_from_dict(json.loads(line)) for line in fh if line.strip()]
