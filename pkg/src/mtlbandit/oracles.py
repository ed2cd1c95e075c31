"""Exact solvers used as ground truth for the optimality gap."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs import EPS, Instance, evaluate
from .tasks import ORACLE_CAP, ConfigurationError, Task

KP_RESOLUTION = 1e-4


class UnsupportedScale(ConfigurationError):
    pass


class UndefinedGap(ZeroDivisionError):
    pass


@dataclass
class OracleResult:
    value: float
    solution: list[int]
    method: str
    error_bound: float = 0.0
    extra: dict = field(default_factory=dict)


def _dist_matrix(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def held_karp_paths(D: np.ndarray):
    """Shortest paths from node 0 over every subset of nodes ``1..m``.

    Returns ``(dp, parent)`` with ``dp[mask, j]`` the length of the shortest
    path that starts at node 0, visits exactly the nodes in ``mask`` (bit
    ``j`` stands for node ``j + 1``) and ends at node ``j + 1``; ``inf`` when
    ``j`` is not in ``mask``.
    """
    m = D.shape[0] - 1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int64)
    if m == 0:
        return dp, parent
    bits = 1 << np.arange(m)
    dp[bits, np.arange(m)] = D[0, 1:]
    masks = np.arange(full)
    popcount = np.array([bin(x).count("1") for x in range(full)])
    inner = D[1:, 1:]  # inner[k, j]: from node k+1 to node j+1
    for size in range(2, m + 1):
        layer = masks[popcount == size]
        has = (layer[:, None] & bits[None, :]) != 0  # (L, m) end node j in mask
        prev = layer[:, None] ^ bits[None, :]  # mask without j
        cand = dp[prev] + inner.T[None, :, :]  # (L, j, k)
        best_k = np.argmin(cand, axis=2)
        best = np.take_along_axis(cand, best_k[..., None], axis=2)[..., 0]
        best = np.where(has, best, np.inf)
        dp[layer] = best
        parent[layer] = np.where(has, best_k, -1)
    return dp, parent


def _path_from(parent: np.ndarray, mask: int, end: int) -> list[int]:
    path = []
    while end >= 0:
        path.append(end + 1)
        prev = int(parent[mask, end])
        mask ^= 1 << end
        end = prev
    return path[::-1]


def tsp_held_karp(coords: np.ndarray) -> tuple[float, list[int]]:
    n = len(coords)
    if n == 1:
        return 0.0, [0]
    D = _dist_matrix(np.asarray(coords, float))
    dp, parent = held_karp_paths(D)
    full = (1 << (n - 1)) - 1
    closing = dp[full] + D[1:, 0]
    end = int(np.argmin(closing))
    return float(closing[end]), [0] + _path_from(parent, full, end)


def _subset_tours(D: np.ndarray):
    """Shortest closed tour from node 0 through each subset of ``1..m``."""
    m = D.shape[0] - 1
    dp, parent = held_karp_paths(D)
    closing = dp + D[1:, 0][None, :]
    end = np.argmin(closing, axis=1) if m else np.zeros(1, dtype=int)
    tour = closing[np.arange(1 << m), end] if m else np.zeros(1)
    tour[0] = 0.0
    return tour, end, parent


def op_solve(instance) -> tuple[float, list[int]]:
    pts = np.vstack([instance.depot, instance.coords])
    D = _dist_matrix(pts)
    tour, end, parent = _subset_tours(D)
    m = instance.n
    masks = np.arange(1 << m)
    bits = (masks[:, None] >> np.arange(m)[None, :]) & 1
    prize = bits @ instance.prizes
    feasible = tour <= instance.max_length + EPS
    prize = np.where(feasible, prize, -np.inf)
    best = int(np.argmax(prize))
    if best == 0:
        return 0.0, [0]
    return float(prize[best]), _path_from(parent, best, int(end[best])) + [0]


def cvrp_solve(instance) -> tuple[float, list[int]]:
    pts = np.vstack([instance.depot, instance.coords])
    D = _dist_matrix(pts)
    tour, end, parent = _subset_tours(D)
    m = instance.n
    full = 1 << m
    masks = np.arange(full)
    bits = (masks[:, None] >> np.arange(m)[None, :]) & 1
    load = bits @ instance.demands
    route = np.where(load <= instance.capacity + EPS, tour, np.inf)
    # partition DP: each block contains the lowest remaining customer
    best = np.full(full, np.inf)
    choice = np.zeros(full, dtype=np.int64)
    best[0] = 0.0
    for S in range(1, full):
        low = S & -S
        rest = S ^ low
        sub = rest
        while True:
            block = sub | low
            c = route[block] + best[S ^ block]
            if c < best[S]:
                best[S], choice[S] = c, block
            if sub == 0:
                break
            sub = (sub - 1) & rest
    solution: list[int] = []
    S = full - 1
    while S:
        block = int(choice[S])
        if solution:
            solution.append(0)
        solution.extend(_path_from(parent, block, int(end[block])))
        S ^= block
    return float(best[full - 1]), solution


def _kp_dp(w_int: np.ndarray, values: np.ndarray, cap: int):
    n = len(w_int)
    dp = np.zeros(cap + 1)
    keep = np.zeros((n, cap + 1), dtype=bool)
    for i in range(n):
        wi = int(w_int[i])
        if wi > cap:
            continue
        cand = np.full(cap + 1, -np.inf)
        cand[wi:] = dp[: cap + 1 - wi] + values[i]
        keep[i] = cand > dp
        dp = np.maximum(dp, cand)
    items = []
    c = cap
    for i in range(n - 1, -1, -1):
        if keep[i, c]:
            items.append(i)
            c -= int(w_int[i])
    return float(dp[cap]), sorted(items)


def kp_solve(instance, resolution: float = KP_RESOLUTION) -> tuple[float, list[int], float]:
    """DP over weights rounded up to ``resolution`` (capacity rounded down).

    The returned selection is feasible for the real weights. The error bound
    is the gap to the relaxation obtained by rounding weights down and the
    capacity up, which upper-bounds the true optimum.
    """
    w = np.asarray(instance.weights, float)
    v = np.asarray(instance.values, float)
    lo_cap = int(math.floor(instance.capacity / resolution + 1e-9))
    value, items = _kp_dp(np.ceil(w / resolution - 1e-9).astype(np.int64), v, lo_cap)
    hi_cap = int(math.ceil(instance.capacity / resolution - 1e-9))
    upper, _ = _kp_dp(np.floor(w / resolution + 1e-9).astype(np.int64), v, hi_cap)
    return value, items, max(upper - value, 0.0)


def kp_enumerate(instance) -> tuple[float, list[int]]:
    """Exhaustive subset search (cross-check for small ``n``)."""
    n = instance.n
    masks = np.arange(1 << n)
    bits = ((masks[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
    weight = bits @ instance.weights
    value = np.where(weight <= instance.capacity + EPS, bits @ instance.values, -np.inf)
    best = int(np.argmax(value))
    return float(value[best]), [i for i in range(n) if best >> i & 1]


def oracle_solve(task: Task, instance: Instance) -> OracleResult:
    if task.scale > ORACLE_CAP[task.cop]:
        raise UnsupportedScale(f"{task.name} above oracle cap {ORACLE_CAP[task.cop]}")
    if task.cop == "tsp":
        value, sol = tsp_held_karp(instance.coords)
        res = OracleResult(value, sol, "held-karp")
    elif task.cop == "op":
        value, sol = op_solve(instance)
        res = OracleResult(value, sol, "held-karp")
    elif task.cop == "cvrp":
        value, sol = cvrp_solve(instance)
        res = OracleResult(value, sol, "enumeration")
    elif task.cop == "kp":
        value, items, bound = kp_solve(instance)
        res = OracleResult(value, items + [instance.n], "dp", error_bound=bound)
    else:
        raise ConfigurationError(f"unknown COP {task.cop!r}")
    # the objective of the returned solution is the reported optimum
    res.value = evaluate(task, instance, res.solution)
    return res


def optimality_gap(obj: float, gt: float, sense: str = "min") -> float:
    """Percentage gap ``|obj/gt - 1| * 100``."""
    if sense not in ("min", "max"):
        raise ConfigurationError(f"sense must be 'min' or 'max', got {sense!r}")
    if gt == 0:
        raise UndefinedGap("optimality gap undefined for zero ground truth")
    return abs(obj / gt - 1.0) * 100.0


def gain(gap_method: float, gap_baseline: float) -> float:
    """Improvement of a method over a baseline; negative is better."""
    return gap_method - gap_baseline
