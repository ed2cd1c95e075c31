"""Central finite-difference oracle for policy gradients."""

import numpy as np

from mtlbandit.envs import gen_instance
from mtlbandit.model import ModelSpec, init_params, sample_rollouts, surrogate_loss
from mtlbandit.tasks import Task, TaskRegistry


def fd_gradient(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def random_config(rng):
    cop = str(rng.choice(["tsp", "cvrp", "op", "kp"]))
    scale = int(rng.integers(3, 7))
    spec = ModelSpec(hidden=int(rng.integers(2, 5)), depth=int(rng.integers(1, 3)))
    return Task(cop, scale), spec, int(rng.integers(1 << 30))


def check_config(task, spec, seed, n_inst=2, repeats=3):
    """Analytic vs numeric gradient of a fixed-action surrogate; returns (n_params, rel err)."""
    params = init_params(spec, TaskRegistry({task.cop: [task.scale]}), seed)
    rng = np.random.default_rng(seed)
    insts = [gen_instance(task, seed + k) for k in range(n_inst)]
    ro = sample_rollouts(params, task, insts, repeats, rng)
    w = rng.normal(size=len(ro.costs))
    _, grad = surrogate_loss(params, ro, w)
    numeric = fd_gradient(lambda x: surrogate_loss(params.replace(x), ro, w)[0], params.flat)
    return len(params), max_rel_error(grad.values, numeric)
