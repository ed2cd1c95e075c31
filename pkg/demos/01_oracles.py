# Exact solvers for small instances of the four routing/packing problems.
#
# Every optimality gap reported elsewhere is measured against these, so it
# is worth seeing what they return and how a random policy compares.

import numpy as np

from mtlbandit.envs import evaluate, gen_instance
from mtlbandit.model import ModelSpec, init_params, rollout
from mtlbandit.oracles import optimality_gap, oracle_solve
from mtlbandit.tasks import Task, TaskRegistry

# One instance per problem, the oracle's answer and the objective it scores.
for name in ["tsp-8", "cvrp-6", "op-8", "kp-15"]:
    task = Task.parse(name)
    inst = gen_instance(task, seed=0)
    best = oracle_solve(task, inst)
    print(f"{name:7s} {best.method:12s} value={best.value:.4f} solution={best.solution}")

# An untrained policy decoded greedily, scored against the oracle.
task = Task("tsp", 8)
params = init_params(ModelSpec(), TaskRegistry({"tsp": [8]}), seed=0)
gaps = []
for seed in range(50):
    inst = gen_instance(task, seed)
    tour, _ = rollout(params, task, inst, mode="greedy")
    gaps.append(optimality_gap(evaluate(task, inst, tour), oracle_solve(task, inst).value))
print(f"untrained tsp-8 greedy gap over 50 instances: {np.mean(gaps):.2f}%")
