import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdcheck import check_config
from mtlbandit.envs import KPInstance, TerminalState, TSPInstance, gen_instance, validate
from mtlbandit.model import (
    GradientVector,
    ModelSpec,
    init_params,
    policy_gradient_loss,
    project_shared,
    rollout,
    sample_rollouts,
    surrogate_loss,
    forward_policy,
)
from mtlbandit.tasks import ConfigurationError, Task, TaskRegistry

REG = TaskRegistry({"tsp": [4, 5], "cvrp": [4], "op": [5], "kp": [6]})


def test_init_layout_and_determinism():
    reg = TaskRegistry({"tsp": [5], "kp": [10]})
    a = init_params(ModelSpec(hidden=8), reg, 7)
    b = init_params(ModelSpec(hidden=8), reg, 7)
    assert list(a.layout.segments) == ["shared", "tsp", "kp"]
    assert np.array_equal(a.flat, b.flat)
    covered = np.zeros(len(a), int)
    for sl in a.layout.segments.values():
        covered[sl] += 1
    assert np.all(covered == 1)


def test_init_scale_bound():
    p = init_params(ModelSpec(hidden=8), REG, 0)
    for (seg, name), (sl, _) in p.layout.tensors.items():
        assert np.all(np.abs(p.flat[sl]) <= 1 / np.sqrt(p.layout.fan_in(seg, name)))


def test_zero_hidden_rejected():
    with pytest.raises(ConfigurationError):
        ModelSpec(hidden=0)


def test_forward_policy_sums_to_one():
    p = init_params(ModelSpec(), REG, 1)
    probs = forward_policy(p, Task("tsp", 5), gen_instance(Task("tsp", 5), 0), [])
    assert probs.shape == (5,)
    assert abs(probs.sum() - 1) <= 1e-12


def test_forward_policy_single_and_masked_actions():
    p = init_params(ModelSpec(), REG, 1)
    tsp = gen_instance(Task("tsp", 4), 3)
    probs = forward_policy(p, Task("tsp", 4), tsp, [0, 2, 1])
    assert probs.tolist() == [0.0, 0.0, 0.0, 1.0]
    kp = KPInstance(np.array([0.6, 0.6, 0.2, 0.2, 0.2, 0.2]), np.ones(6), 1.0)
    probs = forward_policy(p, Task("kp", 6), kp, [0])
    assert probs[[0, 1]].tolist() == [0.0, 0.0]
    assert probs[-1] > 0 and abs(probs.sum() - 1) < 1e-12
    with pytest.raises(TerminalState):
        forward_policy(p, Task("tsp", 4), tsp, [0, 2, 1, 3])


def test_equal_logits_split_evenly():
    p = init_params(ModelSpec(hidden=4), TaskRegistry({"tsp": [2]}), 0)
    p = p.replace(np.zeros(len(p)))
    probs = forward_policy(p, Task("tsp", 2), TSPInstance(np.array([[0.1, 0.2], [0.7, 0.3]])), [])
    assert probs.tolist() == [0.5, 0.5]


def test_greedy_rollout_is_deterministic():
    p = init_params(ModelSpec(), REG, 2)
    inst = gen_instance(Task("tsp", 4), 5)
    assert rollout(p, Task("tsp", 4), inst, "greedy") == rollout(p, Task("tsp", 4), inst, "greedy")


@pytest.mark.parametrize("name", ["tsp-5", "cvrp-4", "op-5", "kp-6"])
def test_sampled_solutions_validate(name):
    task = Task.parse(name)
    p = init_params(ModelSpec(), REG, 3)
    insts = [gen_instance(task, s) for s in range(50)]
    ro = sample_rollouts(p, task, insts, 20, np.random.default_rng(0))
    assert np.all(ro.logp <= 0)
    for k, sol in enumerate(ro.solutions):
        validate(task, insts[k // 20], sol)


@pytest.mark.parametrize("name", ["tsp-4", "cvrp-4", "op-5", "kp-6"])
def test_gradient_matches_finite_differences(name):
    task = Task.parse(name)
    n, err = check_config(task, ModelSpec(hidden=3, depth=2), 11)
    assert err <= 1e-4, (n, err)


@pytest.mark.parametrize("name", ["tsp-5", "cvrp-4", "op-5", "kp-6"])
def test_gradient_locality(name):
    task = Task.parse(name)
    p = init_params(ModelSpec(), REG, 4)
    _, g = policy_gradient_loss(p, task, [gen_instance(task, s) for s in range(4)], 4, np.random.default_rng(1))
    own = p.layout.mask("shared", task.cop)
    assert np.all(g.values[~own] == 0)
    assert np.any(g.values[own] != 0)


def test_policy_gradient_equals_surrogate_with_advantages():
    task = Task("kp", 6)
    p = init_params(ModelSpec(), REG, 5)
    batch = [gen_instance(task, s) for s in range(3)]
    loss, g, ro = policy_gradient_loss(p, task, batch, 4, np.random.default_rng(2), return_rollouts=True)
    l2, g2 = surrogate_loss(p, ro, ro.advantages())
    assert loss == pytest.approx(l2, abs=1e-12)
    np.testing.assert_allclose(g.values, g2.values, atol=1e-12)


def test_identical_costs_give_zero_gradient():
    # a 2-node tour has one possible cost
    task = Task("tsp", 2)
    reg = TaskRegistry({"tsp": [2]})
    p = init_params(ModelSpec(), reg, 0)
    loss, g = policy_gradient_loss(p, task, [gen_instance(task, 0)], 3, np.random.default_rng(0))
    assert loss == 0.0 and np.all(g.values == 0)


def test_policy_gradient_errors():
    p = init_params(ModelSpec(), REG, 0)
    with pytest.raises(ConfigurationError):
        policy_gradient_loss(p, Task("tsp", 4), [gen_instance(Task("tsp", 4), 0)], 1, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        policy_gradient_loss(p, Task("tsp", 4), [], 4, np.random.default_rng(0))


def test_loss_and_gradient_deterministic_for_seed():
    task = Task("op", 5)
    p = init_params(ModelSpec(), REG, 6)
    batch = [gen_instance(task, s) for s in range(3)]
    a = policy_gradient_loss(p, task, batch, 4, np.random.default_rng(9))
    b = policy_gradient_loss(p, task, batch, 4, np.random.default_rng(9))
    assert a[0] == b[0] and np.array_equal(a[1].values, b[1].values)


def test_kp_training_raises_collected_value():
    from mtlbandit.trainer import AdamState, step_adam
    task = Task("kp", 6)
    reg = TaskRegistry({"kp": [6]})
    p = init_params(ModelSpec(), reg, 0)
    rng = np.random.default_rng(0)
    evalset = [gen_instance(task, 10_000 + s) for s in range(64)]
    before = -sample_rollouts(p, task, evalset, 8, np.random.default_rng(1)).costs.mean()
    opt = AdamState.zeros(len(p))
    for step in range(200):
        batch = [gen_instance(task, step * 16 + s) for s in range(16)]
        _, g = policy_gradient_loss(p, task, batch, 8, rng)
        p, opt = step_adam(p, g, opt, 3e-3)
    after = -sample_rollouts(p, task, evalset, 8, np.random.default_rng(1)).costs.mean()
    assert after > before


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_project_shared_orthogonal_split(seed):
    p = init_params(ModelSpec(hidden=4), REG, 0)
    g = GradientVector(np.random.default_rng(seed).normal(size=len(p)), "tsp")
    s = project_shared(g, p.layout)
    assert s.norm() <= g.norm()
    assert s.norm() ** 2 + np.linalg.norm(g.values - s.values) ** 2 == pytest.approx(g.norm() ** 2, rel=1e-12)


def test_project_shared_of_task_only_gradient_is_zero():
    p = init_params(ModelSpec(hidden=4), REG, 0)
    v = np.where(p.layout.mask("kp"), 1.0, 0.0)
    assert project_shared(GradientVector(v, "kp"), p.layout).norm() == 0.0
    assert project_shared(GradientVector(np.zeros(len(p)), "kp"), p.layout).norm() == 0.0
