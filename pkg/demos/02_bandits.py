# Task samplers on synthetic arms.
#
# Thompson sampling settles on the good arm quickly, Exp3 keeps exploring
# but still earns most of the available reward, and a discount of 1 turns
# the discounted sampler back into plain Thompson sampling.

import numpy as np

from mtlbandit.bandit import BernoulliArms, make_sampler, simulate

env = BernoulliArms([0.9, 0.1])
horizon = 10_000

for alg, kw in [("ts", {}), ("dts", {"discount": 0.95}), ("exp3", {"feedback": "partial"}), ("uniform", {})]:
    runs = [simulate(make_sampler(alg, 2, horizon=horizon, **kw), env, horizon, np.random.default_rng(s))
            for s in range(5)]
    rate = np.median([r.best_arm_rate(1000) for r in runs])
    regret = np.mean([r.regret[-1] for r in runs])
    print(f"{alg:8s} best-arm rate (last 1000) {rate:.3f}  final regret {regret:8.1f}")

a = simulate(make_sampler("ts", 2), env, 2000, np.random.default_rng(3))
b = simulate(make_sampler("dts", 2, discount=1.0), env, 2000, np.random.default_rng(3))
print("dts(1) reproduces ts:", np.array_equal(a.arms, b.arms))

# A shifting environment: the arms swap halfway through.
first, second = BernoulliArms([0.8, 0.2]), BernoulliArms([0.2, 0.8])
for alg in ["ts", "dts"]:
    s, rng = make_sampler(alg, 2), np.random.default_rng(0)
    simulate(s, first, 3000, rng)
    late = simulate(s, second, 3000, rng)
    print(f"{alg:4s} after the swap picks the new best arm {late.best_arm_rate(1000):.2f} of the time")
