"""Task samplers: Exp3, Exp3R, Thompson sampling (plain and discounted) and baselines.

All samplers share ``select(rng) -> arm`` and ``update(rewards)`` where
``rewards`` maps arm index to a reward in ``[0, 1]``. Several arms can be
updated at once (full-information feedback from the influence matrix).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .tasks import ConfigurationError, ProtocolError


def default_gamma(n_arms: int, horizon: int) -> float:
    if n_arms < 2:
        return 1.0
    return min(1.0, math.sqrt(n_arms * math.log(n_arms) / max(horizon, 1)))


def _check_rewards(rewards: dict, n_arms: int) -> None:
    for arm, r in rewards.items():
        if not 0 <= arm < n_arms:
            raise ProtocolError(f"arm {arm} out of range")
        if not (0.0 <= r <= 1.0):
            raise ProtocolError(f"reward {r} for arm {arm} outside [0, 1]")


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    cum = np.cumsum(p)
    return int(np.argmax(cum > rng.random() * cum[-1]))


class Sampler:
    name = "base"

    def __init__(self, n_arms: int):
        if n_arms < 1:
            raise ConfigurationError("a sampler needs at least one arm")
        self.n_arms = n_arms

    def select(self, rng: np.random.Generator) -> int:
        raise NotImplementedError

    def update(self, rewards: dict[int, float]) -> None:
        _check_rewards(rewards, self.n_arms)

    def to_dict(self) -> dict:
        return {"algorithm": self.name, "n_arms": self.n_arms}

    @staticmethod
    def from_dict(d: dict) -> "Sampler":
        cls = SAMPLERS[d["algorithm"]]
        return cls._restore(d)


class RoundRobin(Sampler):
    name = "round-robin"

    def __init__(self, n_arms: int, cursor: int = 0):
        super().__init__(n_arms)
        self.cursor = cursor

    def select(self, rng=None) -> int:
        arm = self.cursor
        self.cursor = (self.cursor + 1) % self.n_arms
        return arm

    def to_dict(self):
        return {**super().to_dict(), "cursor": self.cursor}

    @classmethod
    def _restore(cls, d):
        return cls(d["n_arms"], d["cursor"])


class Uniform(Sampler):
    name = "uniform"

    def select(self, rng) -> int:
        return int(rng.integers(self.n_arms))

    @classmethod
    def _restore(cls, d):
        return cls(d["n_arms"])


class Fixed(Sampler):
    """Always the same arm (single-task training)."""

    name = "fixed"

    def __init__(self, n_arms: int, arm: int):
        super().__init__(n_arms)
        if not 0 <= arm < n_arms:
            raise ConfigurationError(f"arm {arm} out of range")
        self.arm = arm

    def select(self, rng=None) -> int:
        return self.arm

    def to_dict(self):
        return {**super().to_dict(), "arm": self.arm}

    @classmethod
    def _restore(cls, d):
        return cls(d["n_arms"], d["arm"])


class Exp3(Sampler):
    """Exponential weights with uniform exploration.

    Weights are stored as logs. With ``feedback="full"`` every provided arm
    gets ``w *= exp(gamma * r / N)``; with ``"partial"`` the reward is
    importance weighted by the probability of the arm.
    """

    name = "exp3"

    def __init__(self, n_arms: int, gamma: float | None = None, horizon: int = 1000, feedback: str = "full"):
        super().__init__(n_arms)
        gamma = default_gamma(n_arms, horizon) if gamma is None else gamma
        if not 0.0 < gamma <= 1.0:
            raise ConfigurationError(f"exploration rate must be in (0, 1], got {gamma}")
        if feedback not in ("full", "partial"):
            raise ConfigurationError(f"feedback must be 'full' or 'partial', got {feedback!r}")
        self.gamma = gamma
        self.feedback = feedback
        self.log_w = np.zeros(n_arms)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_w)

    def probabilities(self) -> np.ndarray:
        w = np.exp(self.log_w - self.log_w.max())
        return (1.0 - self.gamma) * w / w.sum() + self.gamma / self.n_arms

    def select(self, rng) -> int:
        return _draw(self.probabilities(), rng)

    def update(self, rewards):
        super().update(rewards)
        if not rewards:
            return
        p = self.probabilities()
        for arm, r in rewards.items():
            est = r / p[arm] if self.feedback == "partial" else r
            self.log_w[arm] += self.gamma * est / self.n_arms
        # keep logs bounded; probabilities are invariant to the shift
        self.log_w -= self.log_w.max()

    def reset(self):
        self.log_w[:] = 0.0

    def to_dict(self):
        return {**super().to_dict(), "gamma": self.gamma, "feedback": self.feedback, "log_w": self.log_w.tolist()}

    @classmethod
    def _restore(cls, d):
        s = cls(d["n_arms"], d["gamma"], feedback=d["feedback"])
        s.log_w = np.array(d["log_w"], float)
        return s


class Exp3R(Exp3):
    """Exp3 with a windowed mean-shift detector that resets the weights."""

    name = "exp3r"

    def __init__(self, n_arms, gamma=None, horizon=1000, feedback="full", window: int = 20, threshold: float = 0.15):
        super().__init__(n_arms, gamma, horizon, feedback)
        self.window = window
        self.threshold = threshold
        self.history = [deque(maxlen=2 * window) for _ in range(n_arms)]
        self.resets = 0

    def drift(self, arm: int) -> bool:
        h = self.history[arm]
        if len(h) < 2 * self.window:
            return False
        x = np.array(h)
        return abs(x[self.window :].mean() - x[: self.window].mean()) > self.threshold

    def update(self, rewards):
        super().update(rewards)
        for arm, r in rewards.items():
            self.history[arm].append(float(r))
        if any(self.drift(arm) for arm in rewards):
            self.reset()
            for h in self.history:
                h.clear()
            self.resets += 1

    def to_dict(self):
        return {
            **super().to_dict(),
            "window": self.window,
            "threshold": self.threshold,
            "history": [list(h) for h in self.history],
            "resets": self.resets,
        }

    @classmethod
    def _restore(cls, d):
        s = cls(d["n_arms"], d["gamma"], feedback=d["feedback"], window=d["window"], threshold=d["threshold"])
        s.log_w = np.array(d["log_w"], float)
        for h, vals in zip(s.history, d["history"]):
            h.extend(vals)
        s.resets = d["resets"]
        return s


class ThompsonSampling(Sampler):
    """Gaussian posteriors with known observation precision."""

    name = "ts"

    def __init__(self, n_arms, prior_mean=0.5, prior_precision=1.0, obs_precision=4.0):
        super().__init__(n_arms)
        self.prior_mean = prior_mean
        self.prior_precision = prior_precision
        self.obs_precision = obs_precision
        self.counts = np.zeros(n_arms)
        self.sums = np.zeros(n_arms)

    @property
    def precision(self) -> np.ndarray:
        return self.prior_precision + self.obs_precision * self.counts

    @property
    def mean(self) -> np.ndarray:
        return (self.prior_precision * self.prior_mean + self.obs_precision * self.sums) / self.precision

    def select(self, rng) -> int:
        draws = self.mean + rng.standard_normal(self.n_arms) / np.sqrt(self.precision)
        return int(np.argmax(draws))

    def update(self, rewards):
        super().update(rewards)
        for arm, r in rewards.items():
            self.counts[arm] += 1.0
            self.sums[arm] += r

    def to_dict(self):
        return {
            **super().to_dict(),
            "prior_mean": self.prior_mean,
            "prior_precision": self.prior_precision,
            "obs_precision": self.obs_precision,
            "counts": self.counts.tolist(),
            "sums": self.sums.tolist(),
        }

    @classmethod
    def _restore(cls, d):
        kw = {k: d[k] for k in ("prior_mean", "prior_precision", "obs_precision")}
        s = cls(d["n_arms"], **kw) if cls is ThompsonSampling else cls(d["n_arms"], discount=d["discount"], **kw)
        s.counts = np.array(d["counts"], float)
        s.sums = np.array(d["sums"], float)
        return s


class DiscountedThompsonSampling(ThompsonSampling):
    """Thompson sampling whose evidence decays by ``discount`` on every update."""

    name = "dts"

    def __init__(self, n_arms, discount=0.95, **kw):
        super().__init__(n_arms, **kw)
        if not 0.0 < discount <= 1.0:
            raise ConfigurationError(f"discount must be in (0, 1], got {discount}")
        self.discount = discount

    def update(self, rewards):
        _check_rewards(rewards, self.n_arms)
        self.counts *= self.discount
        self.sums *= self.discount
        super().update(rewards)

    def to_dict(self):
        return {**super().to_dict(), "discount": self.discount}


SAMPLERS = {
    cls.name: cls
    for cls in (RoundRobin, Uniform, Fixed, Exp3, Exp3R, ThompsonSampling, DiscountedThompsonSampling)
}


def make_sampler(algorithm: str, n_arms: int, horizon: int = 1000, **kw) -> Sampler:
    """Build a sampler by name, dropping keyword arguments it does not take."""
    algorithm = algorithm.lower()
    if algorithm not in SAMPLERS:
        raise ConfigurationError(f"unknown bandit algorithm {algorithm!r}")
    kw = {k: v for k, v in kw.items() if v is not None}
    if algorithm in ("exp3", "exp3r"):
        allowed = {"gamma", "feedback", "window", "threshold"} if algorithm == "exp3r" else {"gamma", "feedback"}
        return SAMPLERS[algorithm](n_arms, horizon=horizon, **{k: v for k, v in kw.items() if k in allowed})
    if algorithm == "dts":
        return DiscountedThompsonSampling(n_arms, **{k: v for k, v in kw.items() if k in ("discount",)})
    if algorithm == "fixed":
        return Fixed(n_arms, kw["arm"])
    return SAMPLERS[algorithm](n_arms)


# ------------------------------------------------------------- simulation


class BernoulliArms:
    def __init__(self, means):
        self.means = np.asarray(means, float)

    @property
    def n_arms(self) -> int:
        return len(self.means)

    def draw(self, rng) -> np.ndarray:
        return (rng.random(self.n_arms) < self.means).astype(float)


class GaussianArms(BernoulliArms):
    """Rewards ``clip(mean + sd * N(0, 1), 0, 1)``."""

    def __init__(self, means, sd=0.1):
        super().__init__(means)
        self.sd = sd

    def draw(self, rng):
        return np.clip(self.means + self.sd * rng.standard_normal(self.n_arms), 0.0, 1.0)


def parse_env(spec: str):
    """``bernoulli:0.9,0.1``, ``gaussian:0.6,0.4[:sd]`` or ``single``."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    if kind == "single":
        return BernoulliArms([float(rest) if rest else 0.5])
    if kind == "bernoulli":
        return BernoulliArms([float(x) for x in rest.split(",")])
    if kind == "gaussian":
        means, _, sd = rest.partition(":")
        return GaussianArms([float(x) for x in means.split(",")], float(sd) if sd else 0.1)
    raise ConfigurationError(f"unknown environment {spec!r}")


@dataclass
class SimTrace:
    arms: np.ndarray
    rewards: np.ndarray
    regret: np.ndarray
    best_arm: int

    def best_arm_rate(self, last: int) -> float:
        return float(np.mean(self.arms[-last:] == self.best_arm))


def simulate(sampler: Sampler, env, horizon: int, rng: np.random.Generator, feedback: str = "bandit") -> SimTrace:
    """Play ``horizon`` rounds; regret is cumulative pseudo-regret to the best fixed arm."""
    if horizon < 1:
        raise ConfigurationError("horizon must be at least 1")
    if sampler.n_arms != env.n_arms:
        raise ConfigurationError("sampler and environment disagree on the number of arms")
    env_rng, alg_rng = rng.spawn(2)
    arms = np.zeros(horizon, dtype=int)
    rewards = np.zeros(horizon)
    for t in range(horizon):
        arm = sampler.select(alg_rng)
        draw = env.draw(env_rng)
        arms[t] = arm
        rewards[t] = draw[arm]
        if feedback == "full":
            sampler.update({k: float(x) for k, x in enumerate(draw)})
        else:
            sampler.update({arm: float(draw[arm])})
    best = int(np.argmax(env.means))
    regret = np.cumsum(env.means[best] - env.means[arms])
    return SimTrace(arms, rewards, regret, best)
