"""Bandit task scheduling for multi-task neural combinatorial optimisation."""

from .bandit import make_sampler, simulate
from .influence import AvgInfluence, GradientLedger, build_matrix, decomposition_effects, reward
from .model import ModelSpec, init_params, policy_gradient_loss
from .oracles import gain, optimality_gap, oracle_solve
from .tasks import ConfigurationError, ProtocolError, Task, TaskRegistry
from .trainer import EvalReport, TrainConfig, evaluate_suite, train

__version__ = "0.1.0"
