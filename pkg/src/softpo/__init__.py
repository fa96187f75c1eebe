"""Soft policy optimization laboratory for enumerable sequence environments."""

from .envs import SeededRandomEnv, SequenceEnv, SuffixMatchEnv, TargetSetEnv, e1_env
from .errors import CapacityError, ConfigError, ConsistencyError, NumericalError
from .evaluation import EvalSpec, evaluate, pass_at_k
from .losses import LossSpec, PpoConfig, TabularValueModel, TinyNetValueModel
from .oracle import ObjectiveBreakdown, OptimalPolicyTable, SoftValueTable, \
    objective_value, optimal_policy, soft_values, softmax_operator
from .policies import DecodingConfig, Policy, PolicyOptimizer, Snapshot, \
    TabularPolicy, TinyNetPolicy, sample_rollouts, sample_trajectory, \
    seeded_tabular, uniform_tabular
from .qparam import QView, QZeroStore, advantages, bellman_residual, cumulative_q, \
    make_qview, qvalues_to_inputs
from .runtime import MetricsLog, RunAborted, RunConfig, RunResult, mix_batch, run
from .store import OfflineDataset, Trajectory

__all__ = [
    "CapacityError", "ConfigError", "ConsistencyError", "NumericalError",
    "SequenceEnv", "TargetSetEnv", "SuffixMatchEnv", "SeededRandomEnv", "e1_env",
    "SoftValueTable", "OptimalPolicyTable", "ObjectiveBreakdown",
    "softmax_operator", "soft_values", "optimal_policy", "objective_value",
    "Policy", "TabularPolicy", "TinyNetPolicy", "DecodingConfig", "Snapshot",
    "PolicyOptimizer", "uniform_tabular", "seeded_tabular",
    "sample_rollouts", "sample_trajectory",
    "QView", "QZeroStore", "advantages", "cumulative_q", "make_qview",
    "qvalues_to_inputs", "bellman_residual",
    "LossSpec", "PpoConfig", "TabularValueModel", "TinyNetValueModel",
    "Trajectory", "OfflineDataset",
    "RunConfig", "RunResult", "RunAborted", "MetricsLog", "run", "mix_batch",
    "EvalSpec", "evaluate", "pass_at_k",
]
