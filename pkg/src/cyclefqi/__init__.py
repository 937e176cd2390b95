"""Offline reinforcement learning for cyclic Markov decision processes.

Stage-wise fitted Q-iteration over a vector of per-stage Q-functions, a
flattened single-MDP baseline, sieve-based value estimation with sandwich
covariances and joint chi-squared confidence regions, and the two reference
simulation environments (linear-Gaussian and daily glucose control).
"""
from .datasets import StageDataset, Transition, load_datasets, save_datasets
from .fqi import (
    FlattenedProblem,
    QVector,
    TrainConfig,
    build_flattened_problem,
    greedy_policy,
    train_cyclefqi,
    train_flattened_fqi,
)
from .mdp import (
    CyclicMdpSpec,
    PolicyVector,
    StageSpec,
    UpdateSet,
    bellman_target,
    constrained_state_value,
    cycle_discount,
    cycle_index,
    cumulative_reward_rollout,
    monte_carlo_value,
    rollout,
    value_upper_bound,
)
from .regressors import (
    BasisSpec,
    LinearSieveSpec,
    RandomForestSpec,
    TabularSpec,
    build_basis,
    fit,
    predict,
)
from .sieve import (
    GlobalSystem,
    InferenceConfig,
    InferenceResult,
    SieveLayout,
    assemble_global_system,
    confidence_region_contains,
    ensemble_evaluate,
    estimate_covariance,
    estimate_value,
    expected_feature_matrix,
    local_feature_psi,
    mahalanobis_d2,
    policy_weighted_u,
    solve_beta,
)
from .stats import chi2_cdf, chi2_quantile
from .tabular import FiniteCyclicMdp, apply_bellman_operator_tabular, fixed_point_q

__version__ = "0.1.0"
