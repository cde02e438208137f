"""Runnable experiment harnesses."""

from .analysis import (
    CorrelationResult,
    correlate,
    correlation_by_seed,
    generalization_gap,
    regularizer_generalization_correlation,
)
from .freedman import (
    FREEDMAN_ZETA,
    LDConfig,
    SelectionPath,
    SelectionPathEntry,
    eq5_objective_estimate,
    forward_select,
    freedman_zeta,
    ols_fit,
)
from .weight_decay import (
    WeightDecayConfig,
    WeightDecayRun,
    final_test_accuracy,
    min_weight_norm_baseline,
    run_weight_decay_experiment,
    split_small,
)

__all__ = [
    "CorrelationResult",
    "correlate",
    "correlation_by_seed",
    "generalization_gap",
    "regularizer_generalization_correlation",
    "FREEDMAN_ZETA",
    "LDConfig",
    "SelectionPath",
    "SelectionPathEntry",
    "eq5_objective_estimate",
    "forward_select",
    "freedman_zeta",
    "ols_fit",
    "WeightDecayConfig",
    "WeightDecayRun",
    "final_test_accuracy",
    "min_weight_norm_baseline",
    "run_weight_decay_experiment",
    "split_small",
]
