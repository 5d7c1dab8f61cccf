"""Fused optimal causal trees.

Globally optimal piecewise-linear outcome trees with an L0 fusion penalty
tying coefficients across leaves, subgroup treatment-effect estimation with
bootstrap intervals, a greedy baseline, and a seeded simulation benchmark.
"""

from .cart import CartConfig, fit_cart
from .causal import SubgroupEffect, bootstrap_ci, bootstrap_taus, estimate_sate
from .data import (
    Dataset,
    DesignRow,
    Standardizer,
    design_matrix,
    design_row,
    load_csv,
    save_csv,
    standardize,
)
from .fitting import (
    CoefTable,
    DescentBudget,
    ExactBudget,
    FitResult,
    FittedModel,
    FusionPattern,
    baseline_loss,
    fit_fused,
    search_fusion,
    set_partitions,
)
from .mip import emit_lp
from .partition import (
    Membership,
    Split,
    TreeStructure,
    assign,
    candidate_thresholds,
    default_candidate_grid,
    enumerate_trees,
)
from .select import LambdaGrid, SelectionTrace, bic, select_lambda
from .simlab import (
    MetricsRow,
    PRESETS,
    SimScenario,
    Truth,
    evaluate,
    generate,
    oracle_sate,
    run_experiment,
    structure_recovered,
    true_tree,
)
from .solver import SolveConfig, SolveReport, solve, solve_path

__version__ = "0.1.0"

__all__ = [
    "CartConfig",
    "CoefTable",
    "Dataset",
    "DescentBudget",
    "DesignRow",
    "ExactBudget",
    "FitResult",
    "FittedModel",
    "FusionPattern",
    "LambdaGrid",
    "Membership",
    "MetricsRow",
    "PRESETS",
    "SelectionTrace",
    "SimScenario",
    "SolveConfig",
    "SolveReport",
    "Split",
    "Standardizer",
    "SubgroupEffect",
    "TreeStructure",
    "Truth",
    "assign",
    "baseline_loss",
    "bic",
    "bootstrap_ci",
    "bootstrap_taus",
    "candidate_thresholds",
    "default_candidate_grid",
    "design_matrix",
    "design_row",
    "emit_lp",
    "enumerate_trees",
    "estimate_sate",
    "evaluate",
    "fit_cart",
    "fit_fused",
    "generate",
    "load_csv",
    "oracle_sate",
    "run_experiment",
    "save_csv",
    "search_fusion",
    "select_lambda",
    "set_partitions",
    "solve",
    "solve_path",
    "standardize",
    "structure_recovered",
    "true_tree",
]
