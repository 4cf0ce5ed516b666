"""Fixed-effects estimation for undirected dyadic network formation.

Links form only with mutual consent: ``Y_ij = 1`` when both
``alpha_i + x_ij'b`` and ``alpha_j + x_ji'b`` exceed independent shocks.
The package estimates the slopes ``b`` and the node effects ``alpha`` by
moments and by a one-step likelihood refinement, removes the
incidental-parameter bias with the split-network jackknife and bagging,
and estimates average partial effects.
"""

from .alpha import AlphaConvergenceError, AlphaSolveReport, BoundaryDegreeWarning, solve_alpha
from .ape import (
    ApeResult,
    EffectKind,
    PartialEffectSpec,
    ape_bias_diagnostics,
    ape_hat,
    ape_sj_bg,
    default_specs,
    estimate_ape,
    partial_effect_dyad,
    sigma_Delta_hat,
    sigma_delta_hat,
)
from .dgp import DgpConfig, EmpiricalLikeConfig, simulate_empirical_like, simulate_network
from .io import LoadOptions, load_dyad_csv, read_dyads, save_dyad_csv
from .jmm import (
    JmmSettings,
    NewtonDivergenceError,
    estimate_jmm,
    jacobian_blocks,
    moments,
    solve_beta_jmm,
    split_jackknife,
    variance_blocks,
)
from .linalg import SingularMatrixError
from .mc import McConfig, McReport, run_replications
from .model import (
    LOGISTIC,
    NORMAL,
    Family,
    LinkFunction,
    ModelCache,
    NetworkData,
    ParamState,
    build_cache,
    get_link,
    log_likelihood,
)
from .onestep import bagging, estimate_one_step, pseudo_true_values
from .pipeline import METHODS, EstimationResult, estimate_all

__version__ = "0.1.0"

__all__ = [
    "AlphaConvergenceError",
    "AlphaSolveReport",
    "ApeResult",
    "BoundaryDegreeWarning",
    "DgpConfig",
    "EffectKind",
    "EmpiricalLikeConfig",
    "EstimationResult",
    "Family",
    "JmmSettings",
    "LOGISTIC",
    "LinkFunction",
    "LoadOptions",
    "METHODS",
    "McConfig",
    "McReport",
    "ModelCache",
    "NORMAL",
    "NetworkData",
    "NewtonDivergenceError",
    "ParamState",
    "PartialEffectSpec",
    "SingularMatrixError",
    "ape_bias_diagnostics",
    "ape_hat",
    "ape_sj_bg",
    "bagging",
    "build_cache",
    "default_specs",
    "estimate_all",
    "estimate_ape",
    "estimate_jmm",
    "estimate_one_step",
    "get_link",
    "jacobian_blocks",
    "load_dyad_csv",
    "log_likelihood",
    "moments",
    "partial_effect_dyad",
    "pseudo_true_values",
    "read_dyads",
    "run_replications",
    "save_dyad_csv",
    "sigma_Delta_hat",
    "sigma_delta_hat",
    "simulate_empirical_like",
    "simulate_network",
    "solve_alpha",
    "solve_beta_jmm",
    "split_jackknife",
    "variance_blocks",
]
