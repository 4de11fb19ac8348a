"""projkit: sparse feature selection for GLMs by projecting a reference model.

The workflow: fit (or ingest) a reference posterior, cluster its draws,
project the clustered predictive onto feature subsets by KL minimization,
rank features by forward or L1-penalized search, and validate every path
size with cross-validation or Pareto-smoothed importance-sampling LOO.
"""

from .errors import ConvergenceError, EmptyScreenError, ProjkitError, SingularMatrixError
from .glm import DesignMatrix, Family, FitResult, irls_fit, log_lik
from .projection import (
    PosteriorDraws,
    ProjectedSubmodel,
    ReferenceFit,
    cluster_draws,
    predictive_log_density,
    project,
    projection_loss,
)
from .psis import psis_smooth
from .reference import ReferenceModel, SpcConfig, fit_spc_reference, ingest_draws, tau0
from .search import SearchConfig, SelectionPath, build_path, forward_search, l1_path
from .simdata import ToyConfig, generate_toy, rank_experiment
from .validation import (
    CvResult,
    PointwiseUtilities,
    UtilitySummary,
    cv_varsel,
    eval_test,
    relative_utility,
    select_size,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "CvResult",
    "DesignMatrix",
    "EmptyScreenError",
    "Family",
    "FitResult",
    "PointwiseUtilities",
    "PosteriorDraws",
    "ProjectedSubmodel",
    "ProjkitError",
    "ReferenceFit",
    "ReferenceModel",
    "SearchConfig",
    "SelectionPath",
    "SingularMatrixError",
    "SpcConfig",
    "ToyConfig",
    "UtilitySummary",
    "build_path",
    "cluster_draws",
    "cv_varsel",
    "eval_test",
    "fit_spc_reference",
    "forward_search",
    "generate_toy",
    "ingest_draws",
    "irls_fit",
    "l1_path",
    "log_lik",
    "predictive_log_density",
    "project",
    "projection_loss",
    "psis_smooth",
    "rank_experiment",
    "relative_utility",
    "select_size",
    "tau0",
    "__version__",
]
