"""Workbench for critical branching processes in random environment
conditioned to die out at a fixed generation.

Exact fractional-linear generating-function algebra in log space, the
associated random-walk fluctuation toolkit, conditioned-path samplers, and
the experiment drivers that verify the extinction-tail exponent, the
discrete conditional limit law and the constancy of rescaled trajectories.
"""

from .conditional import (
    ConditionalMarginal,
    ConditionedPaths,
    PathSample,
    conditional_marginal_transform,
    delta_n,
    laplace_Yt_given_T,
    marginal_from_tables,
    rejection_joint_path,
    sample_conditioned_paths,
    sample_Zm_given_T,
)
from .experiments import (
    EstimateReport,
    LimitLawResult,
    PathConstancyResult,
    PhiFunctional,
    RatioConvergenceResult,
    TailFit,
    conditional_Zn_pmf,
    limit_law_Zn,
    path_constancy,
    ratio_convergence,
    tail_fit,
)
from .genfun import (
    Composition,
    ExtinctionPmf,
    SuffixTable,
    build_suffix_table,
    empty_composition,
    evaluate,
    extend_left,
    extend_right,
    extinction_pmf_given_env,
    pgf_coefficients,
    prefix_compositions,
    splice,
)
from .offspring import (
    AssumptionError,
    AssumptionsReport,
    EnvironmentModel,
    EnvRealization,
    FracLinLaw,
    check_assumptions,
    law_from_params,
    pgf_eval,
    pmf,
    preset,
    sample_environment,
    sample_offspring,
)
from .walk import (
    HarmonicityReport,
    RenewalTable,
    StarTable,
    WalkSummary,
    estimate_renewal,
    harmonicity_residuals,
    pplus_expectation,
    star_constants,
    summarize,
    walk_from_env,
)

__version__ = "0.1.0"
