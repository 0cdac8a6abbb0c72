"""Intersectional MAIHDA toolkit.

Builds intersectional strata from categorical social factors, fits two-level
random-intercept linear models (unadjusted and main-effects-adjusted) by REML
or ML, and derives shrunken stratum effects, variance partition coefficients,
proportional changes in stratum variance, interaction scans, cross-cohort
comparisons, and disclosure-safe reports.
"""

__version__ = "0.1.0"

from .analysis import (
    CohortComparison,
    MaihdaModelResult,
    ScanResult,
    ScanRow,
    StratumTableRow,
    benchmark_share,
    compare_cohorts,
    compare_value_maps,
    fit_model1,
    fit_model2,
    interaction_scan,
    pcv,
    single_covariate_scan,
    stratum_table,
    top_bottom,
    vpc,
)
from .ingest import (
    CohortDataset,
    DataError,
    FactorSpec,
    StratumIndex,
    StratumSummary,
    build_strata,
    load_dataset,
    parse_factor_config,
    summarize_strata,
)
from .lmm import (
    FitError,
    FitResult,
    FixedEffects,
    OlsResult,
    StratumEffect,
    VarianceComponents,
    eb_predict,
    fit,
    gls_fixed_effects,
    ols_fit,
    profiled_deviance,
    vc_standard_errors,
)
from .sim import (
    InteractionShift,
    SimConfig,
    generate,
    true_stratum_means,
    write_dataset_csv,
    write_factor_config,
    write_truth_json,
)
from .transform import (
    DesignMatrix,
    intercept_design,
    main_effects_design,
    normal_scores,
    standardize,
    with_interaction,
)

__all__ = [
    "CohortComparison",
    "CohortDataset",
    "DataError",
    "DesignMatrix",
    "FactorSpec",
    "FitError",
    "FitResult",
    "FixedEffects",
    "InteractionShift",
    "MaihdaModelResult",
    "OlsResult",
    "ScanResult",
    "ScanRow",
    "SimConfig",
    "StratumEffect",
    "StratumIndex",
    "StratumSummary",
    "StratumTableRow",
    "VarianceComponents",
    "__version__",
    "benchmark_share",
    "build_strata",
    "compare_cohorts",
    "compare_value_maps",
    "eb_predict",
    "fit",
    "fit_model1",
    "fit_model2",
    "generate",
    "gls_fixed_effects",
    "interaction_scan",
    "intercept_design",
    "load_dataset",
    "main_effects_design",
    "normal_scores",
    "ols_fit",
    "parse_factor_config",
    "pcv",
    "profiled_deviance",
    "single_covariate_scan",
    "standardize",
    "stratum_table",
    "summarize_strata",
    "top_bottom",
    "vc_standard_errors",
    "vpc",
    "with_interaction",
    "true_stratum_means",
    "write_dataset_csv",
    "write_factor_config",
    "write_truth_json",
]
