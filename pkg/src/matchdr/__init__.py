"""Blocked, calipered propensity-score matching on a composite Gower/PoS
distance, doubly robust effect estimation with bootstrap inference,
balance diagnostics and Rosenbaum sensitivity bounds."""

__version__ = "0.1.0"

from .balance import BalanceReport, balance_report, smd_categorical, smd_numeric
from .cohort import (
    CohortTable,
    CovariateSchema,
    CovariateSpec,
    Kind,
    Role,
    SchemaConfig,
    align_pretreatment,
    apply_schema,
    classify_covariates,
    collapse_duplicates,
    impute_missing,
    load_cohort,
    write_cohort,
)
from .estimator import DrResult, bootstrap_ci, estimate_outcome, stabilized_weights
from .matching import MatchedSample, MatchSpec, composite_distance, gower_distance, match
from .propensity import PropensityFit, common_support, fit_logistic, trim_to_support
from .sensitivity import SensitivityTable, rosenbaum_bounds, sensitivity_for_significant

__all__ = [
    "BalanceReport",
    "CohortTable",
    "CovariateSchema",
    "CovariateSpec",
    "DrResult",
    "Kind",
    "MatchSpec",
    "MatchedSample",
    "PropensityFit",
    "Role",
    "SchemaConfig",
    "SensitivityTable",
    "align_pretreatment",
    "apply_schema",
    "balance_report",
    "bootstrap_ci",
    "classify_covariates",
    "collapse_duplicates",
    "common_support",
    "composite_distance",
    "estimate_outcome",
    "fit_logistic",
    "gower_distance",
    "impute_missing",
    "load_cohort",
    "match",
    "rosenbaum_bounds",
    "sensitivity_for_significant",
    "smd_categorical",
    "smd_numeric",
    "stabilized_weights",
    "trim_to_support",
    "write_cohort",
]
