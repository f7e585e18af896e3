"""Standardized mean differences before and after matching."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .cohort import CohortTable, CovariateSchema, Kind, Role
from .errors import DegenerateVariance
from .matching import MatchedSample

THRESHOLDS = (0.10, 0.25)
NO_LEVEL = ""  # numeric covariates have no level


def smd_numeric(treated_values, control_values) -> float:
    """Pooled-variance SMD ``(mean_t - mean_c) / sqrt((var_t + var_c) / 2)``
    with n-1 variances; missing values are dropped."""
    t = np.asarray(treated_values, dtype=float)
    c = np.asarray(control_values, dtype=float)
    t, c = t[~np.isnan(t)], c[~np.isnan(c)]
    if t.size < 2 or c.size < 2:
        raise ValueError("need at least two non-missing values per arm")
    diff = t.mean() - c.mean()
    pooled = (t.var(ddof=1) + c.var(ddof=1)) / 2.0
    if pooled == 0.0:
        if diff == 0.0:
            return 0.0
        warnings.warn("zero pooled variance with unequal means", DegenerateVariance)
        return float(np.copysign(np.inf, diff))
    return float(diff / np.sqrt(pooled))


def smd_categorical(treated_values, control_values, level) -> float:
    """Level-indicator SMD using the combined-arm proportion for the
    binomial variance."""
    t = np.asarray([v for v in treated_values if v is not None], dtype=object)
    c = np.asarray([v for v in control_values if v is not None], dtype=object)
    pt = float(np.mean(t == level)) if t.size else 0.0
    pc = float(np.mean(c == level)) if c.size else 0.0
    pbar = (pt * t.size + pc * c.size) / (t.size + c.size)
    if pbar <= 0.0 or pbar >= 1.0:
        return 0.0
    return (pt - pc) / float(np.sqrt(pbar * (1.0 - pbar)))


@dataclass
class BalanceReport:
    per_level: pd.DataFrame
    per_covariate_max: dict[str, dict[str, float]]
    thresholds: tuple[float, float] = THRESHOLDS

    def max_after(self) -> dict[str, float]:
        return {k: v["after"] for k, v in self.per_covariate_max.items()}

    def max_before(self) -> dict[str, float]:
        return {k: v["before"] for k, v in self.per_covariate_max.items()}

    def summary(self):
        after = self.max_after()
        lo, hi = self.thresholds
        return {
            "thresholds": list(self.thresholds),
            "per_covariate_max": self.per_covariate_max,
            "n_covariates": len(after),
            "n_below_low": int(sum(v < lo for v in after.values())),
            "n_below_high": int(sum(v < hi for v in after.values())),
            "all_below_high": bool(all(v < hi for v in after.values())),
            "convention": "categorical SMD pools the level proportion over both arms; "
            "matched controls counted once per appearance",
        }


def balance_covariates(table: CohortTable):
    covs = table.schema.by_role(Role.MATCHING, Role.BLOCKING)
    if table.pos_column:
        covs = covs + [table.pos_column]
    return covs


def _arm_values(frame, col, rows):
    return frame[col].to_numpy()[rows]


def balance_report(before: CohortTable, after: MatchedSample, schema: CovariateSchema | None = None, covariates=None) -> BalanceReport:
    """Per-level SMDs on the trimmed sample and on the matched sample."""
    schema = schema or before.schema
    covs = balance_covariates(before) if covariates is None else list(covariates)
    frame = before.frame
    t_all = np.flatnonzero(before.treated == 1)
    c_all = np.flatnonzero(before.treated == 0)
    mframe = after.table.frame
    t_m, c_m = after.treated_rows, after.control_rows
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateVariance)
        for c in covs:
            kind = Kind.NUMERIC if c == before.pos_column else schema.kind_of(c)
            if kind == Kind.NUMERIC:
                b = smd_numeric(_arm_values(frame, c, t_all), _arm_values(frame, c, c_all))
                a = smd_numeric(_arm_values(mframe, c, t_m), _arm_values(mframe, c, c_m))
                rows.append((c, NO_LEVEL, b, a))
                continue
            vals = [_arm_values(frame, c, t_all), _arm_values(frame, c, c_all), _arm_values(mframe, c, t_m), _arm_values(mframe, c, c_m)]
            vals = [np.array([None if _na(v) else str(v) for v in x], dtype=object) for x in vals]
            levels = sorted({v for x in vals for v in x if v is not None})
            for lv in levels:
                rows.append((c, lv, smd_categorical(vals[0], vals[1], lv), smd_categorical(vals[2], vals[3], lv)))
    per_level = pd.DataFrame(rows, columns=["covariate", "level", "smd_before", "smd_after"])
    maxima = {}
    for c in covs:
        sub = per_level[per_level["covariate"] == c]
        if len(sub):
            maxima[c] = {"before": float(sub["smd_before"].abs().max()), "after": float(sub["smd_after"].abs().max())}
    return BalanceReport(per_level, maxima)


def _na(v):
    return v is None or (isinstance(v, float) and np.isnan(v))
