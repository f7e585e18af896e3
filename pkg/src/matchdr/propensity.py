"""Treatment-assignment model: logistic regression fitted by IRLS, score
clipping and the common-support restriction."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from .cohort import CohortTable, CovariateSchema, Kind, Role
from .errors import EmptySupport, RankDeficient
from .glm import aliased_columns, irls_logistic

INTERCEPT = "(intercept)"


@dataclass
class DesignInfo:
    """Column recipe for a main-effects design with one-hot categoricals.

    The lexicographically smallest level of each categorical is the
    dropped reference. Levels are learned once and reused by
    :meth:`transform`, so predictions on other rows use the same encoding.
    """

    covariates: list[str]
    kinds: dict[str, Kind]
    levels: dict[str, list[str]]
    interactions: list[tuple[str, str]] = field(default_factory=list)

    def _blocks(self, frame):
        blocks = {}
        for c in self.covariates:
            if self.kinds[c] == Kind.NUMERIC:
                blocks[c] = ([c], frame[c].to_numpy(dtype=float)[:, None], [True])
            else:
                vals = frame[c].astype(object).to_numpy()
                lv = self.levels[c]
                mat = np.column_stack([(vals == l).astype(float) for l in lv]) if lv else np.empty((len(frame), 0))
                blocks[c] = ([f"{c}[{l}]" for l in lv], mat, [False] * len(lv))
        return blocks

    def transform(self, frame: pd.DataFrame):
        blocks = self._blocks(frame)
        names, mats, numeric = [], [], []
        for c in self.covariates:
            n, m, k = blocks[c]
            names += n
            mats.append(m)
            numeric += k
        for a, b in self.interactions:
            na, ma, ka = blocks[a]
            nb, mb, kb = blocks[b]
            for i in range(len(na)):
                for j in range(len(nb)):
                    names.append(f"{na[i]}:{nb[j]}")
                    mats.append((ma[:, i] * mb[:, j])[:, None])
                    numeric.append(ka[i] or kb[j])
        X = np.hstack(mats) if mats else np.empty((len(frame), 0))
        return X, names, np.array(numeric, dtype=bool)

    def to_dict(self):
        return {
            "covariates": self.covariates,
            "kinds": {k: v.value for k, v in self.kinds.items()},
            "levels": self.levels,
            "interactions": [list(p) for p in self.interactions],
        }


def make_design(frame, schema: CovariateSchema, covariates, interactions=(), pos_column=None) -> DesignInfo:
    kinds = {}
    levels = {}
    covs = list(covariates)
    if pos_column is not None and pos_column not in covs:
        covs.append(pos_column)
    for c in covs:
        kind = Kind.NUMERIC if c == pos_column else schema.kind_of(c)
        kinds[c] = kind
        if kind == Kind.CATEGORICAL:
            present = sorted({str(v) for v in frame[c].dropna().astype(object)})
            levels[c] = present[1:]
    for a, b in interactions:
        for name in (a, b):
            if name not in kinds:
                raise KeyError(f"interaction term '{name}' is not a design covariate")
    return DesignInfo(covs, kinds, levels, [tuple(p) for p in interactions])


def default_design_covariates(table: CohortTable):
    schema = table.schema
    return schema.by_role(Role.MATCHING, Role.BLOCKING)


@dataclass
class PropensityFit:
    coefficients: dict[str, float]
    scores: np.ndarray
    logits: np.ndarray
    epsilon: float
    treated: np.ndarray
    ids: np.ndarray
    design: DesignInfo
    raw_scores: np.ndarray
    n_iter: int = 0
    converged: bool = True
    loglik_path: list = field(default_factory=list)
    support_low: float = float("nan")
    support_high: float = float("nan")
    retained: np.ndarray | None = None

    def summary(self):
        retained = self.retained if self.retained is not None else np.ones(len(self.scores), bool)
        return {
            "coefficients": self.coefficients,
            "iterations": self.n_iter,
            "converged": self.converged,
            "loglik": self.loglik_path[-1] if self.loglik_path else None,
            "epsilon": self.epsilon,
            "support_low": self.support_low,
            "support_high": self.support_high,
            "n_units": int(len(self.scores)),
            "n_trimmed": int((~retained).sum()),
            "n_trimmed_treated": int((~retained & (self.treated == 1)).sum()),
            "n_trimmed_control": int((~retained & (self.treated == 0)).sum()),
            "design": self.design.to_dict(),
            "artifact_defaults": ["epsilon", "max_iter", "tol"],
        }

    def predict(self, frame):
        X, names, _ = self.design.transform(frame)
        beta = np.array([self.coefficients[n] for n in names])
        return expit(self.coefficients[INTERCEPT] + X @ beta)


def clip_scores(scores, epsilon=1e-6):
    """Clamp probabilities into ``[epsilon, 1 - epsilon]``."""
    if not 0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 0.5)")
    return np.clip(np.asarray(scores, dtype=float), epsilon, 1.0 - epsilon)


def fit_logistic(
    table: CohortTable,
    covariates=None,
    interactions=None,
    max_iter=100,
    tol=1e-8,
    epsilon=1e-6,
) -> PropensityFit:
    """Fit Pr(T=1 | X) with main effects plus the declared interactions.

    Numeric columns are z-scored for the Newton iterations and the
    coefficients mapped back to the original scale.
    """
    if table.schema is None:
        raise ValueError("table needs a classified schema")
    covariates = default_design_covariates(table) if covariates is None else list(covariates)
    interactions = table.interactions if interactions is None else interactions
    design = make_design(table.frame, table.schema, covariates, interactions, table.pos_column)
    X, names, numeric = design.transform(table.frame)
    y = table.treated.astype(float)
    n, p = X.shape
    if n <= p + 1:
        raise RankDeficient(f"n={n} is not larger than the number of parameters ({p + 1})")
    full = np.column_stack([np.ones(n), X])
    all_names = [INTERCEPT] + names
    bad = aliased_columns(full, all_names)
    if bad:
        raise RankDeficient(f"propensity design is rank deficient; aliased columns: {bad}", bad)

    center = np.where(numeric, X.mean(axis=0), 0.0)
    scale = np.where(numeric, X.std(axis=0), 1.0)
    scale[scale == 0] = 1.0
    Z = np.column_stack([np.ones(n), (X - center) / scale])
    res = irls_logistic(Z, y, max_iter=max_iter, tol=tol, names=all_names)
    slopes = res.coef[1:] / scale
    intercept = res.coef[0] - np.sum(slopes * center)
    coefficients = {INTERCEPT: float(intercept)}
    coefficients.update({nm: float(b) for nm, b in zip(names, slopes)})

    raw = expit(intercept + X @ slopes)
    scores = clip_scores(raw, epsilon)
    return PropensityFit(
        coefficients=coefficients,
        scores=scores,
        logits=logit(scores),
        epsilon=epsilon,
        treated=table.treated.copy(),
        ids=table.ids.copy(),
        design=design,
        raw_scores=raw,
        n_iter=res.n_iter,
        converged=res.converged,
        loglik_path=res.loglik_path,
    )


def common_support(fit: PropensityFit) -> PropensityFit:
    """Flag units whose score lies in [max of arm minima, min of arm maxima]."""
    e = fit.scores
    t = fit.treated == 1
    if not t.any() or t.all():
        raise EmptySupport("both arms must be non-empty")
    low = max(e[t].min(), e[~t].min())
    high = min(e[t].max(), e[~t].max())
    if low > high:
        raise EmptySupport(f"no common support: lower bound {low:.6g} exceeds upper bound {high:.6g}")
    retained = (e >= low) & (e <= high)
    return replace(fit, support_low=float(low), support_high=float(high), retained=retained)


def trim_to_support(table: CohortTable, fit: PropensityFit):
    """Restrict both the table and the fit to retained units."""
    if fit.retained is None:
        fit = common_support(fit)
    keep = fit.retained
    sub = table.subset(keep)
    sub_fit = replace(
        fit,
        scores=fit.scores[keep],
        logits=fit.logits[keep],
        raw_scores=fit.raw_scores[keep],
        treated=fit.treated[keep],
        ids=fit.ids[keep],
        retained=np.ones(int(keep.sum()), dtype=bool),
    )
    return sub, sub_fit
