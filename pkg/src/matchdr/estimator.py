"""Doubly robust (AIPW) effect estimation on the matched sample, with
stabilized weights, percentile bootstrap inference and two cross-check
estimators.

Matched sets with ``k`` controls are expanded into ``k`` treated-control
rows, each carrying weight ``1/k``, so every treated unit contributes unit
mass. Outcome models are fitted per arm on these rows with the same
weights.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .cohort import Role
from .errors import DegenerateResample, NoConvergence, RankDeficient
from .glm import aliased_columns, cholesky_least_squares, hc0_covariance, irls_poisson, weighted_least_squares
from .matching import MatchedSample
from .propensity import INTERCEPT, DesignInfo, make_design

POISSON = "poisson"
GAUSSIAN = "gaussian"
DEFAULT_TRIM = (0.10, 0.90)


def _is_count_like(values, tol=1e-8):
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return bool(v.size) and bool(np.all(v >= 0)) and bool(np.all(np.abs(v - np.round(v)) <= tol))


def select_family(values, tol=1e-8) -> str:
    """Poisson when every value is non-negative and within ``tol`` of an
    integer, Gaussian otherwise."""
    v = np.asarray(values, dtype=float)
    if np.all(np.isnan(v)):
        raise ValueError("no non-missing outcome values")
    return POISSON if _is_count_like(v, tol) else GAUSSIAN


@dataclass
class _Rows:
    """Outcome-specific view of the matched sample with missing outcomes
    removed."""

    set_ids: np.ndarray  # original set index of each kept set
    treated_rows: np.ndarray
    control_rows: np.ndarray
    control_set: np.ndarray  # position within kept sets
    control_weight: np.ndarray  # 1 / k for the kept set
    y_t: np.ndarray
    y_c: np.ndarray
    control_keep: np.ndarray  # mask over all control appearances
    n_dropped: int


def outcome_rows(matched: MatchedSample, outcome) -> _Rows:
    y = matched.table.frame[outcome].to_numpy(dtype=float)
    yt = y[matched.treated_rows]
    yc = y[matched.control_rows]
    c_ok = ~np.isnan(yc)
    k_ok = np.bincount(matched.control_set[c_ok], minlength=matched.n_sets)
    set_ok = ~np.isnan(yt) & (k_ok > 0)
    keep_c = c_ok & set_ok[matched.control_set]
    new_index = np.cumsum(set_ok) - 1
    cset = new_index[matched.control_set[keep_c]]
    k = k_ok[set_ok]
    return _Rows(
        set_ids=np.flatnonzero(set_ok),
        treated_rows=matched.treated_rows[set_ok],
        control_rows=matched.control_rows[keep_c],
        control_set=cset,
        control_weight=1.0 / k[cset],
        y_t=yt[set_ok],
        y_c=yc[keep_c],
        control_keep=keep_c,
        n_dropped=int((~set_ok).sum() + (~c_ok & set_ok[matched.control_set]).sum()),
    )


def outcome_design(matched: MatchedSample, covariates=None) -> DesignInfo:
    t = matched.table
    if covariates is None:
        covariates = t.schema.by_role(Role.MATCHING, Role.BLOCKING, Role.OUTCOME_ADJUST)
    rows = np.unique(np.concatenate([matched.treated_rows, matched.control_rows]))
    sub = t.frame.iloc[rows]
    return make_design(sub, t.schema, covariates, t.interactions, t.pos_column)


@dataclass
class OutcomeModel:
    family: str
    arm: int
    coefficients: dict[str, float]
    robust_covariance: np.ndarray | None
    names: list[str]
    columns: np.ndarray  # kept design columns (without intercept)
    fallback_used: bool = False
    dropped: list[str] = field(default_factory=list)
    note: str = ""

    @property
    def robust_se(self) -> dict[str, float]:
        se = np.sqrt(np.clip(np.diag(self.robust_covariance), 0, None))
        return dict(zip(self.names, se.tolist()))

    def predict_matrix(self, X) -> np.ndarray:
        beta = np.array([self.coefficients[n] for n in self.names])
        eta = beta[0] + X[:, self.columns] @ beta[1:]
        if self.family == POISSON and not self.fallback_used:
            return np.exp(eta)
        return eta


def _fit_arm_fast(X, y, a, names, family, arm):
    """Resample path: normal equations, no rank-revealing QR, no sandwich."""
    keep = np.flatnonzero(np.ptp(X, axis=0) > 0) if X.shape[1] else np.array([], dtype=int)
    Xk = np.column_stack([np.ones(len(y)), X[:, keep]])
    if Xk.shape[0] <= Xk.shape[1]:
        raise RankDeficient("too few rows", [])
    fallback = False
    if family == POISSON:
        try:
            res = irls_poisson(Xk, y, a)
        except (FloatingPointError, NoConvergence, ValueError):
            fallback = True
    if family == GAUSSIAN or fallback:
        res = cholesky_least_squares(Xk, y, a)
    instance = [INTERCEPT] + [names[j] for j in keep]
    return OutcomeModel(family, arm, dict(zip(instance, res.coef.tolist())), None, instance, keep, fallback)


def _fit_arm(X, y, a, names, family, arm, drop_aliased=False, robust=True, fast=False):
    if fast:
        try:
            return _fit_arm_fast(X, y, a, names, family, arm)
        except (RankDeficient, linalg.LinAlgError):
            pass
    # columns constant within the arm carry no information there
    keep = np.flatnonzero(np.ptp(X, axis=0) > 0) if X.shape[1] else np.array([], dtype=int)
    Xk = np.column_stack([np.ones(len(y)), X[:, keep]])
    bad = aliased_columns(Xk)
    if bad and drop_aliased and 0 not in bad:
        keep = np.delete(keep, np.asarray(bad) - 1)
        Xk = np.column_stack([np.ones(len(y)), X[:, keep]])
        bad = []
    kept_names = [INTERCEPT] + [names[j] for j in keep]
    dropped = [names[j] for j in range(X.shape[1]) if j not in set(keep.tolist())]
    if bad or Xk.shape[0] <= Xk.shape[1]:
        bad_names = [kept_names[j] if j < len(kept_names) else str(j) for j in bad]
        raise RankDeficient(f"arm {arm} outcome design is rank deficient; aliased columns: {bad_names}", bad_names)
    fallback = False
    note = ""
    if family == POISSON:
        try:
            res = irls_poisson(Xk, y, a)
            cov = None
            if robust:
                cov = hc0_covariance(Xk, y - res.fitted, working_weights=res.fitted, prior_weights=a)
                if not np.all(np.isfinite(cov)):
                    raise FloatingPointError("non-finite robust covariance")
        except (FloatingPointError, NoConvergence, linalg.LinAlgError, ValueError) as exc:
            fallback = True
            note = f"Poisson fit failed ({exc}); refitted by least squares"
    if family == GAUSSIAN or fallback:
        res = weighted_least_squares(Xk, y, a)
        cov = hc0_covariance(Xk, y - res.fitted, prior_weights=a) if robust else None
    return OutcomeModel(
        family=family,
        arm=arm,
        coefficients=dict(zip(kept_names, res.coef.tolist())),
        robust_covariance=cov,
        names=kept_names,
        columns=keep,
        fallback_used=fallback,
        dropped=dropped,
        note=note,
    )


def fit_outcome_models(matched: MatchedSample, outcome, covariates=None, family=None, design=None):
    """Separate treated and control regressions of ``outcome`` on the
    design covariates. Returns ``(treated_model, control_model)``."""
    rows = outcome_rows(matched, outcome)
    design = design or outcome_design(matched, covariates)
    frame = matched.table.frame
    X, names, _ = design.transform(frame)
    if family is None:
        family = select_family(rows.y_t)
        if family == POISSON and not _is_count_like(rows.y_c):
            family = GAUSSIAN
    m1 = _fit_arm(X[rows.treated_rows], rows.y_t, np.ones(len(rows.y_t)), names, family, 1)
    m0 = _fit_arm(X[rows.control_rows], rows.y_c, rows.control_weight, names, family, 0)
    return m1, m0


@dataclass
class StabilizedWeights:
    pi: float
    e_treated: np.ndarray  # trimmed score per matched set (treated unit)
    e_control: np.ndarray  # trimmed score per control appearance
    w1: np.ndarray
    w0: np.ndarray
    trim: tuple[float, float] = DEFAULT_TRIM


def stabilized_weights(matched: MatchedSample, trim=DEFAULT_TRIM, scores=None) -> StabilizedWeights:
    """``pi / e`` for treated units and ``(1 - pi) / (1 - e)`` for matched
    controls, with scores clamped into ``trim`` first.

    ``pi`` is the treated share of matched mass, where each treated unit
    weighs 1 and each control appearance ``1/k`` in its set of size ``k``;
    with every set holding at least one control this is 0.5.
    """
    lo, hi = trim
    e = matched.scores if scores is None else np.asarray(scores, dtype=float)
    e1 = np.clip(e[matched.treated_rows], lo, hi)
    e0 = np.clip(e[matched.control_rows], lo, hi)
    sizes = matched.set_sizes
    treated_mass = float(np.count_nonzero(sizes))
    control_mass = float(np.sum(1.0 / sizes[matched.control_set])) if len(e0) else 0.0
    pi = treated_mass / (treated_mass + control_mass)
    return StabilizedWeights(pi=pi, e_treated=e1, e_control=e0, w1=pi / e1, w0=(1.0 - pi) / (1.0 - e0), trim=tuple(trim))


@dataclass
class DrPoint:
    ate: float
    set_contrasts: np.ndarray
    row_contrasts: np.ndarray
    row_weights: np.ndarray
    row_set: np.ndarray
    n_dropped: int
    winsorized: bool = False
    clamp: tuple[float, float] | None = None


def _aipw_rows(m1, m0, Xt, Xc, y_t, y_c, control_set, w1, w0):
    """Per-row contrasts: the mean of the treated and control students'
    augmented contrasts ``mu1(x) - mu0(x) +/- w (y - mu_arm(x))``."""
    mu1_t, mu0_t = m1.predict_matrix(Xt), m0.predict_matrix(Xt)
    mu1_c, mu0_c = m1.predict_matrix(Xc), m0.predict_matrix(Xc)
    unit_t = mu1_t - mu0_t + w1 * (y_t - mu1_t)
    unit_c = mu1_c - mu0_c - w0 * (y_c - mu0_c)
    return 0.5 * (unit_t[control_set] + unit_c)


def _winsorize(row_contrast):
    lo, hi = np.percentile(row_contrast, [1, 99])
    return np.clip(row_contrast, lo, hi), (float(lo), float(hi))


def dr_ate(matched: MatchedSample, models, weights: StabilizedWeights, outcome, winsorize=False, design=None) -> DrPoint:
    """Augmented IPW contrast averaged over matched students.

    Every matched student ``j`` gets ``mu1(x_j) - mu0(x_j)`` plus its own
    arm's weighted residual: ``+ w1 (y - mu1)`` if treated, ``- w0 (y - mu0)``
    if control. A treated-control row's contrast is the mean of its two
    students' contrasts; rows carry weight ``1/k`` and the ATE is the mean
    over sets of the weighted row sum.
    """
    m1, m0 = models
    rows = outcome_rows(matched, outcome)
    design = design or outcome_design(matched)
    X, _, _ = design.transform(matched.table.frame)
    row_contrast = _aipw_rows(
        m1, m0, X[rows.treated_rows], X[rows.control_rows], rows.y_t, rows.y_c, rows.control_set,
        weights.w1[rows.set_ids], weights.w0[rows.control_keep],
    )
    clamp = None
    if winsorize and row_contrast.size:
        row_contrast, clamp = _winsorize(row_contrast)
    n_sets = len(rows.set_ids)
    set_contrast = np.bincount(rows.control_set, weights=row_contrast * rows.control_weight, minlength=n_sets)
    ate = float(set_contrast.mean()) if n_sets else float("nan")
    return DrPoint(ate, set_contrast, row_contrast, rows.control_weight, rows.control_set, rows.n_dropped, winsorize, clamp)


class _Refit:
    """DR estimate recomputed on a resample of matched sets: both arm
    models are refitted; propensity scores stay fixed."""

    def __init__(self, matched, outcome, design, family, weights, winsorize):
        rows = outcome_rows(matched, outcome)
        X, self.names, _ = design.transform(matched.table.frame)
        self.Xt, self.Xc = X[rows.treated_rows], X[rows.control_rows]
        self.y_t, self.y_c = rows.y_t, rows.y_c
        self.w1 = weights.w1[rows.set_ids]
        self.w0 = weights.w0[rows.control_keep]
        self.k = np.bincount(rows.control_set, minlength=len(rows.y_t))
        self.starts = np.concatenate([[0], np.cumsum(self.k)[:-1]])
        self.family = family
        self.winsorize = winsorize
        self.fallbacks = []  # list.append is safe across worker threads

    def __call__(self, idx):
        k = self.k[idx]
        new_set = np.repeat(np.arange(idx.size), k)
        within = np.arange(new_set.size) - np.repeat(np.cumsum(k) - k, k)
        ci = np.repeat(self.starts[idx], k) + within
        cw = 1.0 / k[new_set]
        m1 = _fit_arm(self.Xt[idx], self.y_t[idx], np.ones(idx.size), self.names, self.family, 1, drop_aliased=True, robust=False, fast=True)
        m0 = _fit_arm(self.Xc[ci], self.y_c[ci], cw, self.names, self.family, 0, drop_aliased=True, robust=False, fast=True)
        if m1.fallback_used or m0.fallback_used:
            self.fallbacks.append(int(m1.fallback_used) + int(m0.fallback_used))
        row = _aipw_rows(m1, m0, self.Xt[idx], self.Xc[ci], self.y_t[idx], self.y_c[ci], new_set, self.w1[idx], self.w0[ci])
        if self.winsorize:
            row, _ = _winsorize(row)
        return float(np.bincount(new_set, weights=row * cw, minlength=idx.size).mean())


@dataclass
class BootstrapResult:
    ci_low: float
    ci_high: float
    p_boot: float
    p_at_floor: bool
    replicates: np.ndarray


def _generator(seed, stream, rep):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(*stream, rep))))


def bootstrap_ci(matched, statistic, B=999, seed=0, stream=(0,), strata=None, jobs=1) -> BootstrapResult:
    """Percentile bootstrap over matched sets.

    ``matched`` is a :class:`MatchedSample` or a set count; ``statistic``
    maps an array of resampled set indices to a number. Replicate ``b``
    draws from its own stream keyed by ``(seed, *stream, b)``, so results do
    not depend on evaluation order or on ``jobs``. ``p`` is twice the smaller tail share of
    replicates beyond zero, floored at ``2 / (B + 1)``.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    n = matched.n_sets if isinstance(matched, MatchedSample) else int(matched)
    stream = tuple(stream) if isinstance(stream, (tuple, list)) else (int(stream),)
    if strata is not None:
        strata = np.asarray(strata)
        groups = [np.flatnonzero(strata == s) for s in sorted(set(strata.tolist()))]

    def replicate(b):
        rng = _generator(seed, stream, b)
        if strata is None:
            idx = rng.integers(0, n, size=n)
        else:
            idx = np.concatenate([g[rng.integers(0, g.size, size=g.size)] for g in groups])
        return statistic(idx)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reps = np.fromiter(pool.map(replicate, range(B)), dtype=float, count=B)
    else:
        reps = np.fromiter(map(replicate, range(B)), dtype=float, count=B)
    if np.all(reps == reps[0]):
        warnings.warn("all bootstrap replicates are identical", DegenerateResample)
    lo, hi = np.percentile(reps, [2.5, 97.5])
    above = int((reps > 0).sum())
    below = int((reps < 0).sum())
    p = 2.0 * min(above, below) / B
    floor = 2.0 / (B + 1)
    at_floor = p < floor
    p = min(max(p, floor), 1.0)
    return BootstrapResult(float(lo), float(hi), float(p), bool(at_floor), reps)


def delta_post(matched: MatchedSample, outcome) -> float:
    """Mean over sets of the treated outcome minus the mean of its controls."""
    rows = outcome_rows(matched, outcome)
    n = len(rows.set_ids)
    cmean = np.bincount(rows.control_set, weights=rows.y_c * rows.control_weight, minlength=n)
    return float(np.mean(rows.y_t - cmean)) if n else float("nan")


def ancova_estimate(matched: MatchedSample, outcome, covariates=None, design=None) -> float:
    """Treatment coefficient from pooled weighted least squares of the
    outcome on a treatment indicator plus covariates."""
    rows = outcome_rows(matched, outcome)
    if design is None and (covariates is None or len(covariates)):
        design = outcome_design(matched, covariates)
    frame = matched.table.frame
    if design is not None:
        X, names, _ = design.transform(frame)
        Xp = np.vstack([X[rows.treated_rows], X[rows.control_rows]])
    else:
        names = []
        Xp = np.empty((len(rows.y_t) + len(rows.y_c), 0))
    tind = np.concatenate([np.ones(len(rows.y_t)), np.zeros(len(rows.y_c))])
    y = np.concatenate([rows.y_t, rows.y_c])
    a = np.concatenate([np.ones(len(rows.y_t)), rows.control_weight])
    keep = np.flatnonzero(np.ptp(Xp, axis=0) > 0) if Xp.shape[1] else np.array([], dtype=int)
    full = np.column_stack([np.ones(len(y)), tind, Xp[:, keep]])
    all_names = [INTERCEPT, "treated"] + [names[j] for j in keep]
    bad = aliased_columns(full, all_names)
    if bad:
        raise RankDeficient(f"pooled ANCOVA design is rank deficient; aliased columns: {bad}", bad)
    return float(weighted_least_squares(full, y, a).coef[1])


def weight_diagnostics(weights: StabilizedWeights) -> dict:
    return {
        "e_treated_min": float(weights.e_treated.min()),
        "e_treated_max": float(weights.e_treated.max()),
        "e_control_min": float(weights.e_control.min()),
        "e_control_max": float(weights.e_control.max()),
        "w1_p99": float(np.percentile(weights.w1, 99)),
        "w0_p99": float(np.percentile(weights.w0, 99)),
        "pi": float(weights.pi),
    }


@dataclass
class DrResult:
    outcome: str
    ate_dr: float
    ci_low: float
    ci_high: float
    p_boot: float
    delta_post: float
    ancova: float
    family: str
    weight_diag: dict
    n_pairs: int
    winsorized: bool = False
    ate_dr_winsorized: float = float("nan")
    p_at_floor: bool = False
    domain: str = ""
    n_rows: int = 0
    n_dropped: int = 0
    fallback_used: bool = False
    robust_se: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def estimate_outcome(
    matched: MatchedSample,
    outcome,
    *,
    B=999,
    seed=0,
    outcome_index=0,
    winsorize=False,
    trim=DEFAULT_TRIM,
    stratified=False,
    covariates=None,
    domain="",
    jobs=1,
) -> DrResult:
    """Full per-outcome analysis: family choice, arm models, DR point
    estimate, bootstrap CI, cross-checks and weight diagnostics."""
    design = outcome_design(matched, covariates)
    m1, m0 = fit_outcome_models(matched, outcome, design=design)
    weights = stabilized_weights(matched, trim)
    point = dr_ate(matched, (m1, m0), weights, outcome, winsorize=winsorize, design=design)
    alt = dr_ate(matched, (m1, m0), weights, outcome, winsorize=not winsorize, design=design)
    values = point.set_contrasts
    rows = outcome_rows(matched, outcome)
    strata = matched.set_blocks[rows.set_ids] if stratified else None
    refit = _Refit(matched, outcome, design, m1.family, weights, winsorize)
    boot = bootstrap_ci(len(values), refit, B=B, seed=seed, stream=(outcome_index,), strata=strata, jobs=jobs)
    notes = []
    if refit.fallbacks:
        notes.append(f"{sum(refit.fallbacks)} bootstrap arm fits fell back to least squares")
    for mdl in (m1, m0):
        if mdl.note:
            notes.append(f"arm {mdl.arm}: {mdl.note}")
        if mdl.dropped:
            notes.append(f"arm {mdl.arm}: dropped constant columns {mdl.dropped}")
    return DrResult(
        outcome=outcome,
        ate_dr=point.ate,
        ci_low=boot.ci_low,
        ci_high=boot.ci_high,
        p_boot=boot.p_boot,
        delta_post=delta_post(matched, outcome),
        ancova=ancova_estimate(matched, outcome, design=design),
        family=m1.family,
        weight_diag=weight_diagnostics(weights),
        n_pairs=len(values),
        winsorized=winsorize,
        ate_dr_winsorized=alt.ate if not winsorize else point.ate,
        p_at_floor=boot.p_at_floor,
        domain=domain,
        n_rows=int(len(point.row_contrasts)),
        n_dropped=point.n_dropped,
        fallback_used=m1.fallback_used or m0.fallback_used,
        robust_se={"treated": m1.robust_se, "control": m0.robust_se},
        notes=notes,
    )
