"""Rosenbaum bounds for the Wilcoxon signed-rank test on matched sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

from .errors import InvalidGamma, NoInformativePairs
from .estimator import outcome_rows
from .matching import MatchedSample

DEFAULT_GAMMA_GRID = (1.0, 1.25, 1.5, 2.0, 2.5)
EXACT_BELOW = 8
CONTINUITY = 0.5
_ZERO_TOL = 1e-12


def paired_differences(matched: MatchedSample, outcome):
    """Treated outcome minus the mean of its controls, one per set, with
    zero differences removed. Returns ``(differences, n_informative)``."""
    rows = outcome_rows(matched, outcome)
    n = len(rows.set_ids)
    cmean = np.bincount(rows.control_set, weights=rows.y_c * rows.control_weight, minlength=n)
    d = rows.y_t - cmean
    d = d[np.abs(d) > _ZERO_TOL]
    if d.size == 0:
        raise NoInformativePairs(f"all matched differences for '{outcome}' are zero")
    return d, int(d.size)


def _oriented(differences, direction):
    d = np.asarray(differences, dtype=float)
    if direction == "greater":
        return d
    if direction == "less":
        return -d
    raise ValueError("direction must be 'greater' or 'less'")


def signed_rank(differences):
    """Average ranks of ``|d|`` and the sum of ranks of positive ``d``."""
    d = np.asarray(differences, dtype=float)
    ranks = rankdata(np.abs(d), method="average")
    return float(ranks[d > 0].sum()), ranks


def _normal_tail(t, ranks, p):
    mu = p * ranks.sum()
    sd = np.sqrt(p * (1.0 - p) * np.sum(ranks**2))
    return float(norm.sf((t - CONTINUITY - mu) / sd))


def _exact_tail(t, ranks, p):
    # ranks are multiples of 1/2, so doubled ranks are integers; convolve the
    # distribution of the doubled statistic one pair at a time
    r2 = np.rint(2 * ranks).astype(np.int64)
    dist = np.zeros(int(r2.sum()) + 1)
    dist[0] = 1.0
    top = 0
    for r in r2:
        new = dist * (1.0 - p)
        new[r : top + r + 1] += dist[: top + 1] * p
        dist = new
        top += r
    t2 = int(np.rint(2 * t))
    return float(min(1.0, dist[t2:].sum()))


def rosenbaum_bounds(differences, gamma, direction="greater", method="auto"):
    """Upper and lower one-sided p-value bounds at hidden bias ``gamma``.

    Under the upper bound each pair's difference is positive with
    probability ``gamma / (1 + gamma)``; the lower bound uses
    ``1 / (1 + gamma)``. ``method`` is ``"normal"`` (continuity-corrected
    large-sample approximation), ``"exact"``, or ``"auto"`` (exact below
    8 pairs).
    """
    if not np.isfinite(gamma) or gamma < 1.0:
        raise InvalidGamma(f"gamma must be >= 1, got {gamma}")
    d = _oriented(differences, direction)
    d = d[np.abs(d) > _ZERO_TOL]
    if d.size == 0:
        raise NoInformativePairs("no non-zero differences")
    t, ranks = signed_rank(d)
    if method == "auto":
        method = "exact" if d.size < EXACT_BELOW else "normal"
    tail = {"normal": _normal_tail, "exact": _exact_tail}[method]
    p_plus = gamma / (1.0 + gamma)
    p_minus = 1.0 / (1.0 + gamma)
    return tail(t, ranks, p_plus), tail(t, ranks, p_minus)


def signed_rank_p(differences, direction="greater", method="normal"):
    """Classical one-sided Wilcoxon signed-rank p-value (no hidden bias)."""
    d = _oriented(differences, direction)
    d = d[np.abs(d) > _ZERO_TOL]
    t, ranks = signed_rank(d)
    n = d.size
    if method == "exact":
        return _exact_tail(t, ranks, 0.5)
    _, counts = np.unique(np.abs(d), return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
    return float(norm.sf((t - CONTINUITY - mean) / np.sqrt(var)))


@dataclass
class SensitivityTable:
    rows: pd.DataFrame
    max_gamma: dict[str, float | None] = field(default_factory=dict)
    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    alpha: float = 0.05
    conventions: dict = field(
        default_factory=lambda: {
            "continuity_correction": CONTINUITY,
            "ties": "average ranks; variance uses the realized sum of squared ranks",
            "exact_below_pairs": EXACT_BELOW,
            "difference": "treated minus mean of matched controls",
        }
    )

    def summary_records(self):
        out = []
        for outcome, g in self.rows.groupby("outcome", sort=False):
            out.append(
                {
                    "outcome": outcome,
                    "direction": g["direction"].iloc[0],
                    "gamma_grid": list(self.gamma_grid),
                    "max_gamma_significant": self.max_gamma.get(outcome),
                    "n_informative_pairs": int(g["n_informative_pairs"].iloc[0]),
                }
            )
        return out


SENSITIVITY_COLUMNS = ["outcome", "gamma", "p_upper", "p_lower", "n_informative_pairs", "direction"]


def sensitivity_for_significant(dr_results, matched: MatchedSample, gamma_grid=DEFAULT_GAMMA_GRID, alpha=0.05) -> SensitivityTable:
    """Bounds over ``gamma_grid`` for each outcome with ``p_boot < alpha``,
    testing in the direction of the estimated effect."""
    rows = []
    max_gamma = {}
    for res in dr_results:
        if not res.p_boot < alpha:
            continue
        direction = "greater" if res.ate_dr > 0 else "less"
        try:
            d, n_inf = paired_differences(matched, res.outcome)
        except NoInformativePairs:
            max_gamma[res.outcome] = None
            continue
        best = None
        for g in gamma_grid:
            hi, lo = rosenbaum_bounds(d, g, direction)
            rows.append((res.outcome, float(g), hi, lo, n_inf, direction))
            if hi < alpha:
                best = float(g) if best is None else max(best, float(g))
        max_gamma[res.outcome] = best
    frame = pd.DataFrame(rows, columns=SENSITIVITY_COLUMNS)
    return SensitivityTable(frame, max_gamma, tuple(gamma_grid), alpha)
