"""Blocked nearest-neighbour matching on a composite Gower + PoS distance,
restricted by a caliper on the logit propensity score."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .cohort import BLOCK_SEPARATOR, CohortTable, CovariateSchema, Kind, Role
from .errors import DegenerateLogits, NoComparableCovariates
from .propensity import PropensityFit


def block_key(programme, study_mode) -> str:
    return f"{programme}{BLOCK_SEPARATOR}{study_mode}"


@dataclass(frozen=True)
class MatchSpec:
    m: int = 2
    caliper_multiplier: float = 0.2
    w: float = 0.75
    with_replacement: bool = True
    caliper_scope: str = "global"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.caliper_multiplier <= 0:
            raise ValueError("caliper_multiplier must be positive")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must lie in [0, 1]")
        if self.caliper_scope not in ("global", "block"):
            raise ValueError("caliper_scope must be 'global' or 'block'")


def compute_caliper(logits, multiplier=0.2) -> float:
    """``multiplier`` times the sample SD (n-1) of the logit scores."""
    logits = np.asarray(logits, dtype=float)
    if logits.size < 2:
        raise ValueError("caliper needs at least two retained units")
    sd = float(np.std(logits, ddof=1))
    if sd == 0.0:
        warnings.warn("all logit propensity scores are equal; caliper is 0", DegenerateLogits)
        return 0.0
    return multiplier * sd


def numeric_ranges(frame: pd.DataFrame, schema: CovariateSchema, columns) -> dict[str, tuple[float, float]]:
    out = {}
    for c in columns:
        if schema.kind_of(c) == Kind.NUMERIC:
            v = frame[c].to_numpy(dtype=float)
            if np.all(np.isnan(v)):
                out[c] = (np.nan, np.nan)
            else:
                out[c] = (float(np.nanmin(v)), float(np.nanmax(v)))
    return out


def _missing(v):
    return v is None or (isinstance(v, (float, np.floating)) and np.isnan(v))


def gower_distance(a: Mapping, b: Mapping, schema: CovariateSchema, ranges, columns=None) -> float:
    """Mean per-variable dissimilarity over covariates observed in both
    records: ``|a-b|/range`` for numeric (0 when the range is 0), a 0/1
    mismatch for categorical."""
    columns = list(a) if columns is None else columns
    total, count = 0.0, 0
    for c in columns:
        x, y = a.get(c), b.get(c)
        if _missing(x) or _missing(y):
            continue
        if schema.kind_of(c) == Kind.NUMERIC:
            lo, hi = ranges[c]
            r = hi - lo
            total += 0.0 if r == 0 else abs(float(x) - float(y)) / r
        else:
            total += 0.0 if str(x) == str(y) else 1.0
        count += 1
    if count == 0:
        raise NoComparableCovariates("no covariate is observed in both records")
    return total / count


def composite_distance(gower, pos_a, pos_b, w=0.75) -> float:
    """``(1 - w) * gower + w * |pos_a - pos_b|`` on rescaled PoS."""
    return (1.0 - w) * gower + w * abs(pos_a - pos_b)


def rescale_pos(pos, bounds):
    lo, hi = bounds
    if hi == lo:
        return np.zeros_like(pos, dtype=float)
    return (np.asarray(pos, dtype=float) - lo) / (hi - lo)


class _Encoded:
    """Column-wise arrays for fast pairwise Gower blocks."""

    def __init__(self, frame, schema, columns, ranges):
        self.numeric = []
        self.categorical = []
        for c in columns:
            if schema.kind_of(c) == Kind.NUMERIC:
                lo, hi = ranges[c]
                r = hi - lo
                self.numeric.append((frame[c].to_numpy(dtype=float), 0.0 if not np.isfinite(r) else r))
            else:
                vals = frame[c].astype(object)
                codes, _ = pd.factorize(vals, sort=True)
                self.categorical.append(codes)

    def gower(self, rows_a, rows_b):
        shape = (len(rows_a), len(rows_b))
        total = np.zeros(shape)
        count = np.zeros(shape)
        for v, r in self.numeric:
            x, y = v[rows_a][:, None], v[rows_b][None, :]
            comp = ~np.isnan(x) & ~np.isnan(y)
            if r > 0:
                d = np.abs(x - y) / r
                total += np.where(comp, d, 0.0)
            count += comp
        for codes in self.categorical:
            x, y = codes[rows_a][:, None], codes[rows_b][None, :]
            comp = (x >= 0) & (y >= 0)
            total += comp & (x != y)
            count += comp
        if not self.numeric and not self.categorical:
            return np.zeros(shape)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(count > 0, total / np.maximum(count, 1), np.nan)


@dataclass
class MatchedSet:
    block: str
    treated_id: object
    control_ids: list
    distances: list
    logit_gaps: list


@dataclass
class MatchedSample:
    """Treated units with up to ``m`` matched controls each.

    Row positions index into ``table.frame``. Control appearance ``j``
    belongs to set ``control_set[j]``; with replacement a control can appear
    in several sets.
    """

    table: CohortTable
    scores: np.ndarray
    logits: np.ndarray
    treated_rows: np.ndarray
    set_blocks: np.ndarray
    control_rows: np.ndarray
    control_set: np.ndarray
    distances: np.ndarray
    logit_gaps: np.ndarray
    caliper_width: float
    pos_rescale: tuple[float, float]
    spec: MatchSpec
    gower_columns: list[str]
    exclusions: dict = field(default_factory=dict)

    @property
    def n_sets(self) -> int:
        return len(self.treated_rows)

    @property
    def set_sizes(self) -> np.ndarray:
        return np.bincount(self.control_set, minlength=self.n_sets)

    @property
    def sets(self) -> list[MatchedSet]:
        ids = self.table.ids
        out = []
        starts = np.concatenate([[0], np.cumsum(self.set_sizes)])
        for s in range(self.n_sets):
            sl = slice(starts[s], starts[s + 1])
            out.append(
                MatchedSet(
                    block=self.set_blocks[s],
                    treated_id=ids[self.treated_rows[s]],
                    control_ids=list(ids[self.control_rows[sl]]),
                    distances=self.distances[sl].tolist(),
                    logit_gaps=self.logit_gaps[sl].tolist(),
                )
            )
        return out

    def treated_values(self, column) -> np.ndarray:
        return self.table.frame[column].to_numpy()[self.treated_rows]

    def control_values(self, column) -> np.ndarray:
        return self.table.frame[column].to_numpy()[self.control_rows]

    def to_wide_frame(self, columns=None) -> pd.DataFrame:
        """One row per matched set; ``t_`` / ``c1_`` / ``c2_`` ... prefixes."""
        t = self.table
        if columns is None:
            columns = [t.id_column] + [c for c in t.covariates] + ([t.pos_column] if t.pos_column else []) + t.outcomes
        frame = t.frame
        sizes = self.set_sizes
        starts = np.concatenate([[0], np.cumsum(sizes)])
        data = {"set": np.arange(self.n_sets), "block": self.set_blocks}
        for c in columns:
            data[f"t_{c}"] = frame[c].to_numpy()[self.treated_rows]
        data["t_propensity"] = self.scores[self.treated_rows]
        for k in range(self.spec.m):
            has = sizes > k
            pos = np.where(has, starts[:-1] + k, 0)
            rows = self.control_rows[pos] if len(self.control_rows) else np.zeros(self.n_sets, int)
            for c in columns:
                vals = frame[c].to_numpy()[rows].astype(object)
                vals[~has] = None
                data[f"c{k + 1}_{c}"] = vals
            for label, arr in (("propensity", self.scores[rows] if len(rows) else np.array([])),
                               ("distance", self.distances[pos] if len(self.distances) else np.array([])),
                               ("logit_gap", self.logit_gaps[pos] if len(self.logit_gaps) else np.array([]))):
                vals = np.asarray(arr, dtype=object)
                if vals.size:
                    vals[~has] = None
                data[f"c{k + 1}_{label}"] = vals
        return pd.DataFrame(data)

    def pairs_records(self):
        return [
            {
                "block": s.block,
                "treated_id": _jsonable(s.treated_id),
                "controls": [
                    {"id": _jsonable(c), "distance": d, "logit_gap": g}
                    for c, d, g in zip(s.control_ids, s.distances, s.logit_gaps)
                ],
            }
            for s in self.sets
        ]

    def pairs_json(self) -> str:
        return json.dumps(
            {
                "caliper_width": self.caliper_width,
                "pos_rescale": list(self.pos_rescale),
                "spec": self.spec.__dict__,
                "exclusions": self.exclusions,
                "sets": self.pairs_records(),
            },
            indent=1,
        )


def _jsonable(v):
    return v.item() if isinstance(v, np.generic) else v


def _id_rank(ids):
    order = np.argsort(ids, kind="stable")
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids))
    return rank


def select_controls(dist, gaps, id_rank, eligible, m):
    """Indices (into the candidate axis) of the ``m`` best eligible controls
    for one treated unit, ordered by (distance, logit gap, id)."""
    cand = np.flatnonzero(eligible)
    if cand.size == 0:
        return cand
    order = np.lexsort((id_rank[cand], gaps[cand], dist[cand]))
    return cand[order[:m]]


def match(table: CohortTable, fit: PropensityFit, spec: MatchSpec | None = None, covariates=None) -> MatchedSample:
    """Match treated to controls within blocks.

    ``table`` and ``fit`` must already be trimmed to common support and
    aligned row for row. Gower runs over the matching-role covariates
    (PoS excluded; it has its own term).
    """
    spec = spec or MatchSpec()
    schema = table.schema
    if len(table) != len(fit.scores):
        raise ValueError("table and propensity fit are not aligned")
    columns = schema.by_role(Role.MATCHING) if covariates is None else list(covariates)
    columns = [c for c in columns if c != table.pos_column]
    frame = table.frame
    ranges = numeric_ranges(frame, schema, columns)
    enc = _Encoded(frame, schema, columns, ranges)
    pos = table.pos
    if pos is None:
        pos_bounds = (0.0, 0.0)
        pos_t = np.zeros(len(table))
    else:
        pos_bounds = (float(np.nanmin(pos)), float(np.nanmax(pos)))
        pos_t = rescale_pos(pos, pos_bounds)
    logits = fit.logits
    treated = table.treated == 1
    ids = table.ids
    id_rank = _id_rank(ids)
    blocks = table.block_keys()
    global_caliper = compute_caliper(logits, spec.caliper_multiplier)

    t_rows, s_blocks, c_rows, c_set, dists, gaps = [], [], [], [], [], []
    exclusions = {}
    for b in sorted(set(blocks)):
        in_b = blocks == b
        tb = np.flatnonzero(in_b & treated)
        cb = np.flatnonzero(in_b & ~treated)
        tb = tb[np.argsort(id_rank[tb], kind="stable")]
        info = {"n_treated": int(tb.size), "n_control": int(cb.size), "n_matched": 0, "n_dropped_no_eligible": 0}
        exclusions[b] = info
        if tb.size == 0 or cb.size == 0:
            info["skipped"] = "block lacks treated or control units"
            info["n_dropped_no_eligible"] = int(tb.size)
            continue
        if spec.caliper_scope == "block":
            width = compute_caliper(logits[in_b], spec.caliper_multiplier) if in_b.sum() > 1 else 0.0
        else:
            width = global_caliper
        G = enc.gower(tb, cb)
        D = (1.0 - spec.w) * G + spec.w * np.abs(pos_t[tb][:, None] - pos_t[cb][None, :])
        GAP = np.abs(logits[tb][:, None] - logits[cb][None, :])
        ELIG = (GAP <= width) & ~np.isnan(D)
        used = np.zeros(cb.size, dtype=bool)
        for i, row in enumerate(tb):
            elig = ELIG[i] if spec.with_replacement else ELIG[i] & ~used
            chosen = select_controls(D[i], GAP[i], id_rank[cb], elig, spec.m)
            if chosen.size == 0:
                info["n_dropped_no_eligible"] += 1
                continue
            if not spec.with_replacement:
                used[chosen] = True
            s = len(t_rows)
            t_rows.append(row)
            s_blocks.append(b)
            c_rows.extend(cb[chosen].tolist())
            c_set.extend([s] * chosen.size)
            dists.extend(D[i, chosen].tolist())
            gaps.extend(GAP[i, chosen].tolist())
            info["n_matched"] += 1
    return MatchedSample(
        table=table,
        scores=fit.scores,
        logits=logits,
        treated_rows=np.asarray(t_rows, dtype=np.int64),
        set_blocks=np.asarray(s_blocks, dtype=object),
        control_rows=np.asarray(c_rows, dtype=np.int64),
        control_set=np.asarray(c_set, dtype=np.int64),
        distances=np.asarray(dists, dtype=float),
        logit_gaps=np.asarray(gaps, dtype=float),
        caliper_width=float(global_caliper),
        pos_rescale=pos_bounds,
        spec=spec,
        gower_columns=columns,
        exclusions=exclusions,
    )
