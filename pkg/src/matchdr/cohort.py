"""Cohort ingestion: CSV loading, duplicate-column collapsing, covariate
classification, pre-treatment alignment of the PoS risk score, and
missing-value handling.

A cohort lives in a :class:`CohortTable`, a thin wrapper over a pandas
DataFrame (one row per student-year) that remembers which columns play
which part. Covariates stay as raw strings until a schema has been
classified; :func:`apply_schema` then coerces them.
"""

from __future__ import annotations

import csv
import io
import json
import os
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    EmptyColumnWarning,
    LeakageDetected,
    MissingColumn,
    MissingPoSWindow,
    NonBinaryTreatment,
    ParseError,
)

BLOCK_SEPARATOR = "|"
UNKNOWN_LEVEL = "Unknown"
MISSING_SUFFIX = "_missing"


class Kind(str, Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"


class Role(str, Enum):
    MATCHING = "matching"
    BLOCKING = "blocking"
    OUTCOME_ADJUST = "outcome_adjust"


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: Kind
    role: Role = Role.MATCHING


@dataclass
class CovariateSchema:
    entries: list[CovariateSpec]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate covariate names in schema: {names}")

    def __getitem__(self, name) -> CovariateSpec:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def __contains__(self, name):
        return any(e.name == name for e in self.entries)

    @property
    def names(self):
        return [e.name for e in self.entries]

    def by_role(self, *roles):
        return [e.name for e in self.entries if e.role in roles]

    @property
    def blocking(self):
        return self.by_role(Role.BLOCKING)

    @property
    def matching(self):
        return self.by_role(Role.MATCHING)

    def kind_of(self, name) -> Kind:
        return self[name].kind

    def to_dict(self):
        return {"entries": [{"name": e.name, "kind": e.kind.value, "role": e.role.value} for e in self.entries]}

    @classmethod
    def from_dict(cls, d):
        return cls([CovariateSpec(e["name"], Kind(e["kind"]), Role(e.get("role", "matching"))) for e in d["entries"]])


@dataclass
class SchemaConfig:
    """Declares how a cohort CSV maps onto the analysis.

    ``covariates`` defaults to every column not otherwise claimed.
    """

    treatment_column: str
    outcome_columns: list[str]
    id_column: str = "student_id"
    year_column: str | None = "year"
    pos_column: str | None = "pos_aligned"
    blocking_columns: list[str] = field(default_factory=list)
    covariates: list[str] | None = None
    role_overrides: dict[str, str] = field(default_factory=dict)
    kind_overrides: dict[str, str] = field(default_factory=dict)
    numeric_fraction_threshold: float = 0.95
    min_distinct: int = 6
    interactions: list[tuple[str, str]] = field(default_factory=list)
    domains: dict[str, str] = field(default_factory=dict)
    pos_statistic: str = "mean"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "treatment_column" not in d:
            raise ConfigError("schema config must declare 'treatment_column'")
        if not d.get("outcome_columns"):
            raise ConfigError("schema config must declare 'outcome_columns'")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown schema config keys: {sorted(unknown)}")
        d["interactions"] = [tuple(pair) for pair in d.get("interactions", [])]
        return cls(**d)

    def to_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["interactions"] = [list(p) for p in self.interactions]
        return out


def read_config_file(path):
    """Read a JSON or TOML config file into a dict."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            return tomllib.loads(text)
        return json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc


def load_schema_config(path_or_dict):
    if isinstance(path_or_dict, SchemaConfig):
        return path_or_dict
    if isinstance(path_or_dict, dict):
        return SchemaConfig.from_dict(path_or_dict)
    return SchemaConfig.from_dict(read_config_file(path_or_dict))


@dataclass
class CohortTable:
    """One row per student-year.

    ``frame`` may contain duplicated covariate column names straight after
    loading; :func:`collapse_duplicates` removes them.
    """

    frame: pd.DataFrame
    id_column: str
    treatment_column: str
    covariates: list[str]
    outcomes: list[str]
    year_column: str | None = None
    pos_column: str | None = None
    roles: dict[str, Role] = field(default_factory=dict)
    schema: CovariateSchema | None = None
    interactions: list[tuple[str, str]] = field(default_factory=list)
    domains: dict[str, str] = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    config: SchemaConfig | None = None

    def __len__(self):
        return len(self.frame)

    @property
    def treated(self) -> np.ndarray:
        return self.frame[self.treatment_column].to_numpy(dtype=int)

    @property
    def ids(self) -> np.ndarray:
        return self.frame[self.id_column].to_numpy()

    @property
    def pos(self) -> np.ndarray | None:
        if self.pos_column is None or self.pos_column not in self.frame.columns:
            return None
        return self.frame[self.pos_column].to_numpy(dtype=float)

    def role_of(self, name) -> Role:
        return self.roles.get(name, Role.MATCHING)

    def block_keys(self) -> np.ndarray:
        """Block key per row: blocking columns joined with ``|``."""
        cols = [c for c, r in self.roles.items() if r == Role.BLOCKING and c in self.frame.columns]
        if not cols:
            return np.full(len(self.frame), "", dtype=object)
        parts = [self.frame[c].astype(object).where(self.frame[c].notna(), UNKNOWN_LEVEL).astype(str) for c in cols]
        key = parts[0]
        for p in parts[1:]:
            key = key + BLOCK_SEPARATOR + p
        return key.to_numpy(dtype=object)

    def subset(self, mask) -> "CohortTable":
        mask = np.asarray(mask)
        return replace(self, frame=self.frame.loc[mask].reset_index(drop=True), report=dict(self.report))

    def with_frame(self, frame, **changes) -> "CohortTable":
        return replace(self, frame=frame, **changes)


def _parse_number(text):
    try:
        v = float(text)
    except (TypeError, ValueError):
        return None
    return v


def load_cohort(source, config) -> CohortTable:
    """Parse a cohort CSV (RFC-4180, UTF-8, empty string = missing).

    ``source`` is a path, a text stream, or CSV text. Duplicate covariate
    headers are kept side by side and listed in ``table.report``.
    """
    config = load_schema_config(config)
    if isinstance(source, (str, os.PathLike)) and (isinstance(source, os.PathLike) or "\n" not in source):
        with open(source, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    else:
        text = source.read() if hasattr(source, "read") else source
        rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ParseError("empty input: header row required", row=0)
    header, body = rows[0], rows[1:]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ParseError(f"row {i} has {len(r)} fields, header has {len(header)}", row=i)

    required = [config.id_column, config.treatment_column, *config.outcome_columns, *config.blocking_columns]
    for name in required:
        if name not in header:
            raise MissingColumn(f"declared column '{name}' not found in header")
    if config.year_column is not None and config.year_column not in header:
        raise MissingColumn(f"declared year column '{config.year_column}' not found in header")

    reserved = {config.id_column, config.treatment_column, *config.outcome_columns}
    if config.year_column:
        reserved.add(config.year_column)
    pos_col = config.pos_column if config.pos_column in header else None
    if pos_col:
        reserved.add(pos_col)
    if config.covariates is None:
        covariates = [h for h in header if h not in reserved]
    else:
        covariates = []
        for name in config.covariates:
            if name not in header:
                raise MissingColumn(f"declared covariate '{name}' not found in header")
            covariates.extend([name] * header.count(name))
    for name in config.blocking_columns:
        if name not in covariates:
            covariates.append(name)

    order = []
    data_cols = []
    for j, h in enumerate(header):
        values = [r[j] for r in body]
        if h == config.treatment_column:
            parsed = []
            for i, v in enumerate(values, start=2):
                num = _parse_number(v)
                if num is None or num not in (0.0, 1.0):
                    raise NonBinaryTreatment(f"treatment value {v!r} at row {i} is not 0/1")
                parsed.append(int(num))
            col = pd.Series(parsed, dtype=int)
        elif h in config.outcome_columns or h == pos_col or (h == config.year_column):
            parsed = []
            for i, v in enumerate(values, start=2):
                if v == "":
                    parsed.append(np.nan)
                    continue
                num = _parse_number(v)
                if num is None:
                    raise ParseError(f"non-numeric value {v!r} in column '{h}' at row {i}", row=i, column=h)
                parsed.append(num)
            col = pd.Series(parsed, dtype=float)
            if h == pos_col:
                bad = col.notna() & ((col < 0) | (col > 1))
                if bad.any():
                    i = int(np.flatnonzero(bad.to_numpy())[0]) + 2
                    raise ParseError(f"PoS value outside [0,1] at row {i}", row=i, column=h)
            if h == config.year_column:
                if col.isna().any():
                    raise ParseError(f"missing year at row {int(col.isna().to_numpy().argmax()) + 2}", column=h)
                col = col.astype(int)
        elif h == config.id_column:
            col = pd.Series(values, dtype=object)
        elif h in covariates:
            col = pd.Series([None if v == "" else v for v in values], dtype=object)
        else:
            continue
        data_cols.append(col)
        order.append(h)
    frame = pd.concat(data_cols, axis=1, ignore_index=True) if data_cols else pd.DataFrame()
    frame.columns = order

    dup = sorted({c for c in covariates if covariates.count(c) > 1})
    roles = {name: Role.BLOCKING for name in config.blocking_columns}
    for name, role in config.role_overrides.items():
        roles[name] = Role(role)
    report = {
        "n_rows": len(frame),
        "n_treated": int(frame[config.treatment_column].sum()) if len(frame) else 0,
        "covariates": covariates,
        "duplicate_columns": dup,
        "missing_counts": {c: int(frame.loc[:, [c]].isna().to_numpy().sum()) for c in dict.fromkeys(covariates)},
        "interactions": [list(p) for p in config.interactions],
    }
    if not config.interactions:
        report["notes"] = ["no propensity interactions declared (default: none)"]
    table = CohortTable(
        frame=frame,
        id_column=config.id_column,
        treatment_column=config.treatment_column,
        covariates=covariates,
        outcomes=list(config.outcome_columns),
        year_column=config.year_column,
        pos_column=pos_col,
        roles=roles,
        interactions=list(config.interactions),
        domains=dict(config.domains),
        report=report,
        config=config,
    )
    return table


def write_cohort(table: CohortTable, path_or_buf=None):
    """Serialize a cohort to CSV text (missing -> empty string).

    Returns the CSV text; also writes it when ``path_or_buf`` is given.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(table.frame.columns))
    for row in table.frame.itertuples(index=False, name=None):
        writer.writerow(["" if _is_missing(v) else _fmt(v) for v in row])
    text = buf.getvalue()
    if path_or_buf is not None:
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            Path(path_or_buf).write_text(text, encoding="utf-8")
    return text


def _is_missing(v):
    return v is None or (isinstance(v, float) and np.isnan(v))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if not float(v).is_integer() else str(int(v)) if abs(v) < 1e15 else repr(float(v))
    return str(v)


def collapse_duplicates(table: CohortTable) -> CohortTable:
    """Merge duplicated covariate columns, taking the first non-missing
    value row-wise in original column order. Returns ``table`` itself when
    nothing is duplicated."""
    cols = list(table.frame.columns)
    if len(set(cols)) == len(cols):
        return table
    out = {}
    order = []
    for j, name in enumerate(cols):
        col = table.frame.iloc[:, j]
        if name not in out:
            out[name] = col.copy()
            order.append(name)
        else:
            merged = out[name]
            fill = merged.isna() & col.notna()
            merged = merged.astype(object) if fill.any() and merged.dtype != col.dtype else merged
            merged[fill] = col[fill]
            out[name] = merged
    frame = pd.concat([out[n] for n in order], axis=1, ignore_index=True)
    frame.columns = order
    covariates = list(dict.fromkeys(table.covariates))
    report = dict(table.report)
    report["collapsed_columns"] = sorted({c for c in cols if cols.count(c) > 1})
    return replace(table, frame=frame, covariates=covariates, report=report)


def _numeric_view(series: pd.Series) -> pd.Series:
    if pd.api.types.is_numeric_dtype(series):
        return series.astype(float)
    return pd.to_numeric(series.astype(object).where(series.notna(), None), errors="coerce")


def classify_covariates(
    table: CohortTable, numeric_fraction_threshold=0.95, min_distinct=6, kind_overrides=None
) -> CovariateSchema:
    """Label each covariate Numeric or Categorical.

    A column is numeric when at least ``numeric_fraction_threshold`` of its
    non-missing values parse as numbers and those numbers take at least
    ``min_distinct`` distinct values.
    """
    if not 0 < numeric_fraction_threshold <= 1:
        raise ValueError("numeric_fraction_threshold must lie in (0, 1]")
    if min_distinct < 2:
        raise ValueError("min_distinct must be >= 2")
    kind_overrides = kind_overrides or {}
    if not kind_overrides and table.config is not None:
        kind_overrides = table.config.kind_overrides
    if len(set(table.frame.columns)) != len(table.frame.columns):
        raise ValueError("collapse duplicate columns before classification")
    entries = []
    for name in dict.fromkeys(table.covariates):
        role = table.role_of(name)
        if name in kind_overrides:
            entries.append(CovariateSpec(name, Kind(kind_overrides[name]), role))
            continue
        col = table.frame[name]
        present = col.notna()
        if not present.any():
            warnings.warn(f"covariate '{name}' has no non-missing values; classified categorical", EmptyColumnWarning)
            entries.append(CovariateSpec(name, Kind.CATEGORICAL, role))
            continue
        nums = _numeric_view(col[present])
        parsed = nums.notna()
        frac = parsed.mean()
        distinct = nums[parsed].nunique()
        kind = Kind.NUMERIC if frac >= numeric_fraction_threshold and distinct >= min_distinct else Kind.CATEGORICAL
        entries.append(CovariateSpec(name, kind, role))
    return CovariateSchema(entries)


def apply_schema(table: CohortTable, schema: CovariateSchema) -> CohortTable:
    """Coerce covariates to their classified kinds (numeric -> float with
    NaN for unparseable values, categorical -> str with None missing)."""
    frame = table.frame.copy()
    for e in schema.entries:
        col = frame[e.name]
        if e.kind == Kind.NUMERIC:
            frame[e.name] = _numeric_view(col)
        else:
            frame[e.name] = col.map(lambda v: None if _is_missing(v) else _cat_str(v)).astype(object)
    return replace(table, frame=frame, schema=schema)


def _cat_str(v):
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        return str(int(v))
    return str(v)


def impute_missing(table: CohortTable) -> CohortTable:
    """Fill missing covariates so every unit stays matchable.

    Numeric: block-year median (falling back to the overall median), plus a
    0/1 companion categorical ``<name>_missing``. Categorical: ``Unknown``.
    """
    schema = table.schema
    if schema is None:
        raise ValueError("classify and apply a schema before imputing")
    frame = table.frame.copy()
    group = pd.Series(table.block_keys(), index=frame.index)
    if table.year_column:
        group = group + "#" + frame[table.year_column].astype(str)
    entries = list(schema.entries)
    covariates = list(table.covariates)
    roles = dict(table.roles)
    imputed = {}
    for e in schema.entries:
        col = frame[e.name]
        miss = col.isna()
        if not miss.any():
            continue
        imputed[e.name] = int(miss.sum())
        if e.kind == Kind.NUMERIC:
            med = col.groupby(group).transform("median")
            filled = col.fillna(med).fillna(col.median())
            frame[e.name] = filled.fillna(0.0)
            ind = e.name + MISSING_SUFFIX
            frame[ind] = np.where(miss, "1", "0").astype(object)
            entries.append(CovariateSpec(ind, Kind.CATEGORICAL, e.role))
            covariates.append(ind)
            roles[ind] = e.role
        else:
            frame[e.name] = col.where(~miss, UNKNOWN_LEVEL)
    report = dict(table.report)
    report["imputed"] = imputed
    return replace(table, frame=frame, schema=CovariateSchema(entries), covariates=covariates, roles=roles, report=report)


def _month_start(ts: pd.Timestamp) -> pd.Timestamp:
    return pd.Timestamp(year=ts.year, month=ts.month, day=1)


def _as_long_pos(pos_daily) -> pd.DataFrame:
    if isinstance(pos_daily, pd.DataFrame):
        df = pos_daily.rename(columns={c: c.lower() for c in pos_daily.columns})
        df = df[["student_id", "date", "score"]].copy()
    else:
        recs = [(sid, d, s) for sid, series in pos_daily.items() for d, s in series.items()]
        df = pd.DataFrame(recs, columns=["student_id", "date", "score"])
    df["student_id"] = df["student_id"].astype(str)
    df["date"] = pd.to_datetime(df["date"])
    df["score"] = df["score"].astype(float)
    return df


def align_pretreatment(
    table: CohortTable,
    intervention_dates,
    pos_daily,
    covariate_stamps=None,
    statistic="mean",
) -> CohortTable:
    """Anchor PoS to the calendar month before each unit's reference date.

    Treated units use their intervention date. A control uses the first day
    of the modal intervention month among treated units in its block-year
    (falling back to its year, then to the whole cohort). Scores dated on or
    after the reference date never enter the summary. ``covariate_stamps``
    (student_id -> {covariate: date}) are checked against the 31 December
    snapshot of the preceding year.
    """
    if statistic not in ("mean", "median"):
        raise ValueError("statistic must be 'mean' or 'median'")
    frame = table.frame.copy()
    ids = frame[table.id_column].astype(str).to_numpy()
    treated = frame[table.treatment_column].to_numpy(dtype=int)
    if table.year_column:
        years = frame[table.year_column].to_numpy(dtype=int)
    else:
        years = None
    dates = {str(k): pd.Timestamp(v) for k, v in dict(intervention_dates).items()}

    ref = [None] * len(frame)
    for i in np.flatnonzero(treated == 1):
        if ids[i] not in dates:
            raise MissingPoSWindow(f"treated student {ids[i]} has no intervention date")
        ref[i] = dates[ids[i]]

    blocks = table.block_keys()
    by_block_year, by_year, overall = {}, {}, []
    for i in np.flatnonzero(treated == 1):
        m = _month_start(ref[i])
        y = years[i] if years is not None else ref[i].year
        by_block_year.setdefault((blocks[i], y), []).append(m)
        by_year.setdefault(y, []).append(m)
        overall.append(m)

    def modal(months):
        s = pd.Series(months).value_counts()
        top = s[s == s.max()].index
        return min(top)

    log = []
    for i in np.flatnonzero(treated == 0):
        y = years[i] if years is not None else None
        if (blocks[i], y) in by_block_year:
            ref[i], source = modal(by_block_year[(blocks[i], y)]), "block-year"
        elif y in by_year:
            ref[i], source = modal(by_year[y]), "year"
        elif overall:
            ref[i], source = modal(overall), "cohort"
        else:
            raise MissingPoSWindow("no treated intervention dates to anchor controls")
        log.append({"student_id": ids[i], "reference_month": ref[i].strftime("%Y-%m"), "source": source})

    if covariate_stamps:
        for i, sid in enumerate(ids):
            stamps = covariate_stamps.get(sid) or covariate_stamps.get(ids[i])
            if not stamps:
                continue
            year = years[i] if years is not None else ref[i].year
            snapshot = pd.Timestamp(year=int(year) - 1, month=12, day=31)
            for cov, stamp in stamps.items():
                stamp = pd.Timestamp(stamp)
                if stamp >= ref[i] or stamp > snapshot:
                    raise LeakageDetected(
                        f"covariate '{cov}' for student {sid} stamped {stamp.date()} "
                        f"(snapshot {snapshot.date()}, reference {ref[i].date()})"
                    )

    long = _as_long_pos(pos_daily)
    grouped = {sid: g for sid, g in long.groupby("student_id")}
    aligned = np.empty(len(frame))
    for i, sid in enumerate(ids):
        r = ref[i]
        window_end = _month_start(r)
        window_start = window_end - pd.DateOffset(months=1)
        g = grouped.get(sid)
        if g is None:
            raise MissingPoSWindow(f"no PoS series for student {sid}")
        sel = g[(g["date"] >= window_start) & (g["date"] < window_end) & (g["date"] < r)]
        if sel.empty:
            raise MissingPoSWindow(
                f"no PoS scores for student {sid} in {window_start.strftime('%Y-%m')}"
            )
        aligned[i] = sel["score"].mean() if statistic == "mean" else sel["score"].median()

    pos_col = table.pos_column or "pos_aligned"
    frame[pos_col] = aligned
    report = dict(table.report)
    report["alignment"] = {"statistic": statistic, "controls": log}
    return replace(table, frame=frame, pos_column=pos_col, report=report)
