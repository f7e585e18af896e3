"""End-to-end orchestration: config, staged execution, artifacts, manifest.

Stages run in a fixed order and each writes its artifacts into the output
directory. ``manifest.json`` carries every effective decision, seed and
count but no wall-clock data, so identical inputs give identical bytes;
stage timings go to ``timings.json`` instead.
"""

from __future__ import annotations

import json
import os
import platform
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy
from scipy.stats import gaussian_kde

from . import __version__
from .balance import THRESHOLDS, balance_report
from .cohort import (
    CohortTable,
    Kind,
    Role,
    SchemaConfig,
    align_pretreatment,
    apply_schema,
    classify_covariates,
    collapse_duplicates,
    impute_missing,
    load_cohort,
    load_schema_config,
    read_config_file,
)
from .errors import ConfigError, ConstantVariable, MatchdrError, StageError
from .estimator import DEFAULT_TRIM, estimate_outcome
from .matching import MatchedSample, MatchSpec, match
from .propensity import fit_logistic, trim_to_support
from .sensitivity import CONTINUITY, DEFAULT_GAMMA_GRID, EXACT_BELOW, sensitivity_for_significant

STAGES = (
    "load",
    "collapse",
    "classify",
    "align",
    "propensity",
    "support",
    "match",
    "balance",
    "estimate",
    "sensitivity",
)
RESULT_COLUMNS = [
    "domain",
    "outcome",
    "ate_dr",
    "ci_low",
    "ci_high",
    "p_boot",
    "delta_post",
    "ancova",
    "family",
    "n",
    "max_gamma_significant",
]
OUTPUT_ENV = "MATCHDR_OUTPUT_DIR"
FLOAT_FORMAT = "%.17g"


@dataclass
class PipelineConfig:
    cohort: Path
    schema: SchemaConfig
    seed: int
    output_dir: Path
    intervention_dates: Path | None = None
    pos_daily: Path | None = None
    covariate_stamps: Path | None = None
    match: MatchSpec = field(default_factory=MatchSpec)
    epsilon: float = 1e-6
    max_iter: int = 100
    tol: float = 1e-8
    B: int = 999
    winsorize: bool = False
    trim: tuple[float, float] = DEFAULT_TRIM
    stratified: bool = False
    gamma_grid: tuple[float, ...] = DEFAULT_GAMMA_GRID
    alpha: float = 0.05
    density_variables: list[str] | None = None
    jobs: int = 1

    @classmethod
    def from_dict(cls, d, base_dir=None, seed=None, output_dir=None, jobs=None):
        """Build and validate a config. Relative paths resolve against
        ``base_dir``; ``seed``/``output_dir``/``jobs`` override the file."""
        d = dict(d)
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        known = {"seed", "output_dir", "jobs", "inputs", "schema", "propensity", "match", "estimator", "sensitivity", "report"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        seed = d.get("seed") if seed is None else seed
        if seed is None:
            raise ConfigError("a seed is mandatory (config 'seed' or --seed)")
        if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

        inputs = dict(d.get("inputs", {}))

        def path(key, required=False):
            v = inputs.get(key)
            if v is None:
                if required:
                    raise ConfigError(f"inputs.{key} is required")
                return None
            p = Path(v)
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise ConfigError(f"inputs.{key} does not exist: {p}")
            return p

        cohort = path("cohort", required=True)
        schema_src = d.get("schema", inputs.get("schema"))
        if schema_src is None:
            raise ConfigError("a schema (inline table or inputs.schema path) is required")
        if isinstance(schema_src, str):
            sp = Path(schema_src)
            sp = sp if sp.is_absolute() else base / sp
            if not sp.exists():
                raise ConfigError(f"schema file does not exist: {sp}")
            schema = load_schema_config(sp)
        else:
            schema = load_schema_config(dict(schema_src))

        dates, daily = path("intervention_dates"), path("pos_daily")
        if (dates is None) != (daily is None):
            raise ConfigError("inputs.intervention_dates and inputs.pos_daily must be given together")

        prop = dict(d.get("propensity", {}))
        est = dict(d.get("estimator", {}))
        sens = dict(d.get("sensitivity", {}))
        rep = dict(d.get("report", {}))
        for name, sec, allowed in (
            ("propensity", prop, {"epsilon", "max_iter", "tol"}),
            ("estimator", est, {"B", "winsorize", "trim", "stratified"}),
            ("sensitivity", sens, {"gamma_grid", "alpha"}),
            ("report", rep, {"density_variables"}),
            ("match", d.get("match", {}), set(MatchSpec.__dataclass_fields__)),
        ):
            extra = set(sec) - allowed
            if extra:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
        try:
            mspec = MatchSpec(**d.get("match", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [match] section: {exc}") from exc
        trim = tuple(float(x) for x in est.get("trim", DEFAULT_TRIM))
        if len(trim) != 2 or not 0 < trim[0] < trim[1] < 1:
            raise ConfigError(f"trim bounds must satisfy 0 < lo < hi < 1, got {trim}")
        B = int(est.get("B", 999))
        if B < 1:
            raise ConfigError("estimator.B must be >= 1")
        grid = tuple(float(g) for g in sens.get("gamma_grid", DEFAULT_GAMMA_GRID))
        if not grid or min(grid) < 1:
            raise ConfigError("sensitivity.gamma_grid values must be >= 1")

        out = output_dir or d.get("output_dir") or os.environ.get(OUTPUT_ENV) or "matchdr-output"
        out = Path(out)
        out = out if out.is_absolute() or output_dir is not None else base / out
        return cls(
            cohort=cohort,
            schema=schema,
            seed=int(seed),
            output_dir=out,
            intervention_dates=dates,
            pos_daily=daily,
            covariate_stamps=path("covariate_stamps"),
            match=mspec,
            epsilon=float(prop.get("epsilon", 1e-6)),
            max_iter=int(prop.get("max_iter", 100)),
            tol=float(prop.get("tol", 1e-8)),
            B=B,
            winsorize=bool(est.get("winsorize", False)),
            trim=trim,
            stratified=bool(est.get("stratified", False)),
            gamma_grid=grid,
            alpha=float(sens.get("alpha", 0.05)),
            density_variables=rep.get("density_variables"),
            jobs=int(jobs if jobs is not None else d.get("jobs", 1)),
        )


def load_pipeline_config(path, **overrides) -> PipelineConfig:
    path = Path(path)
    return PipelineConfig.from_dict(read_config_file(path), base_dir=path.parent, **overrides)


@dataclass
class PipelineResult:
    status: int
    manifest: dict
    output_dir: Path
    table: CohortTable | None = None
    matched: MatchedSample | None = None
    dr_results: list = field(default_factory=list)
    sensitivity: object = None
    results_frame: pd.DataFrame | None = None


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=False, default=_json_default, allow_nan=True) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (Path, pd.Timestamp)):
        return str(o)
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _read_dates(path):
    df = pd.read_csv(path, dtype={"student_id": str})
    return dict(zip(df["student_id"], pd.to_datetime(df["date"])))


def _read_stamps(path):
    df = pd.read_csv(path, dtype={"student_id": str})
    out = {}
    for sid, cov, d in zip(df["student_id"], df["covariate"], df["date"]):
        out.setdefault(sid, {})[cov] = pd.Timestamp(d)
    return out


def results_table(dr_results, sensitivity=None) -> pd.DataFrame:
    max_gamma = sensitivity.max_gamma if sensitivity is not None else {}
    rows = [
        {
            "domain": r.domain,
            "outcome": r.outcome,
            "ate_dr": r.ate_dr,
            "ci_low": r.ci_low,
            "ci_high": r.ci_high,
            "p_boot": r.p_boot,
            "delta_post": r.delta_post,
            "ancova": r.ancova,
            "family": r.family,
            "n": r.n_pairs,
            "max_gamma_significant": max_gamma.get(r.outcome),
        }
        for r in dr_results
    ]
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def emit_results_table(dr_results, sensitivity, out_dir) -> pd.DataFrame:
    """Write ``results.csv`` and ``results.json`` with the fixed column set."""
    out_dir = Path(out_dir)
    frame = results_table(dr_results, sensitivity)
    _write_csv(frame, out_dir / "results.csv")
    records = [
        {c: (None if (isinstance(v, float) and np.isnan(v)) else v) for c, v in rec.items()}
        for rec in frame.astype(object).where(frame.notna(), None).to_dict(orient="records")
    ]
    _write_json(out_dir / "results.json", {"columns": RESULT_COLUMNS, "rows": records})
    return frame


def density_data(matched: MatchedSample, variables, grid_size=256) -> dict:
    """Plot-ready treated vs matched-control distributions.

    Numeric variables: Gaussian KDE (Silverman bandwidth) on a shared grid;
    matched controls enter once per appearance. Categorical variables:
    per-level proportions in each arm. A variable constant across both
    arms yields a one-point spike and a ``ConstantVariable`` warning.
    """
    table = matched.table
    out = {}
    for v in variables:
        t_vals = matched.treated_values(v)
        c_vals = matched.control_values(v)
        kind = Kind.NUMERIC if v == table.pos_column else table.schema.kind_of(v)
        if kind == Kind.CATEGORICAL:
            t_s = pd.Series(t_vals, dtype=object).dropna().astype(str)
            c_s = pd.Series(c_vals, dtype=object).dropna().astype(str)
            levels = sorted(set(t_s) | set(c_s))
            out[v] = {
                "kind": "categorical",
                "frame": pd.DataFrame(
                    {
                        "level": levels,
                        "proportion_treated": [float((t_s == lv).mean()) if len(t_s) else 0.0 for lv in levels],
                        "proportion_control": [float((c_s == lv).mean()) if len(c_s) else 0.0 for lv in levels],
                    }
                ),
            }
            continue
        t = np.asarray(t_vals, dtype=float)
        c = np.asarray(c_vals, dtype=float)
        t, c = t[~np.isnan(t)], c[~np.isnan(c)]
        both = np.concatenate([t, c])
        if both.size == 0:
            continue
        lo, hi = float(both.min()), float(both.max())
        if lo == hi:
            warnings.warn(f"'{v}' is constant in the matched sample; emitting a spike", ConstantVariable)
            out[v] = {
                "kind": "numeric",
                "bandwidth": {"treated": 0.0, "control": 0.0},
                "frame": pd.DataFrame({"value": [lo], "density_treated": [1.0], "density_control": [1.0]}),
                "spike": True,
            }
            continue
        bws = {}
        pad = 0.0
        kdes = {}
        for arm, x in (("treated", t), ("control", c)):
            if x.size >= 2 and np.ptp(x) > 0:
                k = gaussian_kde(x, bw_method="silverman")
                kdes[arm] = k
                bws[arm] = float(np.sqrt(k.covariance[0, 0]))
                pad = max(pad, 3 * bws[arm])
            else:
                kdes[arm] = None
                bws[arm] = 0.0
        grid = np.linspace(lo - pad, hi + pad, grid_size)
        step = grid[1] - grid[0]
        dens = {}
        for arm, x in (("treated", t), ("control", c)):
            if kdes[arm] is not None:
                dens[arm] = kdes[arm](grid)
            else:
                # degenerate arm: all mass on the nearest grid point
                d = np.zeros(grid_size)
                if x.size:
                    d[int(np.argmin(np.abs(grid - x[0])))] = 1.0 / step
                    warnings.warn(f"'{v}' is constant in the {arm} arm; emitting a spike", ConstantVariable)
                dens[arm] = d
        out[v] = {
            "kind": "numeric",
            "bandwidth": bws,
            "frame": pd.DataFrame({"value": grid, "density_treated": dens["treated"], "density_control": dens["control"]}),
            "spike": False,
        }
    return out


def emit_density_data(matched: MatchedSample, variables, out_dir, grid_size=256) -> dict:
    """Write one CSV per variable under ``out_dir`` plus ``index.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = density_data(matched, variables, grid_size)
    index = {"bandwidth_rule": "silverman", "grid_size": grid_size, "control_weighting": "once per appearance", "variables": {}}
    for i, (v, d) in enumerate(data.items()):
        fname = f"{i:02d}_{_safe(v)}.csv"
        _write_csv(d["frame"], out_dir / fname)
        entry = {"file": fname, "kind": d["kind"]}
        if d["kind"] == "numeric":
            entry["bandwidth"] = d["bandwidth"]
            entry["spike"] = d["spike"]
        index["variables"][v] = entry
    _write_json(out_dir / "index.json", index)
    return data


def _safe(name):
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def _versions():
    return {
        "matchdr": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def _decisions(cfg: PipelineConfig):
    s = cfg.schema
    return {
        "classification": {
            "numeric_fraction_threshold": s.numeric_fraction_threshold,
            "min_distinct": s.min_distinct,
            "kind_overrides": dict(s.kind_overrides),
        },
        "alignment": {
            "statistic": s.pos_statistic,
            "window": "calendar month preceding the reference date; scores on/after it excluded",
            "control_reference": "modal intervention month of treated units in the block-year (then year, then cohort); ties to the earliest month",
            "covariate_snapshot": "31 December of year t-1",
        },
        "imputation": {"numeric": "block-year median plus <name>_missing indicator", "categorical": "Unknown level"},
        "propensity": {
            "epsilon": cfg.epsilon,
            "max_iter": cfg.max_iter,
            "tol": cfg.tol,
            "step_halving_max": 10,
            "reference_level": "lexicographically smallest level dropped",
            "standardization": "numeric columns z-scored during fitting, coefficients reported on the original scale",
            "interactions": [list(p) for p in s.interactions],
        },
        "support": "keep units with score in [max of arm minima, min of arm maxima]",
        "matching": {
            "m": cfg.match.m,
            "caliper_multiplier": cfg.match.caliper_multiplier,
            "caliper_scope": cfg.match.caliper_scope,
            "w": cfg.match.w,
            "with_replacement": cfg.match.with_replacement,
            "tie_break": ["distance", "abs logit gap", "control id"],
            "treated_order": "ascending id within block",
            "fewer_than_m": "keep treated unit with at least one control; drop if none",
            "gower_missing": "pairwise exclusion",
        },
        "balance": {"thresholds": list(THRESHOLDS), "control_weighting": "once per appearance", "missing": "excluded per covariate"},
        "estimator": {
            "B": cfg.B,
            "trim": list(cfg.trim),
            "winsorize_headline": cfg.winsorize,
            "winsorize_percentiles": [1, 99],
            "stratified_bootstrap": cfg.stratified,
            "set_weighting": "controls in a 1:k set weigh 1/k",
            "pi": "treated share of matched mass",
            "family_rule": "Poisson iff treated-arm values are non-negative integers (1e-8); Gaussian if the control arm disagrees",
            "bootstrap": "matched sets resampled; outcome models refitted per replicate; propensity fixed",
            "p_floor": "2/(B+1)",
            "standard_errors": "HC0 reported; inference by bootstrap",
        },
        "sensitivity": {
            "gamma_grid": list(cfg.gamma_grid),
            "alpha": cfg.alpha,
            "continuity_correction": CONTINUITY,
            "exact_below_pairs": EXACT_BELOW,
            "ties": "average ranks",
        },
        "density": {"bandwidth_rule": "silverman"},
    }


def run_pipeline(cfg: PipelineConfig, stop_after: str | None = None) -> PipelineResult:
    """Run stages in order up to ``stop_after`` (default: all).

    Raises :class:`StageError` naming the failing stage after writing
    ``manifest.json`` with that stage marked failed.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ValueError(f"unknown stage {stop_after!r}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "versions": _versions(),
        "seed": cfg.seed,
        "seed_streams": {"bootstrap": "replicate b of outcome k uses SeedSequence(seed, spawn_key=(k, b))"},
        "inputs": {k: (Path(v).name if v is not None else None) for k, v in (
            ("cohort", cfg.cohort), ("intervention_dates", cfg.intervention_dates),
            ("pos_daily", cfg.pos_daily), ("covariate_stamps", cfg.covariate_stamps))},
        "schema": cfg.schema.to_dict(),
        "decisions": _decisions(cfg),
        "stages": [],
        "counts": {},
        "warnings": [],
    }
    timings = {}
    res = PipelineResult(status=0, manifest=manifest, output_dir=out)
    state = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                info = fn() or {}
            except MatchdrError as exc:
                manifest["stages"].append({"name": name, "status": "failed", "error": type(exc).__name__, "message": str(exc)})
                _finish(out, manifest, timings)
                raise StageError(name, exc) from exc
            except (ValueError, KeyError, np.linalg.LinAlgError) as exc:
                manifest["stages"].append({"name": name, "status": "failed", "error": type(exc).__name__, "message": str(exc)})
                _finish(out, manifest, timings)
                raise StageError(name, exc) from exc
        for w in caught:
            manifest["warnings"].append({"stage": name, "category": w.category.__name__, "message": str(w.message)})
        timings[name] = round(time.perf_counter() - t0, 6)
        manifest["stages"].append({"name": name, "status": "ok", **info})
        return name == stop_after

    def s_load():
        t = load_cohort(cfg.cohort, cfg.schema)
        state["table"] = t
        _write_json(out / "load_report.json", t.report)
        manifest["counts"]["n_rows"] = t.report["n_rows"]
        manifest["counts"]["n_treated"] = t.report["n_treated"]
        return {"artifacts": ["load_report.json"]}

    def s_collapse():
        t = collapse_duplicates(state["table"])
        state["table"] = t
        collapsed = t.report.get("collapsed_columns", [])
        _write_json(out / "collapse_report.json", {"collapsed_columns": collapsed})
        return {"artifacts": ["collapse_report.json"], "collapsed": len(collapsed)}

    def s_classify():
        t = state["table"]
        schema = classify_covariates(
            t, cfg.schema.numeric_fraction_threshold, cfg.schema.min_distinct, cfg.schema.kind_overrides
        )
        t = impute_missing(apply_schema(t, schema))
        state["table"] = t
        _write_json(out / "schema.json", {"schema": t.schema.to_dict(), "imputed": t.report.get("imputed", {})})
        manifest["counts"]["imputed"] = t.report.get("imputed", {})
        return {"artifacts": ["schema.json"]}

    def s_align():
        t = state["table"]
        if cfg.pos_daily is None:
            if t.pos_column is None:
                raise ConfigError("cohort has no PoS column and no daily PoS input was given")
            _write_json(out / "alignment.json", {"source": f"column '{t.pos_column}' supplied in the cohort"})
            return {"artifacts": ["alignment.json"], "mode": "precomputed"}
        daily = pd.read_csv(cfg.pos_daily, dtype={"student_id": str})
        dates = _read_dates(cfg.intervention_dates)
        stamps = _read_stamps(cfg.covariate_stamps) if cfg.covariate_stamps else None
        t = align_pretreatment(t, dates, daily, stamps, statistic=cfg.schema.pos_statistic)
        state["table"] = t
        _write_json(out / "alignment.json", t.report["alignment"])
        return {"artifacts": ["alignment.json"], "mode": "daily"}

    def s_propensity():
        t = state["table"]
        fit = fit_logistic(t, epsilon=cfg.epsilon, max_iter=cfg.max_iter, tol=cfg.tol)
        state["fit"] = fit
        _write_json(out / "propensity.json", fit.summary())
        scores = pd.DataFrame({t.id_column: t.ids, "treated": t.treated, "score": fit.scores, "logit": fit.logits})
        _write_csv(scores, out / "scores.csv")
        return {"artifacts": ["propensity.json", "scores.csv"], "iterations": fit.n_iter}

    def s_support():
        t, fit = state["table"], state["fit"]
        tt, tf = trim_to_support(t, fit)
        state["trimmed"], state["tfit"] = tt, tf
        summ = tf.summary()
        info = {
            "support_low": tf.support_low,
            "support_high": tf.support_high,
            "n_retained": len(tt),
            "n_trimmed_treated": int(((t.treated == 1).sum()) - (tt.treated == 1).sum()),
            "n_trimmed_control": int(((t.treated == 0).sum()) - (tt.treated == 0).sum()),
        }
        _write_json(out / "support.json", {**info, "summary": summ})
        manifest["counts"].update({k: v for k, v in info.items() if k.startswith("n_")})
        return {"artifacts": ["support.json"]}

    def s_match():
        m = match(state["trimmed"], state["tfit"], cfg.match)
        state["matched"] = m
        _write_csv(m.to_wide_frame(), out / "matched_wide.csv")
        (out / "pairs.json").write_text(m.pairs_json() + "\n", encoding="utf-8")
        dropped = int(sum(v["n_dropped_no_eligible"] for v in m.exclusions.values()))
        manifest["counts"].update(
            {
                "n_matched_sets": m.n_sets,
                "n_control_appearances": int(len(m.control_rows)),
                "n_unique_controls": int(np.unique(m.control_rows).size),
                "n_unmatched_dropped": dropped,
            }
        )
        manifest["decisions"]["matching"]["caliper_width"] = m.caliper_width
        manifest["decisions"]["matching"]["pos_rescale"] = list(m.pos_rescale)
        return {"artifacts": ["matched_wide.csv", "pairs.json"]}

    def s_balance():
        br = balance_report(state["trimmed"], state["matched"])
        state["balance"] = br
        _write_csv(br.per_level, out / "balance.csv")
        _write_json(out / "balance.json", br.summary())
        t = state["trimmed"]
        variables = cfg.density_variables
        if variables is None:
            variables = ([t.pos_column] if t.pos_column else []) + t.schema.by_role(Role.MATCHING, Role.BLOCKING)
        emit_density_data(state["matched"], variables, out / "density")
        return {"artifacts": ["balance.csv", "balance.json", "density/"], "all_below_0.25": br.summary()["all_below_high"]}

    def s_estimate():
        m = state["matched"]
        results, failures = [], {}
        for k, outcome in enumerate(m.table.outcomes):
            try:
                r = estimate_outcome(
                    m, outcome, B=cfg.B, seed=cfg.seed, outcome_index=k, winsorize=cfg.winsorize,
                    trim=cfg.trim, stratified=cfg.stratified, domain=m.table.domains.get(outcome, ""), jobs=cfg.jobs,
                )
            except MatchdrError as exc:
                failures[outcome] = f"{type(exc).__name__}: {exc}"
                continue
            results.append(r)
        state["dr"] = results
        _write_json(out / "estimates.json", {"results": [r.to_dict() for r in results], "failed": failures})
        manifest["counts"]["outcomes_estimated"] = len(results)
        manifest["counts"]["outcomes_failed"] = failures
        return {"artifacts": ["estimates.json"]}

    def s_sensitivity():
        st = sensitivity_for_significant(state["dr"], state["matched"], cfg.gamma_grid, cfg.alpha)
        state["sens"] = st
        _write_csv(st.rows, out / "sensitivity.csv")
        _write_json(out / "sensitivity.json", {"conventions": st.conventions, "outcomes": st.summary_records()})
        res.results_frame = emit_results_table(state["dr"], st, out)
        return {"artifacts": ["sensitivity.csv", "sensitivity.json", "results.csv", "results.json"]}

    fns = dict(zip(STAGES, (s_load, s_collapse, s_classify, s_align, s_propensity, s_support, s_match, s_balance, s_estimate, s_sensitivity)))
    for name in STAGES:
        if stage(name, fns[name]):
            break
    if "dr" in state and "sens" not in state:
        res.results_frame = emit_results_table(state["dr"], None, out)
    _finish(out, manifest, timings)
    res.table = state.get("trimmed", state.get("table"))
    res.matched = state.get("matched")
    res.dr_results = state.get("dr", [])
    res.sensitivity = state.get("sens")
    return res


def _finish(out, manifest, timings):
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "timings.json", timings)


def render_report(out_dir) -> str:
    """Markdown summary assembled from the artifacts of a finished run."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json in {out_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    lines = ["# Matched DR analysis", ""]
    lines.append("| stage | status |")
    lines.append("|---|---|")
    for s in manifest["stages"]:
        lines.append(f"| {s['name']} | {s['status']} |")
    lines.append("")
    c = manifest.get("counts", {})
    if c:
        lines.append("## Counts")
        lines += [f"- {k}: {v}" for k, v in c.items()]
        lines.append("")
    bal = out_dir / "balance.json"
    if bal.exists():
        b = json.loads(bal.read_text(encoding="utf-8"))
        lines.append("## Balance (max |SMD| per covariate)")
        lines.append("| covariate | before | after |")
        lines.append("|---|---|---|")
        for cov, v in b["per_covariate_max"].items():
            lines.append(f"| {cov} | {v['before']:.3f} | {v['after']:.3f} |")
        lines.append("")
    res = out_dir / "results.csv"
    if res.exists():
        frame = pd.read_csv(res)
        lines.append("## Effects")
        lines.append("| domain | outcome | ATE (DR) | 95% CI | p | delta_post | ANCOVA | family | n | max Γ |")
        lines.append("|---|---|---|---|---|---|---|---|---|---|")
        for r in frame.itertuples(index=False):
            mg = "" if pd.isna(r.max_gamma_significant) else f"{r.max_gamma_significant:g}"
            lines.append(
                f"| {'' if pd.isna(r.domain) else r.domain} | {r.outcome} | {r.ate_dr:.2f} | [{r.ci_low:.2f}, {r.ci_high:.2f}] | "
                f"{r.p_boot:.3f} | {r.delta_post:.2f} | {r.ancova:.2f} | {r.family} | {r.n} | {mg} |"
            )
        lines.append("")
    text = "\n".join(lines)
    (out_dir / "report.md").write_text(text, encoding="utf-8")
    return text
