"""Synthetic student cohorts with known treatment effects.

The generator draws a latent ability, derives typical student-record baseline
covariates and a PoS risk score from it, assigns treatment by a logistic
rule over *observed* covariates (so ignorability holds given X), and
builds coupled potential outcomes. Optional "ghost" controls silently
disengage: their aligned PoS decays and both potential outcomes drop.

Functional forms (standardized scores ``zg`` grade, ``zf`` prior
failures, ``zp`` PoS, ``zq`` qualification progress, ``za`` age)::

    treatment index  h = -0.8 zg + 0.4 zf - 1.0 zp + 0.3 first + 0.3 part + 0.2 za
        nonlinear:   h += 0.8 (zg^2 - 1) + 0.8 zg zp
    logit e = alpha + s * h / overlap   (alpha solved for the treated fraction)

    outcome surface  m = 1.5 zg + 1.0 zp - 0.6 zf + 0.5 zq - 0.4 first
                         + programme and mode effects
        nonlinear:   m += 1.2 (zg^2 - 1) + 1.0 zg zp

Gaussian outcomes are ``10 + m + noise`` with ``Y1 = Y0 + tau``. Poisson
outcomes have rate ``exp(0.4 + 0.25 m)`` and a multiplicative rate effect
chosen so the expected mean difference equals ``tau``; both potential
counts come from one uniform draw, so ``tau = 0`` gives ``Y1 == Y0``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, stats
from scipy.special import expit

from .cohort import CohortTable, Role, SchemaConfig
from .errors import InvalidSpec

PROGRAMMES = (
    "BSc Computer Science",
    "BA Psychology",
    "BBus Accounting",
    "BSc Biology",
    "BA Education",
    "BEng Civil",
    "BN Nursing",
    "BA History",
)
MODES = ("Distance", "Internal")

OUTCOME_MENU = (
    ("courses_failed_year", "poisson", "Intervention year"),
    ("courses_withdrawn_year", "poisson", "Intervention year"),
    ("courses_passed_year", "poisson", "Intervention year"),
    ("pct_courses_passed_year", "gaussian", "Intervention year"),
    ("credits_passed_year", "gaussian", "Intervention year"),
    ("cum_mean_grade", "gaussian", "Cumulative"),
    ("cum_deviation_class_mean", "gaussian", "Cumulative"),
    ("cum_courses_passed", "poisson", "Cumulative"),
    ("cum_courses_failed", "poisson", "Cumulative"),
    ("cum_courses_withdrawn", "poisson", "Cumulative"),
    ("cum_credits_passed", "gaussian", "Cumulative"),
    ("cum_pct_courses_passed", "gaussian", "Cumulative"),
    ("qualification_pct_completed", "gaussian", "Cumulative"),
)

NUMERIC_COUNTS = ("failed_prev", "withdrawn_prev", "passed_prev", "years_since_last")


@dataclass(frozen=True)
class DgpSpec:
    n: int = 2000
    true_ate: float = 2.0
    confounding_strength: float = 1.0
    overlap: float = 1.0
    ghost_fraction: float = 0.0
    blocks: int = 4
    outcome_family: str = "gaussian"
    propensity_form: str = "linear"
    outcome_form: str = "linear"
    treated_fraction: float = 0.3
    n_outcomes: int = 1
    noise_sd: float = 1.0
    ghost_pos_decay: float = 0.1
    ghost_penalty: float = 6.0
    missing_rate: float = 0.0
    years: tuple = (2022, 2023, 2024)
    seed: int = 0

    def validate(self):
        if self.n < 10:
            raise InvalidSpec("n must be >= 10")
        if not 0 < self.overlap <= 1:
            raise InvalidSpec("overlap must lie in (0, 1]")
        if not 0 <= self.ghost_fraction < 1:
            raise InvalidSpec("ghost_fraction must lie in [0, 1)")
        if not 0 < self.treated_fraction < 1:
            raise InvalidSpec("treated_fraction must lie in (0, 1)")
        if self.blocks < 1:
            raise InvalidSpec("blocks must be >= 1")
        if self.outcome_family not in ("gaussian", "poisson", "mixed"):
            raise InvalidSpec("outcome_family must be gaussian, poisson or mixed")
        for f in (self.propensity_form, self.outcome_form):
            if f not in ("linear", "nonlinear"):
                raise InvalidSpec("forms must be 'linear' or 'nonlinear'")
        if self.n_outcomes < 1:
            raise InvalidSpec("n_outcomes must be >= 1")
        if not 0 <= self.missing_rate < 0.5:
            raise InvalidSpec("missing_rate must lie in [0, 0.5)")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "years" in d:
            d["years"] = tuple(d["years"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown DGP spec keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class GroundTruth:
    tau: float
    true_ate: dict
    true_att: dict
    propensity: np.ndarray
    mu0: dict
    mu1: dict
    y0: dict
    y1: dict
    ghost: np.ndarray
    families: dict
    spec: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "tau": self.tau,
                "true_ate": self.true_ate,
                "true_att": self.true_att,
                "families": self.families,
                "spec": self.spec,
                "propensity": self.propensity.tolist(),
                "ghost": self.ghost.astype(int).tolist(),
                "mu0": {k: v.tolist() for k, v in self.mu0.items()},
                "mu1": {k: v.tolist() for k, v in self.mu1.items()},
            }
        )


def _programmes(blocks):
    if blocks == 1:
        return PROGRAMMES[:1], MODES[1:]
    n_prog = max(1, blocks // 2)
    if n_prog > len(PROGRAMMES):
        raise InvalidSpec(f"at most {2 * len(PROGRAMMES)} blocks supported")
    return PROGRAMMES[:n_prog], MODES


def outcome_names(spec: DgpSpec):
    if spec.n_outcomes == 1:
        fam = "gaussian" if spec.outcome_family == "mixed" else spec.outcome_family
        return [("y", fam, "Outcome")]
    out = []
    for k in range(spec.n_outcomes):
        if k < len(OUTCOME_MENU):
            name, fam, dom = OUTCOME_MENU[k]
        else:
            name, fam, dom = f"y{k}", "gaussian", "Outcome"
        if spec.outcome_family != "mixed":
            fam = spec.outcome_family
        out.append((name, fam, dom))
    return out


def schema_config_for(spec: DgpSpec) -> SchemaConfig:
    names = outcome_names(spec)
    return SchemaConfig(
        treatment_column="treated",
        outcome_columns=[n for n, _, _ in names],
        id_column="student_id",
        year_column="year",
        pos_column="pos_aligned",
        blocking_columns=["programme_title", "study_mode"],
        kind_overrides={c: "numeric" for c in NUMERIC_COUNTS},
        domains={n: d for n, _, d in names},
    )


def generate(spec: DgpSpec, with_daily=False):
    """Draw a cohort. Returns ``(CohortTable, GroundTruth)``, plus
    ``(intervention_dates, pos_daily)`` when ``with_daily`` is set."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    ability = rng.normal(size=n)

    grade = np.clip(np.round(62 + 10 * ability + rng.normal(0, 6, n)), 0, 100)
    failed = rng.poisson(np.exp(-0.2 - 0.6 * ability))
    withdrawn = rng.poisson(np.exp(-1.0 - 0.3 * ability))
    passed = rng.poisson(np.exp(1.3 + 0.15 * ability))
    qual = np.clip(np.round(50 + 15 * ability + rng.normal(0, 15, n)), 0, 100)
    age = 18 + np.floor(rng.exponential(6, n))
    years_since = rng.poisson(1.0, n)
    gender = rng.choice(["Female", "Male", "Non-binary"], size=n, p=[0.55, 0.42, 0.03])
    first = rng.choice(["No", "Yes"], size=n, p=[0.65, 0.35])
    admission = rng.choice(["School leaver", "Adult entry", "International"], size=n, p=[0.6, 0.3, 0.1])
    full_time = rng.choice(["Full-time", "Part-time"], size=n, p=[0.65, 0.35])
    progs, modes = _programmes(spec.blocks)
    programme = rng.choice(progs, size=n)
    mode = rng.choice(modes, size=n)
    year = rng.choice(np.asarray(spec.years), size=n)
    engagement = rng.normal(0, 0.5, n)
    pos = expit(0.4 + 1.0 * ability + 0.3 * (qual - 50) / 20 + engagement)
    pos = np.clip(pos, 0.01, 0.99)

    zg = (grade - 62) / 12
    zf = (failed - 1) / 1.2
    zp = (pos - 0.6) / 0.2
    zq = (qual - 50) / 20
    za = (age - 24) / 6
    is_first = (first == "Yes").astype(float)
    is_part = (full_time == "Part-time").astype(float)
    prog_idx = np.searchsorted(np.asarray(PROGRAMMES), programme, sorter=np.argsort(PROGRAMMES))
    prog_effect = np.linspace(-0.6, 0.6, len(PROGRAMMES))[np.argsort(np.argsort(PROGRAMMES))][prog_idx]
    mode_effect = np.where(mode == "Distance", -0.3, 0.0)

    h = -0.8 * zg + 0.4 * zf - 1.0 * zp + 0.3 * is_first + 0.3 * is_part + 0.2 * za
    if spec.propensity_form == "nonlinear":
        h = h + 0.8 * (zg**2 - 1) + 0.8 * zg * zp
    lin = spec.confounding_strength * h / spec.overlap
    alpha = optimize.brentq(lambda a: expit(a + lin).mean() - spec.treated_fraction, -40, 40)
    e_true = expit(alpha + lin)
    treated = (rng.uniform(size=n) < e_true).astype(int)

    ghost = np.zeros(n, dtype=bool)
    if spec.ghost_fraction > 0:
        controls = np.flatnonzero(treated == 0)
        k = int(round(spec.ghost_fraction * controls.size))
        ghost[rng.choice(controls, size=k, replace=False)] = True
    pos_obs = np.where(ghost, pos * spec.ghost_pos_decay, pos)

    surface = 1.5 * zg + 1.0 * zp - 0.6 * zf + 0.5 * zq - 0.4 * is_first + prog_effect + mode_effect
    if spec.outcome_form == "nonlinear":
        surface = surface + 1.2 * (zg**2 - 1) + 1.0 * zg * zp

    names = outcome_names(spec)
    frame = {
        "student_id": [f"S{i:06d}" for i in range(n)],
        "year": year.astype(int),
        "treated": treated,
        "prev_mean_grade": grade,
        "failed_prev": failed.astype(float),
        "withdrawn_prev": withdrawn.astype(float),
        "passed_prev": passed.astype(float),
        "qual_pct_completed": qual,
        "age": age,
        "years_since_last": years_since.astype(float),
        "gender": gender,
        "first_in_family": first,
        "admission_basis": admission,
        "full_time_status": full_time,
        "programme_title": programme,
        "study_mode": mode,
        "pos_aligned": pos_obs,
    }
    mu0s, mu1s, y0s, y1s, ate, att, fams = {}, {}, {}, {}, {}, {}, {}
    t_mask = treated == 1
    for k, (name, fam, _) in enumerate(names):
        krng = np.random.default_rng([spec.seed, 1000 + k])
        tilt = 1.0 + 0.2 * krng.normal() if k else 1.0
        m = tilt * surface
        if fam == "gaussian":
            mu0 = 10 + m - spec.ghost_penalty * ghost
            mu1 = mu0 + spec.true_ate
            noise = rng.normal(0, spec.noise_sd, n)
            y0, y1 = mu0 + noise, mu1 + noise
        else:
            mu0 = np.exp(0.4 + 0.25 * m) * np.where(ghost, 0.4, 1.0)
            ratio = 1.0 + spec.true_ate / mu0.mean()
            if ratio <= 0:
                raise InvalidSpec(f"true_ate {spec.true_ate} too negative for count outcome '{name}'")
            mu1 = mu0 * ratio
            u = rng.uniform(size=n)
            y0 = stats.poisson.ppf(u, mu0)
            y1 = stats.poisson.ppf(u, mu1)
        frame[name] = np.where(t_mask, y1, y0)
        mu0s[name], mu1s[name], y0s[name], y1s[name] = mu0, mu1, y0, y1
        ate[name] = float(np.mean(y1 - y0))
        att[name] = float(np.mean((y1 - y0)[t_mask])) if t_mask.any() else float("nan")
        fams[name] = fam

    df = pd.DataFrame(frame)
    covariates = [
        "prev_mean_grade", "failed_prev", "withdrawn_prev", "passed_prev", "qual_pct_completed", "age",
        "years_since_last", "gender", "first_in_family", "admission_basis", "full_time_status",
        "programme_title", "study_mode",
    ]
    if spec.missing_rate > 0:
        for c in ("prev_mean_grade", "age", "admission_basis"):
            hole = rng.uniform(size=n) < spec.missing_rate
            df[c] = df[c].astype(object).where(~hole, None)
    for c in covariates:
        if df[c].dtype != object:
            df[c] = df[c].astype(object)
    config = schema_config_for(spec)
    roles = {"programme_title": Role.BLOCKING, "study_mode": Role.BLOCKING}
    table = CohortTable(
        frame=df,
        id_column="student_id",
        treatment_column="treated",
        covariates=covariates,
        outcomes=[nm for nm, _, _ in names],
        year_column="year",
        pos_column="pos_aligned",
        roles=roles,
        domains=dict(config.domains),
        report={"n_rows": n, "n_treated": int(treated.sum()), "source": "synthcohort"},
        config=config,
    )
    truth = GroundTruth(
        tau=spec.true_ate,
        true_ate=ate,
        true_att=att,
        propensity=e_true,
        mu0=mu0s,
        mu1=mu1s,
        y0=y0s,
        y1=y1s,
        ghost=ghost,
        families=fams,
        spec={k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
    )
    if not with_daily:
        return table, truth
    dates, daily = _daily_series(df, treated, ghost, pos_obs, rng)
    return table, truth, dates, daily


def _daily_series(df, treated, ghost, pos_obs, rng):
    """Daily PoS around each unit's alignment month whose month mean equals
    ``pos_obs``, plus post-intervention scores that alignment must skip."""
    n = len(df)
    ids = df["student_id"].to_numpy()
    years = df["year"].to_numpy(dtype=int)
    months = rng.integers(3, 11, size=n)
    days = rng.integers(1, 29, size=n)
    dates = {}
    ref = [None] * n
    for i in np.flatnonzero(treated == 1):
        d = pd.Timestamp(year=int(years[i]), month=int(months[i]), day=int(days[i]))
        dates[ids[i]] = d
        ref[i] = d
    block = (df["programme_title"].astype(str) + "|" + df["study_mode"].astype(str)).to_numpy()
    modal = {}
    for i in np.flatnonzero(treated == 1):
        modal.setdefault((block[i], years[i]), []).append(pd.Timestamp(year=int(years[i]), month=int(months[i]), day=1))
    by_year = {}
    for (b, y), ms in modal.items():
        by_year.setdefault(y, []).extend(ms)

    def mode_of(ms):
        s = pd.Series(ms).value_counts()
        return min(s[s == s.max()].index)

    everything = [m for ms in modal.values() for m in ms]
    for i in np.flatnonzero(treated == 0):
        key = (block[i], years[i])
        if key in modal:
            ref[i] = mode_of(modal[key])
        elif years[i] in by_year:
            ref[i] = mode_of(by_year[years[i]])
        else:
            ref[i] = mode_of(everything)
    recs_id, recs_date, recs_score = [], [], []
    for i in range(n):
        start = pd.Timestamp(year=ref[i].year, month=ref[i].month, day=1) - pd.DateOffset(months=1)
        ndays = start.days_in_month
        p = pos_obs[i]
        amp = 0.5 * min(p, 1 - p, 0.05)
        if ghost[i]:
            wiggle = np.linspace(1.0, -1.0, ndays)
        else:
            wiggle = rng.uniform(-1, 1, ndays)
        wiggle = wiggle - wiggle.mean()
        wiggle = wiggle / max(1.0, np.abs(wiggle).max())
        scores = p + amp * wiggle
        for d in range(ndays):
            recs_id.append(ids[i])
            recs_date.append(start + pd.Timedelta(days=d))
            recs_score.append(scores[d])
        # leakage bait: on/after the reference date
        for d in range(3):
            recs_id.append(ids[i])
            recs_date.append(ref[i] + pd.Timedelta(days=d))
            recs_score.append(0.999)
    daily = pd.DataFrame({"student_id": recs_id, "date": recs_date, "score": recs_score})
    return dates, daily


def naive_oracle(cohort: CohortTable, truth: GroundTruth, outcome=None) -> dict:
    """Naive arm difference, the true sample ATE, and an AIPW estimate that
    plugs in the true propensity and outcome surfaces."""
    outcome = outcome or cohort.outcomes[0]
    y = cohort.frame[outcome].to_numpy(dtype=float)
    t = cohort.treated
    e = truth.propensity
    mu1, mu0 = truth.mu1[outcome], truth.mu0[outcome]
    naive = float(y[t == 1].mean() - y[t == 0].mean())
    phi = mu1 - mu0 + t * (y - mu1) / e - (1 - t) * (y - mu0) / (1 - e)
    return {"naive_diff": naive, "true_ate": truth.true_ate[outcome], "oracle_dr": float(phi.mean())}


def write_synthetic(spec: DgpSpec, out_dir, with_daily=False, B=999) -> dict:
    """Write a generated cohort with its sidecars.

    Produces ``cohort.csv``, ``ground_truth.json``, ``schema.json``,
    ``dgp.json`` and a ready-to-run ``pipeline.json``; with ``with_daily``
    also ``intervention_dates.csv`` and ``pos_daily.csv``, in which case the
    cohort CSV omits ``pos_aligned`` so the pipeline has to align it.
    """
    from pathlib import Path

    from .cohort import write_cohort

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    produced = generate(spec, with_daily=with_daily)
    table, truth = produced[0], produced[1]
    if with_daily:
        dates, daily = produced[2], produced[3]
        table = table.with_frame(table.frame.drop(columns=[table.pos_column]))
        pd.DataFrame({"student_id": list(dates), "date": [d.strftime("%Y-%m-%d") for d in dates.values()]}).to_csv(
            out / "intervention_dates.csv", index=False, lineterminator="\n"
        )
        daily.assign(date=daily["date"].dt.strftime("%Y-%m-%d")).to_csv(
            out / "pos_daily.csv", index=False, float_format="%.17g", lineterminator="\n"
        )
    write_cohort(table, out / "cohort.csv")
    (out / "ground_truth.json").write_text(truth.to_json() + "\n", encoding="utf-8")
    schema = schema_config_for(spec).to_dict()
    (out / "schema.json").write_text(json.dumps(schema, indent=1) + "\n", encoding="utf-8")
    (out / "dgp.json").write_text(json.dumps(truth.spec, indent=1) + "\n", encoding="utf-8")
    inputs = {"cohort": "cohort.csv", "schema": "schema.json"}
    if with_daily:
        inputs.update(intervention_dates="intervention_dates.csv", pos_daily="pos_daily.csv")
    pipeline = {"seed": spec.seed, "output_dir": "results", "inputs": inputs, "estimator": {"B": B}}
    (out / "pipeline.json").write_text(json.dumps(pipeline, indent=1) + "\n", encoding="utf-8")
    return {"table": table, "truth": truth, "files": sorted(p.name for p in out.iterdir())}
