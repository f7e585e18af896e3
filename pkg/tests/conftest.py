import warnings

import numpy as np
import pandas as pd
import pytest

from matchdr.cohort import CohortTable, CovariateSchema, CovariateSpec, Kind, Role, apply_schema, classify_covariates, collapse_duplicates, impute_missing, load_cohort
from matchdr.matching import MatchedSample, MatchSpec, match
from matchdr.propensity import fit_logistic, trim_to_support


# one line per acceptance check, repeated at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def prepared(csv_text, config):
    """Load, collapse, classify and impute a CSV fixture."""
    t = collapse_duplicates(load_cohort(csv_text, config))
    return impute_missing(apply_schema(t, classify_covariates(t)))


def matched_from(table, spec=None):
    """Propensity fit, support trimming and matching on a prepared table."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_logistic(table)
        tt, tf = trim_to_support(table, fit)
        return match(tt, tf, spec or MatchSpec())


@pytest.fixture(scope="session")
def small_synth():
    from matchdr import synth

    spec = synth.DgpSpec(n=600, seed=11, n_outcomes=2, outcome_family="mixed")
    table, truth = synth.generate(spec)
    t = impute_missing(apply_schema(table, classify_covariates(table)))
    return t, truth, matched_from(t)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_block(rng, n_t, n_c, block="P|Distance"):
    """A single-block table with two numeric and two categorical
    covariates, random PoS and random scores, plus a fit stand-in.

    Values are drawn on coarse lattices so exact distance ties occur.
    """
    from types import SimpleNamespace

    from scipy.special import logit

    n = n_t + n_c
    prog, mode = block.split("|")
    lines = ["id,T,prog,mode,g,f,c1,c2,pos,y"]
    for i in range(n):
        g = rng.integers(0, 8) * 10.0 + (i % 7)
        f = rng.integers(0, 4) + (0.5 if i % 3 == 0 else 0.0) + i * 1e-3
        c1 = rng.choice(["a", "b"])
        c2 = rng.choice(["x", "y", "z"])
        pos = rng.integers(0, 6) / 5.0
        lines.append(f"u{i:03d},{int(i < n_t)},{prog},{mode},{g},{f},{c1},{c2},{pos},0")
    cfg = {
        "treatment_column": "T", "outcome_columns": ["y"], "id_column": "id", "year_column": None,
        "pos_column": "pos", "blocking_columns": ["prog", "mode"],
    }
    table = prepared("\n".join(lines) + "\n", cfg)
    e = rng.choice(np.linspace(0.2, 0.8, 7), size=n)
    return table, SimpleNamespace(scores=e, logits=logit(e))


def toy(x, y, treated, treated_rows, control_rows, control_set, scores=None, extra=None):
    """Matched sample over an explicit table and explicit sets."""
    n = len(x)
    frame = pd.DataFrame({"id": [f"u{i}" for i in range(n)], "T": treated, "x": np.asarray(x, float), "y": np.asarray(y, float)})
    entries = [CovariateSpec("x", Kind.NUMERIC, Role.MATCHING)]
    covs = ["x"]
    for name, vals in (extra or {}).items():
        frame[name] = np.asarray(vals, float)
        entries.append(CovariateSpec(name, Kind.NUMERIC, Role.MATCHING))
        covs.append(name)
    table = CohortTable(frame=frame, id_column="id", treatment_column="T", covariates=covs, outcomes=["y"], schema=CovariateSchema(entries))
    k = len(treated_rows)
    return MatchedSample(
        table=table,
        scores=np.full(n, 0.5) if scores is None else np.asarray(scores, float),
        logits=np.zeros(n),
        treated_rows=np.asarray(treated_rows),
        set_blocks=np.array([""] * k, dtype=object),
        control_rows=np.asarray(control_rows),
        control_set=np.asarray(control_set),
        distances=np.zeros(len(control_rows)),
        logit_gaps=np.zeros(len(control_rows)),
        caliper_width=1.0,
        pos_rescale=(0.0, 1.0),
        spec=MatchSpec(),
        gower_columns=["x"],
    )
