import warnings

import numpy as np
import pandas as pd
import pytest
from scipy.stats import mannwhitneyu

from matchdr import synth
from matchdr.cohort import align_pretreatment, classify_covariates, load_cohort, load_schema_config
from matchdr.errors import InvalidSpec


def test_same_seed_same_cohort():
    spec = synth.DgpSpec(n=300, seed=4, n_outcomes=3, outcome_family="mixed", ghost_fraction=0.2)
    a, ta = synth.generate(spec)
    b, tb = synth.generate(spec)
    pd.testing.assert_frame_equal(a.frame, b.frame)
    assert ta.to_json() == tb.to_json()
    c, _ = synth.generate(synth.DgpSpec(n=300, seed=5, n_outcomes=3, outcome_family="mixed"))
    assert not a.frame.equals(c.frame)


@pytest.mark.parametrize("family", ["gaussian", "poisson"])
def test_null_effect_has_identical_potential_outcomes(family):
    _, truth = synth.generate(synth.DgpSpec(n=500, seed=1, true_ate=0.0, outcome_family=family))
    for name in truth.y0:
        np.testing.assert_array_equal(truth.y1[name], truth.y0[name])
        assert truth.true_ate[name] == 0.0


def test_gaussian_potential_outcome_gap():
    _, truth = synth.generate(synth.DgpSpec(n=5000, seed=2, true_ate=2.0))
    name = next(iter(truth.y0))
    assert abs(np.mean(truth.y1[name] - truth.y0[name]) - 2.0) < 0.1


def test_poisson_rate_effect_is_multiplicative():
    _, truth = synth.generate(synth.DgpSpec(n=2000, seed=3, true_ate=1.0, outcome_family="poisson"))
    name = next(iter(truth.mu0))
    ratio = truth.mu1[name] / truth.mu0[name]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)
    assert np.mean(truth.mu1[name] - truth.mu0[name]) == pytest.approx(1.0, rel=1e-9)


def test_ghosted_controls_have_lower_pos():
    table, truth = synth.generate(synth.DgpSpec(n=2000, seed=6, ghost_fraction=0.3))
    pos = table.frame["pos_aligned"].to_numpy(float)
    control = table.treated == 0
    ghosted, active = pos[control & truth.ghost], pos[control & ~truth.ghost]
    assert truth.ghost[table.treated == 1].sum() == 0
    assert mannwhitneyu(ghosted, active, alternative="less").pvalue < 0.01


@pytest.mark.parametrize("target", [0.1, 0.3, 0.5])
def test_treated_fraction_near_target(target):
    table, _ = synth.generate(synth.DgpSpec(n=1000, seed=7, treated_fraction=target, confounding_strength=2.0))
    assert abs(table.treated.mean() - target) <= 0.05


def test_invalid_specs():
    for bad in ({"n": 5}, {"overlap": 0.0}, {"overlap": 1.5}, {"ghost_fraction": 1.0}, {"treated_fraction": 1.0},
                {"outcome_family": "binomial"}, {"propensity_form": "cubic"}, {"blocks": 0}):
        with pytest.raises(InvalidSpec):
            synth.DgpSpec(**bad).validate()
    with pytest.raises(InvalidSpec):
        synth.DgpSpec.from_dict({"n": 100, "colour": "red"})


def test_naive_difference_unbiased_without_confounding():
    table, truth = synth.generate(synth.DgpSpec(n=5000, seed=8, true_ate=2.0, confounding_strength=0.0))
    o = synth.naive_oracle(table, truth)
    y = table.frame[table.outcomes[0]].to_numpy(float)
    t = table.treated == 1
    se = np.sqrt(y[t].var(ddof=1) / t.sum() + y[~t].var(ddof=1) / (~t).sum())
    assert abs(o["naive_diff"] - o["true_ate"]) < 3 * se


def test_naive_difference_biased_under_strong_confounding():
    table, truth = synth.generate(synth.DgpSpec(n=5000, seed=9, true_ate=2.0, confounding_strength=2.0))
    assert abs(synth.naive_oracle(table, truth)["naive_diff"] - 2.0) > 0.5


def test_oracle_dr_with_true_nuisances_is_unbiased():
    # inverse-propensity terms are heavy-tailed, so the mean needs many draws
    errors = []
    for seed in range(100):
        table, truth = synth.generate(synth.DgpSpec(n=5000, seed=100 + seed, true_ate=2.0))
        o = synth.naive_oracle(table, truth)
        errors.append(o["oracle_dr"] - 2.0)
    assert abs(np.mean(errors)) < 0.05


def test_written_cohort_loads_classifies_and_aligns(tmp_path):
    spec = synth.DgpSpec(n=400, seed=10, n_outcomes=2, outcome_family="mixed", missing_rate=0.05)
    synth.write_synthetic(spec, tmp_path, with_daily=True)
    cfg = load_schema_config(tmp_path / "schema.json")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        table = load_cohort((tmp_path / "cohort.csv").read_text(), cfg)
        classify_covariates(table)
        dates = pd.read_csv(tmp_path / "intervention_dates.csv")
        daily = pd.read_csv(tmp_path / "pos_daily.csv", parse_dates=["date"])
        aligned = align_pretreatment(table, dict(zip(dates.student_id, pd.to_datetime(dates.date))), daily)
    # the daily series was built so the alignment month averages to the
    # cohort's own score, with leakage rows that must be ignored
    want = synth.generate(spec)[0].frame["pos_aligned"].to_numpy(float)
    np.testing.assert_allclose(aligned.frame[aligned.pos_column].to_numpy(float), want, atol=1e-12)
