from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import rankdata, wilcoxon

from matchdr.errors import InvalidGamma, NoInformativePairs
from matchdr.sensitivity import paired_differences, rosenbaum_bounds, sensitivity_for_significant, signed_rank_p
from oracles import signed_rank_tail_enumeration

from conftest import toy


def test_paired_differences_examples():
    # pairs (3,1), (2,2), (5,4): the tied pair carries no information
    m = toy([0] * 6, [3, 2, 5, 1, 2, 4], [1, 1, 1, 0, 0, 0], [0, 1, 2], [3, 4, 5], [0, 1, 2])
    d, n = paired_differences(m, "y")
    assert sorted(d.tolist()) == [1.0, 2.0] and n == 2
    # one treated unit with two controls: 5 - mean(2, 4)
    m = toy([0] * 3, [5, 2, 4], [1, 0, 0], [0], [1, 2], [0, 0])
    assert paired_differences(m, "y")[0].tolist() == [2.0]
    m = toy([0] * 4, [1, 2, 1, 2], [1, 1, 0, 0], [0, 1], [2, 3], [0, 1])
    with pytest.raises(NoInformativePairs):
        paired_differences(m, "y")


def test_three_positive_differences_exact_tail():
    hi, lo = rosenbaum_bounds([1.0, 2.0, 3.0], 1.0, method="exact")
    assert hi == lo == 0.125


def _scipy_one_sided(d):
    return wilcoxon(d, alternative="greater", correction=True, method="approx", zero_method="wilcox").pvalue


@pytest.mark.parametrize("seed", range(8))
def test_gamma_one_equals_classical_test(seed):
    rng = np.random.default_rng(seed)
    d = np.round(rng.normal(0.4, 1.0, size=30), 1)  # rounding forces tied magnitudes
    d = d[d != 0]
    hi, lo = rosenbaum_bounds(d, 1.0, method="normal")
    classical = signed_rank_p(d)
    assert abs(hi - classical) < 1e-12 and abs(lo - classical) < 1e-12
    # the two-sided continuity correction in scipy agrees with the
    # one-sided one whenever the statistic sits above its null mean
    t_plus = rankdata(np.abs(d))[d > 0].sum()
    if t_plus > d.size * (d.size + 1) / 4:
        assert abs(classical - _scipy_one_sided(d)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-6, 6).filter(lambda v: v != 0), min_size=1, max_size=25))
def test_bounds_monotone_in_gamma(values):
    d = np.array(values, float)
    prev_hi, prev_lo = rosenbaum_bounds(d, 1.0)
    for g in (1.25, 1.5, 2.0, 2.5, 4.0):
        hi, lo = rosenbaum_bounds(d, g)
        assert hi >= prev_hi - 1e-15 and lo <= prev_lo + 1e-15
        assert lo <= hi
        prev_hi, prev_lo = hi, lo


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=20), st.floats(0.01, 100), st.sampled_from([1.0, 1.5, 3.0]))
def test_scale_invariant_and_sign_flip_swaps_direction(values, c, g):
    d = np.array(values)
    base = rosenbaum_bounds(d, g)
    assert rosenbaum_bounds(c * d, g) == pytest.approx(base, abs=1e-12)
    assert rosenbaum_bounds(-d, g, "less") == pytest.approx(base, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_exact_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = 6 + seed
    d = rng.integers(-4, 8, size=n).astype(float)
    d[d == 0] = 1.0
    for g in (1.0, 1.5, 2.5):
        hi, lo = rosenbaum_bounds(d, g, method="exact")
        assert abs(hi - signed_rank_tail_enumeration(d, g / (1 + g))) < 1e-12
        assert abs(lo - signed_rank_tail_enumeration(d, 1 / (1 + g))) < 1e-12


def test_invalid_gamma():
    for bad in (0.5, float("nan"), float("inf")):
        with pytest.raises(InvalidGamma):
            rosenbaum_bounds([1.0, 2.0], bad)


def _result(outcome, ate, p):
    return SimpleNamespace(outcome=outcome, ate_dr=ate, p_boot=p)


def test_only_significant_outcomes_and_effect_direction():
    y = [1, 4, 0, 6, 5, 3, 9, 2, 5, 8, 7, 7, 5, 2, 3, 1]
    m = toy([0] * 16, y, [1] * 8 + [0] * 8, np.arange(8), np.arange(8, 16), np.arange(8))
    empty = sensitivity_for_significant([_result("y", 1.0, 0.4)], m)
    assert empty.rows.empty and list(empty.rows.columns)[:2] == ["outcome", "gamma"]
    down = toy([0] * 16, np.negative(y), [1] * 8 + [0] * 8, np.arange(8), np.arange(8, 16), np.arange(8))
    up_t = sensitivity_for_significant([_result("y", 1.0, 0.01)], m)
    down_t = sensitivity_for_significant([_result("y", -1.0, 0.01)], down)
    assert set(up_t.rows.direction) == {"greater"} and set(down_t.rows.direction) == {"less"}
    np.testing.assert_allclose(up_t.rows.p_upper, down_t.rows.p_upper, atol=1e-15)
    assert len(up_t.rows) == 5
