import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchdr.balance import balance_report, smd_categorical, smd_numeric
from matchdr.errors import DegenerateVariance
from matchdr.matching import MatchSpec

from conftest import matched_from, prepared


def test_numeric_examples():
    # means 1 and 0, both sample variances 1
    h = math.sqrt(0.5)
    assert smd_numeric([1 - h, 1 + h], [-h, h]) == pytest.approx(1.0, abs=1e-15)
    x = [1.0, 4.0, 2.0, 8.0]
    assert smd_numeric(x, x) == 0.0
    assert smd_numeric([3.0, 3.0], [3.0, 3.0]) == 0.0
    with pytest.warns(DegenerateVariance):
        assert smd_numeric([3.0, 3.0], [2.0, 2.0]) == math.inf


def test_numeric_hand_fixture():
    t = [61.0, 72.5, 58.0, 80.0, 66.0, 70.5, 55.0, 63.0, 77.0, 69.0]
    c = [52.0, 60.5, 49.0, 71.0, 58.0, 62.0, 45.5, 66.0, 59.0, 54.0]
    mt, mc = sum(t) / 10, sum(c) / 10
    vt = sum((v - mt) ** 2 for v in t) / 9
    vc = sum((v - mc) ** 2 for v in c) / 9
    assert abs(smd_numeric(t, c) - (mt - mc) / math.sqrt((vt + vc) / 2)) < 1e-12


def test_categorical_examples():
    t = ["a"] * 3 + ["b"] * 7
    c = ["a"] * 2 + ["b"] * 8
    assert smd_categorical(t, c, "a") == pytest.approx(0.1 / math.sqrt(0.1875), abs=1e-12)
    assert smd_categorical(t, t, "a") == 0.0
    assert smd_categorical(["a", "a"], ["a", "a"], "a") == 0.0


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=2, max_size=20), st.lists(finite, min_size=2, max_size=20),
       st.floats(0.1, 10), st.floats(-50, 50), st.booleans())
def test_numeric_antisymmetric_and_affine_invariant(t, c, a, b, flip):
    if np.var(t) + np.var(c) < 1e-6:
        return
    s = smd_numeric(t, c)
    assert smd_numeric(c, t) == pytest.approx(-s, rel=1e-9, abs=1e-12)
    a = -a if flip else a
    s2 = smd_numeric(np.array(t) * a + b, np.array(c) * a + b)
    assert abs(s2) == pytest.approx(abs(s), rel=1e-6, abs=1e-9)


CFG = {
    "treatment_column": "T", "outcome_columns": ["y"], "id_column": "id", "year_column": None,
    "pos_column": "pos", "blocking_columns": ["prog"],
}


def _cohort(rng, n=120, shift=1.0):
    lines = ["id,T,prog,g,c,pos,y"]
    for i in range(n):
        t = int(rng.random() < 0.4)
        g = rng.normal(shift * t, 1.0)
        c = rng.choice(["p", "q", "r"], p=[0.5, 0.3, 0.2] if t else [0.3, 0.3, 0.4])
        pos = rng.uniform(0.2, 0.8) + 0.05 * t
        lines.append(f"u{i:03d},{t},A,{g:.6f},{c},{pos:.6f},0")
    return prepared("\n".join(lines) + "\n", CFG)


def test_after_smd_counts_each_control_appearance():
    rng = np.random.default_rng(3)
    table = _cohort(rng)
    m = matched_from(table, MatchSpec(caliper_multiplier=1.0))
    rep = balance_report(m.table, m)
    f = m.table.frame
    t_vals = f["g"].to_numpy()[m.treated_rows]
    c_vals = f["g"].to_numpy()[m.control_rows]  # one entry per appearance
    assert len(set(m.control_rows.tolist())) < len(m.control_rows)  # reuse happened
    want = (t_vals.mean() - c_vals.mean()) / math.sqrt((t_vals.var(ddof=1) + c_vals.var(ddof=1)) / 2)
    row = rep.per_level.query("covariate == 'g'").iloc[0]
    assert abs(row.smd_after - want) < 1e-12
    lv = rep.per_level.query("covariate == 'c'")
    assert set(lv.level) == {"p", "q", "r"}
    assert rep.per_covariate_max["c"]["after"] == lv.smd_after.abs().max()
    assert set(rep.per_covariate_max) == {"g", "c", "prog", "pos"}


def test_matching_reduces_confounder_imbalance():
    rng = np.random.default_rng(8)
    table = _cohort(rng, n=400, shift=1.0)
    m = matched_from(table)
    rep = balance_report(m.table, m)
    assert rep.per_covariate_max["g"]["after"] < rep.per_covariate_max["g"]["before"]


def test_single_covariate_identical_arms():
    lines = ["id,T,prog,g,pos,y"] + [f"u{i},{i % 2},A,{i // 2},0.5,0" for i in range(24)]
    cfg = dict(CFG, pos_column=None)
    table = prepared("\n".join(lines) + "\n", cfg)
    from types import SimpleNamespace

    from matchdr.matching import match

    m = match(table, SimpleNamespace(scores=np.full(24, 0.5), logits=np.linspace(0, 1e-9, 24)))
    rep = balance_report(table, m, covariates=["g"])
    assert len(rep.per_level) == 1
    assert rep.per_level.smd_before.iloc[0] == 0.0


def test_max_invariant_to_level_labels():
    rng = np.random.default_rng(4)
    table = _cohort(rng)
    m = matched_from(table)
    rep = balance_report(m.table, m)
    relabeled = m.table.frame.copy()
    relabeled["c"] = relabeled["c"].map({"p": "zz", "q": "aa", "r": "mm"})
    t2 = m.table.with_frame(relabeled)
    from dataclasses import replace

    rep2 = balance_report(t2, replace(m, table=t2))
    assert rep2.per_covariate_max["c"] == rep.per_covariate_max["c"]
