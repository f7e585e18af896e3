import json
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from matchdr import synth
from matchdr.cli import main
from matchdr.errors import ConfigError, ConstantVariable, MissingColumn, StageError
from matchdr.pipeline import (
    RESULT_COLUMNS,
    STAGES,
    density_data,
    emit_results_table,
    load_pipeline_config,
    render_report,
    run_pipeline,
)

from conftest import toy


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cohort")
    synth.write_synthetic(synth.DgpSpec(n=600, seed=3, n_outcomes=3, outcome_family="mixed", true_ate=1.5), d, B=49)
    return d


@pytest.fixture(scope="module")
def golden(cohort_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = run_pipeline(load_pipeline_config(cohort_dir / "pipeline.json", output_dir=out))
    return res, out


def test_all_stages_green(golden):
    res, out = golden
    stages = res.manifest["stages"]
    assert [s["name"] for s in stages] == list(STAGES) and len(stages) == 10
    assert all(s["status"] == "ok" for s in stages)
    for f in ("manifest.json", "results.csv", "results.json", "pairs.json", "balance.csv", "sensitivity.csv", "density/index.json"):
        assert (out / f).exists()


def test_manifest_records_every_decision(golden):
    res, _ = golden
    d = res.manifest["decisions"]
    assert d["propensity"]["epsilon"] == 1e-6
    assert d["matching"]["w"] == 0.75 and d["matching"]["m"] == 2
    assert d["matching"]["caliper_width"] == res.matched.caliper_width
    assert d["estimator"]["trim"] == [0.10, 0.90] and d["estimator"]["B"] == 49
    assert d["sensitivity"]["gamma_grid"] == [1.0, 1.25, 1.5, 2.0, 2.5]
    assert d["density"]["bandwidth_rule"] == "silverman"
    c = res.manifest["counts"]
    for key in ("n_trimmed_treated", "n_trimmed_control", "n_unmatched_dropped", "n_matched_sets"):
        assert key in c
    assert res.manifest["seed"] == 3


def test_rerun_is_byte_identical_and_jobs_independent(cohort_dir, golden, tmp_path):
    _, out = golden
    run_pipeline(load_pipeline_config(cohort_dir / "pipeline.json", output_dir=tmp_path / "a", jobs=2))
    for f in ("results.csv", "results.json", "sensitivity.csv", "balance.csv", "pairs.json", "estimates.json", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (out / f).read_bytes(), f


def test_results_json_matches_csv(golden):
    _, out = golden
    csv = pd.read_csv(out / "results.csv")
    doc = json.loads((out / "results.json").read_text())
    assert list(csv.columns) == RESULT_COLUMNS == doc["columns"]
    for row, rec in zip(csv.to_dict("records"), doc["rows"]):
        for c in RESULT_COLUMNS:
            a, b = row[c], rec[c]
            if isinstance(b, float) or isinstance(a, float):
                if b is None:
                    assert pd.isna(a)
                else:
                    assert float(f"{a:.12g}") == float(f"{b:.12g}")
            else:
                assert str(a) == str(b) or (pd.isna(a) and b is None)


def _result(**kw):
    base = dict(domain="Cumulative", outcome="Cumulative mean grade", ate_dr=8.82, ci_low=2.74, ci_high=13.97,
                p_boot=0.008, delta_post=9.1, ancova=8.5, family="gaussian", n_pairs=412)
    return SimpleNamespace(**{**base, **kw})


def test_effect_row_format(tmp_path):
    emit_results_table([_result()], SimpleNamespace(max_gamma={"Cumulative mean grade": 1.5}), tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"stages": [], "counts": {}}))
    text = render_report(tmp_path)
    assert "| Cumulative | Cumulative mean grade | 8.82 | [2.74, 13.97] | 0.008 |" in text
    row = pd.read_csv(tmp_path / "results.csv").iloc[0]
    assert (row.ate_dr, row.ci_low, row.ci_high, row.p_boot, row.max_gamma_significant) == (8.82, 2.74, 13.97, 0.008, 1.5)


def test_empty_results_give_header_only_csv(tmp_path):
    emit_results_table([], None, tmp_path)
    assert (tmp_path / "results.csv").read_text().strip() == ",".join(RESULT_COLUMNS)


def test_density_identical_samples_agree():
    rng = np.random.default_rng(0)
    x = np.round(rng.normal(size=200), 3)
    xs = np.concatenate([x, x])
    m = toy(xs, np.zeros(400), [1] * 200 + [0] * 200, np.arange(200), np.arange(200, 400), np.arange(200))
    f = density_data(m, ["x"])["x"]["frame"]
    assert np.max(np.abs(f.density_treated - f.density_control)) < 0.05


def test_density_constant_variable_spike():
    m = toy([2.0] * 4, [0] * 4, [1, 1, 0, 0], [0, 1], [2, 3], [0, 1])
    with pytest.warns(ConstantVariable):
        d = density_data(m, ["x"])["x"]
    assert d["spike"] and len(d["frame"]) == 1


def test_density_categorical_proportions(small_synth):
    _, _, m = small_synth
    f = density_data(m, ["gender"])["gender"]["frame"]
    assert f.proportion_treated.sum() == pytest.approx(1.0, abs=1e-12)
    assert f.proportion_control.sum() == pytest.approx(1.0, abs=1e-12)


def _broken_config(cohort_dir, tmp_path, **schema_changes):
    schema = json.loads((cohort_dir / "schema.json").read_text())
    schema.update(schema_changes)
    (tmp_path / "schema.json").write_text(json.dumps(schema))
    cfg = {"seed": 1, "output_dir": str(tmp_path / "out"), "inputs": {"cohort": str(cohort_dir / "cohort.csv"), "schema": "schema.json"}}
    (tmp_path / "pipeline.json").write_text(json.dumps(cfg))
    return tmp_path / "pipeline.json"


def test_missing_treatment_column_aborts_at_load(cohort_dir, tmp_path, capsys):
    path = _broken_config(cohort_dir, tmp_path, treatment_column="no_such_column")
    with pytest.raises(StageError) as exc:
        run_pipeline(load_pipeline_config(path))
    assert exc.value.stage == "load" and isinstance(exc.value.error, MissingColumn)
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["stages"][-1] == {"name": "load", "status": "failed", "error": "MissingColumn", "message": str(exc.value.error)}
    assert main(["pipeline", "--config", str(path)]) == 3
    assert "load" in capsys.readouterr().err


def test_config_errors_exit_two(cohort_dir, tmp_path):
    cfg = {"output_dir": "out", "inputs": {"cohort": str(cohort_dir / "cohort.csv"), "schema": str(cohort_dir / "schema.json")}}
    (tmp_path / "noseed.json").write_text(json.dumps(cfg))
    with pytest.raises(ConfigError):
        load_pipeline_config(tmp_path / "noseed.json")
    assert main(["pipeline", "--config", str(tmp_path / "noseed.json")]) == 2
    (tmp_path / "extra.json").write_text(json.dumps({**cfg, "seed": 1, "estimator": {"bogus": 1}}))
    assert main(["validate", "--config", str(tmp_path / "extra.json")]) == 2
    (tmp_path / "gone.json").write_text(json.dumps({**cfg, "seed": 1, "inputs": {"cohort": "missing.csv", "schema": "x.json"}}))
    assert main(["validate", "--config", str(tmp_path / "gone.json")]) == 2


def test_cli_generate_daily_then_pipeline(tmp_path, monkeypatch, capsys):
    (tmp_path / "dgp.json").write_text(json.dumps({"n": 300, "n_outcomes": 1}))
    assert main(["generate", "--config", str(tmp_path / "dgp.json"), "--seed", "5", "--daily", "--out", str(tmp_path / "data")]) == 0
    assert (tmp_path / "data" / "pos_daily.csv").exists()
    cfg = json.loads((tmp_path / "data" / "pipeline.json").read_text())
    cfg["estimator"]["B"] = 19
    (tmp_path / "data" / "pipeline.json").write_text(json.dumps(cfg))
    monkeypatch.setenv("MATCHDR_OUTPUT_DIR", str(tmp_path / "env_out"))
    capsys.readouterr()
    assert main(["validate", "--config", str(tmp_path / "data" / "pipeline.json")]) == 0
    assert json.loads(capsys.readouterr().out)["n_rows"] == 300
    assert main(["pipeline", "--config", str(tmp_path / "data" / "pipeline.json"), "--out", str(tmp_path / "run")]) == 0
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    align = next(s for s in manifest["stages"] if s["name"] == "align")
    assert align["mode"] == "daily"
    assert (tmp_path / "run" / "report.md").exists()
    assert main(["report", "--out", str(tmp_path / "run")]) == 0


def test_cli_stage_subcommand_stops_early_and_env_output(cohort_dir, tmp_path, monkeypatch):
    cfg = json.loads((cohort_dir / "pipeline.json").read_text())
    del cfg["output_dir"]
    cfg["inputs"] = {k: str(cohort_dir / v) for k, v in cfg["inputs"].items()}
    (tmp_path / "p.json").write_text(json.dumps(cfg))
    monkeypatch.setenv("MATCHDR_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert main(["match", "--config", str(tmp_path / "p.json")]) == 0
    manifest = json.loads((tmp_path / "env_out" / "manifest.json").read_text())
    assert [s["name"] for s in manifest["stages"]] == list(STAGES[: STAGES.index("match") + 1])
