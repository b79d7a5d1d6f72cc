import json

import pandas as pd
import pytest

from marketshare.cli import main
from marketshare.errors import ConfigInvalid, IngestError, StageError
from marketshare.pipeline import BUNDLE_FILES, PipelineConfig, run_pipeline

FAST = {"synthetic": {"n_facilities": 10, "n_clusters": 2, "n_service_lines": 2,
                      "tuples_per_cell": 3},
        "tune_iter": 1, "cv_folds": 3, "top_k": 5, "permutation_repeats": 1,
        "space": {"rf": {"n_trees": {"log": [5, 8]}, "max_depth": [4],
                         "min_samples_leaf": {"range": [2, 4]}},
                  "gbm": {"n_trees": {"log": [5, 10]}, "max_depth": [2]}}}


@pytest.fixture(scope="module")
def fast_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_pipeline(PipelineConfig.from_dict(FAST, seed=3, output_dir=out))


def test_bundle_complete(fast_run):
    assert sorted(fast_run.files) == sorted(BUNDLE_FILES)
    m = json.loads((fast_run.out_dir / "manifest.json").read_text())
    order = ["ingest", "competitors", "targets", "train", "explain", "report"]
    assert m["stages"] == order
    assert set(m["stage_seconds"]) == set(order[:-1])
    assert list(fast_run.manifest["stage_seconds"]) == order
    assert m["seed"] == 3 and len(m["config_hash"]) == 64
    assert not (fast_run.out_dir / ".staging").exists()


def test_report_schemas(fast_run):
    d = fast_run.out_dir
    metrics = json.loads((d / "metrics.json").read_text())
    assert {(r["model"], r["split"]) for r in metrics} == {
        (m, s) for m in ("LR", "RF", "GBM") for s in ("train", "test")}
    cv = json.loads((d / "cv_metrics.json").read_text())
    assert all(len(v) == 4 and v[-1]["fold"] == "mean" for v in cv.values())
    comps = json.loads((d / "competitors.json").read_text())
    assert set(comps[0]) == {"service_line", "facility", "month", "competitors"}
    shap = json.loads((d / "shap_report.json").read_text())
    assert all(len(e["features"]) == 5 for e in shap["reports"])
    assert (d / "importance.csv").read_text().startswith("rank,model,feature,score\n")


def test_targets_partition_components(fast_run):
    d = fast_run.out_dir
    feats = pd.read_csv(d / "features.csv", dtype={"facility_id": str})
    comps = json.loads((d / "components.json").read_text())["OVERALL"]
    comp_of = {f: i for i, c in enumerate(comps) for f in c}
    feats["comp"] = feats["facility_id"].map(comp_of)
    sums = feats.groupby(["comp", "year", "month"])["target_market_share"].sum()
    assert (sums - 100).abs().max() <= 1e-9


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        PipelineConfig.from_dict({"synthetic": {}})
    with pytest.raises(ConfigInvalid):
        PipelineConfig.from_dict({"seed": 1})
    with pytest.raises(ConfigInvalid):
        PipelineConfig.from_dict({"seed": 1, "synthetic": {},
                                  "inputs": {"encounters": "a", "facilities": "b"}})
    with pytest.raises(ConfigInvalid):
        PipelineConfig.from_dict({"seed": 1, "synthetic": {}, "bogus": 1})
    with pytest.raises(ConfigInvalid):
        PipelineConfig.from_dict({"seed": 1, "synthetic": {}, "thresholds": {"rho_hi": -1}})


def test_config_hash_tracks_content():
    a = PipelineConfig.from_dict(FAST, seed=1, output_dir="x")
    b = PipelineConfig.from_dict(FAST, seed=1, output_dir="y")
    c = PipelineConfig.from_dict(FAST, seed=2, output_dir="x")
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_missing_input_cleans_up(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "metrics.json").write_text("stale")
    cfg = PipelineConfig.from_dict({"seed": 0, "inputs": {
        "encounters": str(tmp_path / "missing.csv"), "facilities": str(tmp_path / "f.csv")}},
        output_dir=out)
    with pytest.raises(StageError) as exc:
        run_pipeline(cfg)
    assert exc.value.stage == "ingest" and isinstance(exc.value.cause, IngestError)
    assert list(out.iterdir()) == []


def test_cli_missing_input_nonzero(tmp_path, capsys):
    code = main(["competitors", "--encounters", str(tmp_path / "x.csv"),
                 "--facilities", str(tmp_path / "y.csv"), "--out", str(tmp_path / "o")])
    assert code != 0
    assert "IngestError" in capsys.readouterr().err


def test_cli_subcommands(tmp_path, capsys):
    data, comp, tr, ex = (tmp_path / n for n in ("data", "comp", "tr", "ex"))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synthetic": FAST["synthetic"]}))
    assert main(["synth", "--config", str(cfg), "--seed", "2", "--out", str(data)]) == 0
    assert main(["competitors", "--encounters", str(data / "encounters.csv"),
                 "--facilities", str(data / "facilities.csv"),
                 "--ground-truth", str(data / "ground_truth_clusters.json"),
                 "--out", str(comp)]) == 0
    assert "adjusted Rand index" in capsys.readouterr().out
    assert main(["train", "--data", str(comp / "features.csv"), "--algo", "gbm", "--cv", "3",
                 "--out", str(tr)]) == 0
    assert main(["explain", "--model", str(tr / "model_gbm.json"),
                 "--data", str(comp / "features.csv"), "--top-k", "3", "--out", str(ex)]) == 0
    capsys.readouterr()
    assert main(["report", "--run", str(tr)]) == 0
    out = capsys.readouterr().out
    assert "GBM\ttest" in out and "mean" in out
    sheet = tmp_path / "sheet.csv"
    sheet.write_text("component_id,annotator_1,annotator_2\n1,4,3\n")
    assert main(["agreement", "--sheet", str(sheet), "--out", str(tmp_path / "ag")]) == 0
    assert json.loads((tmp_path / "ag" / "agreement.json").read_text())["overall"] == 3.5
    # linear models have no tree structure to explain
    assert main(["train", "--data", str(comp / "features.csv"), "--algo", "lr", "--cv", "0",
                 "--out", str(tr)]) == 0
    assert main(["explain", "--model", str(tr / "model_lr.json"),
                 "--data", str(comp / "features.csv"), "--out", str(ex)]) == 2
