import filecmp
import json

import pytest

from marketshare.errors import ConfigInvalid
from marketshare.synthetic import SyntheticConfig, generate_synthetic, make_nonlinear_panel


def test_same_seed_byte_identical(tmp_path):
    cfg = SyntheticConfig(n_facilities=10, n_clusters=2, n_service_lines=2, seed=11)
    generate_synthetic(cfg).write(tmp_path / "a")
    generate_synthetic(cfg).write(tmp_path / "b")
    for name in ("encounters.csv", "facilities.csv", "ground_truth_clusters.json"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)


def test_clusters_partition_facilities(default_data):
    truth = default_data.ground_truth
    ids = [p.facility_id for p in default_data.profiles]
    assert sorted(truth) == sorted(ids) and len(ids) == 30
    assert set(truth.values()) == set(range(5))


def test_shapes(default_data):
    df = default_data.facts
    assert df["facility_id"].nunique() == 30
    assert len(default_data.months) == 27
    assert (df["count"] >= 0).all()
    assert df.duplicated(["facility_id", "year", "month", "service_line", "base_class",
                          "payor_group", "age_bucket", "zip_code", "physician_id",
                          "drg_code"]).sum() == 0


def test_same_system_only_across_clusters(default_data):
    truth = default_data.ground_truth
    by_sys = {}
    for p in default_data.profiles:
        by_sys.setdefault(p.system_id, []).append(truth[p.facility_id])
    for clusters in by_sys.values():
        assert len(set(clusters)) == len(clusters)


@pytest.mark.parametrize("kw", [{"n_clusters": 0}, {"n_facilities": 5, "n_clusters": 5},
                                {"n_months": 20}, {"noise_scale": -1.0}])
def test_invalid_config(kw):
    with pytest.raises(ConfigInvalid):
        generate_synthetic(SyntheticConfig(**kw))


def test_from_dict_rejects_unknown():
    with pytest.raises(ConfigInvalid):
        SyntheticConfig.from_dict({"n_facilitiez": 3})


def test_nonlinear_panel_targets_in_range():
    rows = make_nonlinear_panel(3)
    assert len(rows) == 20 * 27
    assert all(5.0 <= r.target_market_share <= 95.0 for r in rows)


def test_sidecar_json(tmp_path, small_data):
    small_data.write(tmp_path)
    assert json.loads((tmp_path / "ground_truth_clusters.json").read_text()) == \
        small_data.ground_truth
