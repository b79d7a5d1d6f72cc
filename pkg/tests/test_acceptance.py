"""Acceptance gate: one test per primary criterion.

Every test records a PASS/FAIL line (printed in the terminal summary by
conftest.py) before asserting, so the verdicts appear even when pytest
captures output.
"""
import csv
import filecmp
import itertools
import json
import time

import numpy as np
import pandas as pd
import pytest

from marketshare.agreement import AnnotationSheet, annotation_agreement
from marketshare.competitors import (OVERALL, Thresholds, adjusted_rand_index, build_graph,
                                     connected_components, correlation_edges, distance_matrix,
                                     partial_correlation)
from marketshare.evaluation import (DEFAULT_SPACE, fit_model, kfold_cv, load_model, mape,
                                    predict, random_search, time_split, to_matrix)
from marketshare.explain import brute_force_shapley, permutation_importance, tree_shap
from marketshare.features import compute_market_share, read_feature_table, scope_series
from marketshare.pipeline import PipelineConfig, run_pipeline
from marketshare.synthetic import SyntheticConfig, generate_synthetic, make_nonlinear_panel
from marketshare.trees import ForestModel, HyperParams, fit_forest, fit_tree

from oracles import exhaustive_root_split, residual_partial_corr

RESULTS = []
# every prediction produced in this module, for the capping audit
PREDICTIONS = []


def check(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- shared fixtures ------------------------------------------------------------

@pytest.fixture(scope="module")
def recovery_runs():
    """Generate 10 default-size datasets and recover OVERALL components (timed)."""
    t0 = time.perf_counter()
    runs = []
    for seed in range(10):
        data = generate_synthetic(SyntheticConfig(seed=seed))
        series = scope_series(data.facts, data.months[:24])
        dist = distance_matrix(data.profiles)
        edges = correlation_edges(series[OVERALL], data.profiles, Thresholds(), OVERALL, dist=dist)
        g = build_graph(edges, OVERALL, series[OVERALL])
        comps = connected_components(g)
        idx = {f: i for i, c in enumerate(comps) for f in c}
        ids = sorted(data.ground_truth)
        ari = adjusted_rand_index([data.ground_truth[f] for f in ids], [idx[f] for f in ids])
        runs.append({"seed": seed, "data": data, "series": series, "dist": dist,
                     "edges": {OVERALL: edges}, "components": comps, "ari": ari})
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    """Two full default-config pipeline runs with the same seed (first one timed)."""
    out = []
    for tag in ("a", "b"):
        cfg = PipelineConfig.from_dict({"synthetic": {}}, seed=0,
                                       output_dir=tmp_path_factory.mktemp(f"pipe_{tag}"))
        t0 = time.perf_counter()
        res = run_pipeline(cfg)
        out.append((res, time.perf_counter() - t0))
    return out


# -- criteria ----------------------------------------------------------------------

def test_partial_correlation_oracle_equivalence():
    rng = np.random.default_rng(20240501)
    t0 = time.perf_counter()
    worst, worst_empty = 0.0, 0.0
    for _ in range(200):
        k = int(rng.integers(0, 4))
        mix = rng.normal(size=(k + 2, k + 2))
        data = mix @ rng.normal(size=(k + 2, 24))
        x, y, Z = data[0], data[1], list(data[2:])
        worst = max(worst, abs(partial_correlation(x, y, Z) - residual_partial_corr(x, y, Z)))
        worst_empty = max(worst_empty,
                          abs(partial_correlation(x, y) - np.corrcoef(x, y)[0, 1]))
    elapsed = time.perf_counter() - t0
    check("partial-correlation oracle",
          worst <= 1e-10 and worst_empty <= 1e-12 and elapsed < 5,
          f"max |diff| {worst:.2e} (tol 1e-10), empty-Z vs Pearson {worst_empty:.2e} "
          f"(tol 1e-12), {elapsed:.2f}s (< 5s)")


def test_component_recovery(recovery_runs):
    runs, elapsed = recovery_runs
    aris = [r["ari"] for r in runs]
    good = sum(a >= 0.9 for a in aris)
    check("component recovery", good >= 8 and elapsed < 30,
          f"ARI >= 0.9 on {good}/10 seeds (need 8), min ARI {min(aris):.3f}, "
          f"{elapsed:.1f}s (< 30s)")


def test_edge_rule_audit(recovery_runs, pipeline_runs):
    runs, _ = recovery_runs
    n_edges, violations = 0, 0
    for r in runs:
        prof = {p.facility_id: p for p in r["data"].profiles}
        for scope, by_fac in r["series"].items():
            edges = r["edges"].get(scope) or correlation_edges(
                by_fac, r["data"].profiles, Thresholds(), scope, dist=r["dist"])
            for e in edges:
                n_edges += 1
                bad = (not (e.rho > 0.8 or e.rho < -0.7) or e.distance_km > 100
                       or prof[e.a].system_id == prof[e.b].system_id)
                violations += bad
    # the published edge list of a full pipeline run as well
    res, _ = pipeline_runs[0]
    data = generate_synthetic(SyntheticConfig(seed=0))
    prof = {p.facility_id: p for p in data.profiles}
    with open(res.out_dir / "graph_edges.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            n_edges += 1
            rho, km = float(rec["rho"]), float(rec["distance_km"])
            violations += (not (rho > 0.8 or rho < -0.7) or km > 100
                           or prof[rec["node_a"]].system_id == prof[rec["node_b"]].system_id)
    check("edge-rule audit", violations == 0 and n_edges > 0,
          f"{violations} violations over {n_edges} edges (10 seeds x 10 scopes + pipeline)")


def test_cart_root_split_oracle():
    rng = np.random.default_rng(7)
    mismatches = 0
    for i in range(100):
        n, d = int(rng.integers(2, 201)), int(rng.integers(1, 11))
        if i % 3 == 0:
            X = rng.integers(0, 5, size=(n, d)).astype(float)
        else:
            X = np.round(rng.normal(size=(n, d)), 2)
        y = np.round(rng.normal(size=n) + X[:, 0], 3)
        msl = int(rng.integers(1, 5))
        tree = fit_tree(X, y, HyperParams(min_samples_leaf=msl, max_features_fraction=1.0,
                                          max_depth=1), seed=i)
        ref = exhaustive_root_split(X, y, msl)
        if ref is None:
            mismatches += tree.n_nodes != 1
        else:
            mismatches += not (tree.n_nodes == 3 and tree.feature[0] == ref[1]
                               and tree.threshold[0] == ref[2])
    check("CART root split vs exhaustive enumeration", mismatches == 0,
          f"{mismatches}/100 mismatches (exact feature and threshold)")


def test_regression_sanity():
    wins, shapes_ok, detail = 0, True, []
    for seed in range(10):
        rows = make_nonlinear_panel(seed)
        train, test = time_split(rows, 24, 3)
        inner, valid = time_split(train, 21, 3)
        X_tr, y_tr, names = to_matrix(train)
        X_te, y_te, _ = to_matrix(test, names)
        params, _ = random_search(DEFAULT_SPACE["rf"], 4, "rf", inner, valid, seed)
        rf = fit_model("rf", X_tr, y_tr, params, seed, names)
        lr = fit_model("lr", X_tr, y_tr, HyperParams(), seed, names)
        p_rf, p_lr = predict(rf, X_te), predict(lr, X_te)
        PREDICTIONS.extend([p_rf, p_lr, predict(rf, X_tr), predict(lr, X_tr)])
        m_rf, m_lr = mape(y_te, p_rf), mape(y_te, p_lr)
        wins += m_rf < m_lr
        detail.append(f"{m_rf:.1f}/{m_lr:.1f}")
        if seed == 0:
            gbm_params = HyperParams(n_trees=60, max_depth=3, learning_rate=0.1)
            for algo, p in (("lr", HyperParams()), ("rf", params), ("gbm", gbm_params)):
                cv = kfold_cv(train, 5, algo, p, seed, names)
                shapes_ok &= (len(cv) == 6 and [r["fold"] for r in cv] == [1, 2, 3, 4, 5, "mean"]
                              and all(np.isfinite([r["rmse"], r["mape"]]).all() for r in cv))
    check("regression sanity (tuned RF beats LR; CV layout)", wins >= 9 and shapes_ok,
          f"RF < LR test MAPE on {wins}/10 seeds (need 9) [RF/LR: {' '.join(detail)}]; "
          f"CV report 5 folds + mean for LR/RF/GBM: {shapes_ok}")


def test_capping(pipeline_runs):
    # extreme targets force raw outputs far outside the cap
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 3))
    y = np.where(X[:, 0] > 0, 150.0, -40.0) + X[:, 1]
    for algo in ("lr", "rf", "gbm"):
        m = fit_model(algo, X, y, HyperParams(n_trees=10), 0)
        PREDICTIONS.append(predict(m, X))
    res, _ = pipeline_runs[0]
    for algo in ("lr", "rf", "gbm"):
        model = load_model(res.out_dir / f"model_{algo}.json")
        Xp, _, _ = to_matrix(read_feature_table(res.out_dir / "features.csv"), model.feature_names)
        PREDICTIONS.append(predict(model, Xp))
    allp = np.concatenate(PREDICTIONS)
    outside = int(np.sum((allp < 2) | (allp > 99)))
    check("capping to [2, 99]", outside == 0 and len(allp) > 0,
          f"{outside} of {len(allp)} predictions outside [2, 99]")


def _factorial(rng, d):
    levels = 2 if d >= 5 else 3
    vals = [np.sort(rng.choice(np.arange(-5.0, 6.0), size=levels, replace=False))
            for _ in range(d)]
    return np.array(list(itertools.product(*vals)), dtype=float)


def test_tree_shap_vs_brute_force():
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst_phi, worst_acc, rows_checked = 0.0, 0.0, 0
    for i in range(50):
        d = int(rng.integers(1, 9))
        X = _factorial(rng, d)
        w = rng.normal(size=d)
        y = X @ w + 2.0 * np.sin(X[:, 0]) * (X[:, -1] > 0) + rng.normal(scale=0.1, size=len(X))
        params = HyperParams(n_trees=int(rng.integers(1, 6)), max_depth=int(rng.integers(1, 4)),
                             bootstrap=False, max_features_fraction=float(rng.uniform(0.5, 1.0)))
        model = fit_forest(X, y, params, seed=i)
        s = tree_shap(model, X)
        worst_acc = max(worst_acc, float(np.max(np.abs(
            s.base_value + s.values.sum(axis=1) - model.raw_predict(X)))))
        pick = np.arange(len(X)) if len(X) <= 32 else rng.choice(len(X), 24, replace=False)
        for r in pick:
            phi, base = brute_force_shapley(model, X[r], X)
            worst_phi = max(worst_phi, float(np.max(np.abs(s.values[r] - phi))),
                            abs(s.base_value - base))
            rows_checked += 1
    elapsed = time.perf_counter() - t0
    check("Tree SHAP vs brute force",
          worst_phi <= 1e-9 and worst_acc <= 1e-6 and elapsed < 60,
          f"max |phi_tree - phi_brute| {worst_phi:.1e} over {rows_checked} rows (tol 1e-9), "
          f"max local-accuracy error {worst_acc:.1e} (tol 1e-6), {elapsed:.1f}s (< 60s)")


def test_dummy_feature():
    rows = make_nonlinear_panel(4)
    X, y, names = to_matrix(rows)
    rng = np.random.default_rng(0)
    worst_perm, worst_phi = 0.0, 0.0
    for algo in ("rf", "gbm"):
        m = fit_model(algo, X, y, HyperParams(n_trees=25, max_depth=6), 0, names)
        # inject a random column the trees were never given
        wide = ForestModel(trees=m.trees, feature_names=names + ["dummy"], params=m.params,
                           seed=m.seed, kind=m.kind, base_value=m.base_value)
        Xw = np.column_stack([X, rng.normal(size=len(X))])
        used = {int(j) for t in wide.trees for j in t.feature[t.feature >= 0]}
        assert len(names) not in used
        perm = permutation_importance(wide, Xw, y, repeats=5, seed=1)
        phi = tree_shap(wide, Xw).values[:, -1]
        worst_perm = max(worst_perm, abs(perm["dummy"]))
        worst_phi = max(worst_phi, float(np.max(np.abs(phi))))
    check("dummy feature", worst_perm == 0.0 and worst_phi == 0.0,
          f"permutation importance {worst_perm!r}, max |phi| {worst_phi!r} (both exactly 0)")


def test_market_share_partition(recovery_runs, pipeline_runs):
    runs, _ = recovery_runs
    worst, groups = 0.0, 0
    for r in runs:
        t = compute_market_share(r["data"].facts, r["components"])
        comp_of = {f: i for i, c in enumerate(r["components"]) for f in c}
        sums = {}
        for (f, m), v in t.items():
            sums[(comp_of[f], m)] = sums.get((comp_of[f], m), 0.0) + v
        worst = max(worst, max(abs(v - 100.0) for v in sums.values()))
        groups += len(sums)
    res, _ = pipeline_runs[0]
    feats = pd.read_csv(res.out_dir / "features.csv", dtype={"facility_id": str},
                        float_precision="round_trip")
    comps = json.loads((res.out_dir / "components.json").read_text())[OVERALL]
    comp_of = {f: i for i, c in enumerate(comps) for f in c}
    sums = feats.assign(c=feats["facility_id"].map(comp_of)).groupby(
        ["c", "year", "month"])["target_market_share"].sum()
    worst = max(worst, float((sums - 100).abs().max()))
    groups += len(sums)
    check("market-share partition identity", worst <= 1e-9,
          f"max |sum - 100| {worst:.1e} over {groups} component-months (tol 1e-9)")


def test_determinism(pipeline_runs):
    (a, _), (b, _) = pipeline_runs
    json_files = sorted(n for n in a.files if n.endswith(".json") and n != "manifest.json")
    other = sorted(n for n in a.files if not n.endswith(".json"))
    differ = [n for n in json_files + other
              if not filecmp.cmp(a.files[n], b.files[n], shallow=False)]
    ma = json.loads(a.files["manifest.json"].read_text())
    mb = json.loads(b.files["manifest.json"].read_text())
    for m in (ma, mb):
        m.pop("stage_seconds")
        m["config"].pop("output_dir")
    if ma != mb:
        differ.append("manifest.json (timings excluded)")
    check("determinism", not differ,
          f"{len(json_files)} JSON reports + {len(other)} other files compared; "
          f"differing: {differ or 'none'}")


def test_annotation_table():
    sheet = AnnotationSheet("overall facility level", ["a1", "a2", "a3"],
                            {"1": {"a1": 4, "a2": 3}, "2": {"a1": 3, "a2": 2, "a3": 3},
                             "3": {"a2": 5, "a3": 4}})
    r = annotation_agreement(sheet)
    got = [f"{r.component_means[c]:.2f}" for c in ("1", "2", "3")]
    check("annotation agreement arithmetic", got == ["3.50", "2.67", "4.50"],
          f"(4,3) -> {got[0]}, (3,2,3) -> {got[1]}, (-,5,4) -> {got[2]}")


def test_end_to_end_budget(pipeline_runs):
    res, elapsed = pipeline_runs[0]
    stages = res.manifest["stage_seconds"]
    check("end-to-end desk-scale budget", elapsed < 120,
          f"default config (30 facilities x 27 months) in {elapsed:.1f}s (< 120s); "
          + ", ".join(f"{k} {v:.1f}s" for k, v in stages.items()))
