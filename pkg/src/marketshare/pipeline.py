"""End-to-end orchestration: data -> competitors -> targets -> models -> drivers.

Outputs are staged in a scratch directory and moved into place only after
every stage succeeds.  All randomness derives from ``PipelineConfig.seed``;
apart from ``manifest.json`` (which records wall-clock timings) the bundle is
byte-identical across runs with the same configuration.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .competitors import (OVERALL, Thresholds, adjusted_rand_index, build_graph,
                          connected_components, correlation_edges, distance_matrix,
                          extract_competitors, load_exclusions, write_competitors_json,
                          write_edge_list)
from .errors import ConfigInvalid, EmptyFacts, IngestError, StageError
from .evaluation import (ALGOS, evaluate, fit_model, impurity_feature_importance, kfold_cv,
                         random_search, rank_features, time_split, to_matrix)
from .explain import (beeswarm_export, default_group_map, load_group_map,
                      permutation_importance, shap_report, tree_shap)
from .features import (attach_targets, compute_market_share, engineer_features,
                       monthly_totals, scope_series, write_feature_table)
from .ingest import facts_frame, load_facts, load_ground_truth, load_profiles, MonthYear
from .synthetic import SyntheticConfig, generate_synthetic
from .trees import HyperParams

logger = logging.getLogger(__name__)

MODEL_LABELS = {"lr": "LR", "rf": "RF", "gbm": "GBM"}

# Kept small enough for the desk-scale budget (~100 features, ~800 rows).
PIPELINE_SPACE = {
    "lr": {},
    "rf": {"n_trees": ("log", 20, 60), "max_depth": [6, 8, 12],
           "min_samples_leaf": (2, 8), "max_features_fraction": (0.15, 0.5),
           "bootstrap": [True]},
    "gbm": {"n_trees": ("log", 30, 120), "max_depth": [2, 3, 4],
            "min_samples_leaf": (2, 10), "max_features_fraction": (0.2, 0.6),
            "learning_rate": ("log", 0.05, 0.3), "bootstrap": [False]},
}

BUNDLE_FILES = (
    "competitors.json", "graph_edges.csv", "components.json", "features.csv",
    "metrics.json", "cv_metrics.json", "importance.csv", "permutation_importance.csv",
    "tuning.json", "model_lr.json", "model_rf.json", "model_gbm.json",
    "shap_report.json", "beeswarm.csv", "groups.json", "manifest.json",
)
STAGES = ("ingest", "competitors", "targets", "train", "explain", "report")
_STAGING = ".staging"


def space_from_json(raw):
    """JSON search space -> internal form.

    ``[a, b, ...]`` is a list of choices, ``{"range": [lo, hi]}`` a uniform
    range and ``{"log": [lo, hi]}`` a log-uniform one.
    """
    out = {}
    for name, spec in raw.items():
        if isinstance(spec, list):
            out[name] = list(spec)
        elif isinstance(spec, dict) and len(spec) == 1 and "range" in spec:
            out[name] = tuple(spec["range"])
        elif isinstance(spec, dict) and len(spec) == 1 and "log" in spec:
            out[name] = ("log", *spec["log"])
        else:
            raise ConfigInvalid(f"cannot read search space entry {name!r}: {spec!r}")
    return out


def space_to_json(space):
    out = {}
    for name, spec in space.items():
        if isinstance(spec, list):
            out[name] = list(spec)
        elif spec and spec[0] == "log":
            out[name] = {"log": list(spec[1:])}
        else:
            out[name] = {"range": list(spec)}
    return out


@dataclass
class PipelineConfig:
    seed: int
    synthetic: SyntheticConfig | None = None
    inputs: dict | None = None  # encounters, facilities[, exclusions, ground_truth, groups]
    thresholds: Thresholds = field(default_factory=Thresholds)
    max_controls: int = 3
    neighbor_mode: str = "negative"
    share_mode: str = "component"
    top_n: int = 10
    train_months: int = 24
    test_months: int = 3
    valid_months: int = 3
    cv_folds: int = 5
    tune_iter: int = 4
    space: dict = field(default_factory=lambda: {k: dict(v) for k, v in PIPELINE_SPACE.items()})
    hyperparams: dict = field(default_factory=dict)  # algo -> HyperParams, used when tune_iter == 0
    level: str = "facility"
    top_k: int = 15
    permutation_repeats: int = 3
    output_dir: str = "out"

    def validate(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigInvalid("seed must be an integer")
        if (self.synthetic is None) == (self.inputs is None):
            raise ConfigInvalid("exactly one of 'synthetic' and 'inputs' must be given")
        if self.inputs is not None:
            for key in ("encounters", "facilities"):
                if key not in self.inputs:
                    raise ConfigInvalid(f"inputs.{key} is required")
        if self.neighbor_mode not in ("negative", "all"):
            raise ConfigInvalid("neighbor_mode must be 'negative' or 'all'")
        if self.share_mode not in ("component", "statewide"):
            raise ConfigInvalid("share_mode must be 'component' or 'statewide'")
        if self.level not in ("facility", "facility-month"):
            raise ConfigInvalid("level must be 'facility' or 'facility-month'")
        if min(self.train_months, self.test_months, self.cv_folds, self.top_k, self.top_n) < 1:
            raise ConfigInvalid("month counts, cv_folds, top_k and top_n must be positive")
        if self.tune_iter < 0 or self.permutation_repeats < 1:
            raise ConfigInvalid("tune_iter must be >= 0 and permutation_repeats >= 1")
        if self.tune_iter and self.valid_months >= self.train_months:
            raise ConfigInvalid("valid_months must be smaller than train_months")
        if self.synthetic is not None:
            self.synthetic.validate()
        return self

    @classmethod
    def from_dict(cls, d, seed=None, output_dir=None):
        d = dict(d)
        if seed is not None:
            d["seed"] = seed
        if "seed" not in d:
            raise ConfigInvalid("seed is mandatory")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if d.get("synthetic") is not None:
                syn = dict(d["synthetic"])
                # one seed drives everything
                syn["seed"] = d["seed"]
                kw["synthetic"] = SyntheticConfig.from_dict(syn)
            if "thresholds" in d:
                kw["thresholds"] = Thresholds(**d["thresholds"])
            if "space" in d:
                space = {k: dict(v) for k, v in PIPELINE_SPACE.items()}
                space.update({algo: space_from_json(s) for algo, s in d["space"].items()})
                kw["space"] = space
            if "hyperparams" in d:
                kw["hyperparams"] = {a: HyperParams(**p) for a, p in d["hyperparams"].items()}
            if output_dir is not None:
                kw["output_dir"] = str(output_dir)
            cfg = cls(**kw)
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigInvalid(str(exc)) from None
        return cfg.validate()

    @classmethod
    def load(cls, path, seed=None, output_dir=None):
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise IngestError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from None
        return cls.from_dict(raw, seed=seed, output_dir=output_dir)

    def to_dict(self):
        d = {"seed": self.seed,
             "synthetic": asdict(self.synthetic) if self.synthetic else None,
             "inputs": dict(self.inputs) if self.inputs else None,
             "thresholds": asdict(self.thresholds),
             "space": {a: space_to_json(s) for a, s in sorted(self.space.items())},
             "hyperparams": {a: asdict(p) for a, p in sorted(self.hyperparams.items())}}
        for name in ("max_controls", "neighbor_mode", "share_mode", "top_n", "train_months",
                     "test_months", "valid_months", "cv_folds", "tune_iter", "level",
                     "top_k", "permutation_repeats", "output_dir"):
            d[name] = getattr(self, name)
        return d

    def config_hash(self):
        """SHA-256 of the canonical config, ignoring where outputs go."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


@dataclass
class RunResult:
    out_dir: Path
    files: dict
    manifest: dict


class _Timer:
    def __init__(self):
        self.seconds = {}

    def stage(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, exc_type, exc, tb):
                timer.seconds[name] = time.perf_counter() - self.t0
                if exc is not None and not isinstance(exc, StageError):
                    raise StageError(name, exc) from exc
                return False

        return _Ctx()


# -- stages -----------------------------------------------------------------

def _ingest(cfg):
    if cfg.synthetic is not None:
        data = generate_synthetic(cfg.synthetic)
        return facts_frame(data.facts), data.profiles, data.ground_truth, []
    inp = cfg.inputs
    facts = facts_frame(load_facts(inp["encounters"]))
    if facts.empty:
        raise EmptyFacts(f"{inp['encounters']} has no rows")
    profiles = load_profiles(inp["facilities"])
    truth = load_ground_truth(inp["ground_truth"]) if inp.get("ground_truth") else None
    exclusions = load_exclusions(inp["exclusions"]) if inp.get("exclusions") else []
    return facts, profiles, truth, exclusions


def _months(facts):
    pairs = facts[["year", "month"]].drop_duplicates().itertuples(index=False)
    return sorted(MonthYear(int(y), int(m)) for y, m in pairs)


def identify_competitors(facts, profiles, cfg, exclusions=(), months=None):
    """Graphs, components and competitor lists for every scope.

    Correlations use only the first ``train_months`` months so that nothing
    from the test window shapes the market definition.
    """
    months = months or _months(facts)
    window = months[:cfg.train_months]
    facilities = sorted(set(facts["facility_id"]))
    known = {p.facility_id for p in profiles}
    missing = [f for f in facilities if f not in known]
    if missing:
        raise IngestError(f"facilities without a profile: {missing}")
    series = scope_series(facts, window, facilities)
    dist = distance_matrix([p for p in profiles if p.facility_id in set(facilities)])
    graphs, components, assignments = {}, {}, []
    for scope, by_fac in series.items():
        edges = correlation_edges(by_fac, profiles, cfg.thresholds, scope, exclusions,
                                  cfg.max_controls, dist)
        g = build_graph(edges, scope, facilities)
        graphs[scope] = g
        components[scope] = connected_components(g)
        totals = monthly_totals(facts, None if scope == OVERALL else scope)
        volumes = {f: totals.get(f, {}) for f in facilities}
        assignments.extend(extract_competitors(g, volumes, cfg.neighbor_mode))
    assignments.sort(key=lambda a: (a.service_line, a.facility_id, a.month))
    return graphs, components, assignments


def _tune_and_fit(cfg, train, names):
    """Random search on an inner split of the training months, then refit."""
    X, y, _ = to_matrix(train, names)
    models, chosen, trials = {}, {}, {}
    for algo in ALGOS:
        if algo == "lr" or cfg.tune_iter == 0:
            params = cfg.hyperparams.get(algo, HyperParams())
        else:
            inner, valid = time_split(train, cfg.train_months - cfg.valid_months, cfg.valid_months)
            params, trials[algo] = random_search(cfg.space[algo], cfg.tune_iter, algo,
                                                 inner, valid, cfg.seed)
        chosen[algo] = params
        models[algo] = fit_model(algo, X, y, params, cfg.seed, names)
    return models, chosen, trials


def _capped_count(model, X):
    raw = model.raw_predict(X)
    return int(np.sum((raw < model.params.cap_lo) | (raw > model.params.cap_hi)))


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    """Run every stage in order and publish the bundle into ``cfg.output_dir``."""
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in BUNDLE_FILES:
        (out / name).unlink(missing_ok=True)
    stage_dir = out / _STAGING
    shutil.rmtree(stage_dir, ignore_errors=True)
    stage_dir.mkdir()
    timer = _Timer()
    try:
        manifest = _run_stages(cfg, stage_dir, timer)
    except BaseException:
        shutil.rmtree(stage_dir, ignore_errors=True)
        raise
    files = {}
    for name in sorted(p.name for p in stage_dir.iterdir()):
        (stage_dir / name).replace(out / name)
        files[name] = out / name
    stage_dir.rmdir()
    return RunResult(out_dir=out, files=files, manifest=manifest)


def _run_stages(cfg, sd, timer):
    info = {}
    with timer.stage("ingest"):
        facts, profiles, truth, exclusions = _ingest(cfg)
        months = _months(facts)
        if len(months) < cfg.train_months + cfg.test_months:
            raise ConfigInvalid(f"need {cfg.train_months + cfg.test_months} months of facts, "
                                f"have {len(months)}")

    with timer.stage("competitors"):
        graphs, components, assignments = identify_competitors(
            facts, profiles, cfg, exclusions, months)
        write_competitors_json(sd / "competitors.json", assignments)
        write_edge_list(sd / "graph_edges.csv", [graphs[s] for s in sorted(graphs)])
        comp_json = {s: [sorted(c) for c in comps] for s, comps in sorted(components.items())}
        write_json(sd / "components.json", comp_json)
        info["n_edges"] = {s: len(g.edges) for s, g in sorted(graphs.items())}
        if truth:
            ids = sorted(set(truth) & set(facts["facility_id"]))
            idx = {f: i for i, comp in enumerate(components[OVERALL]) for f in comp}
            info["adjusted_rand_index"] = adjusted_rand_index(
                [truth[f] for f in ids], [idx[f] for f in ids])

    with timer.stage("targets"):
        targets = compute_market_share(facts, components[OVERALL], cfg.share_mode)
        rows = attach_targets(engineer_features(facts, profiles, cfg.top_n), targets)
        write_feature_table(sd / "features.csv", rows)
        info["n_rows"] = len(rows)

    with timer.stage("train"):
        train, test = time_split(rows, cfg.train_months, cfg.test_months)
        names = list(rows[0].features)
        info["n_features"] = len(names)
        models, chosen, trials = _tune_and_fit(cfg, train, names)
        X_tr, y_tr, _ = to_matrix(train, names)
        X_te, y_te, _ = to_matrix(test, names)
        metrics, cv, imp_rows = [], {}, []
        for algo in ALGOS:
            label = MODEL_LABELS[algo]
            for split, X, y in (("train", X_tr, y_tr), ("test", X_te, y_te)):
                m = evaluate(models[algo], X, y)
                metrics.append({"model": label, "split": split, "rmse": m.rmse, "mape": m.mape,
                                "n_rows": len(y), "n_capped": _capped_count(models[algo], X)})
            cv[label] = kfold_cv(train, cfg.cv_folds, algo, chosen[algo], cfg.seed, names)
            ranked = rank_features(impurity_feature_importance(models[algo]), cfg.top_k)
            imp_rows.extend((i + 1, label, f, s) for i, (f, s) in enumerate(ranked))
            write_json(sd / f"model_{algo}.json", models[algo].to_dict())
        write_json(sd / "metrics.json", metrics)
        write_json(sd / "cv_metrics.json", cv)
        write_json(sd / "tuning.json", {
            MODEL_LABELS[a]: {"chosen": asdict(chosen[a]), "trials": trials.get(a, [])}
            for a in ALGOS})
        write_csv(sd / "importance.csv", ("rank", "model", "feature", "score"),
                   [(r, m, f, repr(s)) for r, m, f, s in imp_rows])

    with timer.stage("explain"):
        test_mape = {a: next(r["mape"] for r in metrics
                             if r["model"] == MODEL_LABELS[a] and r["split"] == "test")
                     for a in ("rf", "gbm")}
        best = min(("rf", "gbm"), key=lambda a: (test_mape[a], a == "gbm"))
        model = models[best]
        info["explained_model"] = MODEL_LABELS[best]
        X_all, _, _ = to_matrix(rows, names)
        shap = tree_shap(model, X_all, [r.facility_id for r in rows],
                         [str(r.month) for r in rows])
        group_map = (load_group_map(cfg.inputs["groups"])
                     if cfg.inputs and cfg.inputs.get("groups") else default_group_map(names))
        report = shap_report(shap, cfg.level, group_map, cfg.top_k,
                             cap=(model.params.cap_lo, model.params.cap_hi))
        report["model"] = MODEL_LABELS[best]
        write_json(sd / "shap_report.json", report)
        write_json(sd / "groups.json", group_map)
        beeswarm_export(shap, X_all, sd / "beeswarm.csv")
        perm = permutation_importance(model, X_te, y_te, "mse", cfg.permutation_repeats,
                                      cfg.seed)
        write_csv(sd / "permutation_importance.csv", ("rank", "model", "feature", "score"),
                   [(i + 1, MODEL_LABELS[best], f, repr(s))
                    for i, (f, s) in enumerate(rank_features(perm, len(perm)))])
        info["max_additivity_error"] = float(np.max(np.abs(
            shap.base_value + shap.values.sum(axis=1) - shap.raw_prediction)))

    with timer.stage("report"):
        manifest = {
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "stages": list(STAGES),
            "stage_seconds": dict(timer.seconds),
            "files": sorted(p.name for p in sd.iterdir()) + ["manifest.json"],
            **info,
        }
        write_json(sd / "manifest.json", manifest)
    manifest["stage_seconds"] = dict(timer.seconds)
    return manifest


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


__all__ = ["PipelineConfig", "RunResult", "run_pipeline", "identify_competitors",
           "BUNDLE_FILES", "PIPELINE_SPACE"]
