"""Command-line entry point: ``marketshare <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .agreement import annotation_agreement, format_agreement, load_annotation_sheet
from .competitors import (OVERALL, Thresholds, adjusted_rand_index, load_exclusions,
                          write_competitors_json, write_edge_list)
from .errors import ConfigInvalid, IngestError, MarketShareError
from .evaluation import (ALGOS, evaluate, fit_model, impurity_feature_importance, kfold_cv,
                         load_model, random_search, rank_features, time_split, to_matrix)
from .explain import (beeswarm_export, default_group_map, load_group_map,
                      permutation_importance, shap_report, tree_shap)
from .features import (attach_targets, compute_market_share, engineer_features,
                       read_feature_table, write_feature_table)
from .ingest import facts_frame, load_facts, load_ground_truth, load_profiles
from .pipeline import (MODEL_LABELS, PIPELINE_SPACE, PipelineConfig, identify_competitors,
                       run_pipeline, space_from_json, write_csv, write_json)
from .synthetic import SyntheticConfig, generate_synthetic
from .trees import ForestModel, HyperParams

logger = logging.getLogger("marketshare")


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise IngestError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from None


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args):
    raw = _read_config(args.config)
    raw = raw.get("synthetic", raw) or {}
    if args.seed is not None:
        raw = {**raw, "seed": args.seed}
    data = generate_synthetic(SyntheticConfig.from_dict(raw))
    out = _out_dir(args)
    data.write(out)
    print(f"wrote {len(data.facts)} encounter rows for {len(data.profiles)} facilities to {out}")
    return 0


def cmd_competitors(args):
    raw = _read_config(args.config)
    thr = dict(raw.get("thresholds", {}))
    for key, val in (("rho_hi", args.rho_hi), ("rho_lo", args.rho_lo), ("max_km", args.max_km)):
        if val is not None:
            thr[key] = val
    cfg = PipelineConfig(
        seed=args.seed if args.seed is not None else raw.get("seed", 0),
        inputs={"encounters": args.encounters, "facilities": args.facilities},
        thresholds=Thresholds(**thr),
        max_controls=args.max_controls,
        neighbor_mode=args.neighbor_mode,
        share_mode=args.share_mode,
        train_months=args.window_months).validate()
    facts = facts_frame(load_facts(args.encounters))
    profiles = load_profiles(args.facilities)
    exclusions = load_exclusions(args.exclusions) if args.exclusions else []
    graphs, components, assignments = identify_competitors(facts, profiles, cfg, exclusions)
    out = _out_dir(args)
    write_competitors_json(out / "competitors.json", assignments)
    write_edge_list(out / "graph_edges.csv", [graphs[s] for s in sorted(graphs)])
    write_json(out / "components.json",
               {s: [sorted(c) for c in comps] for s, comps in sorted(components.items())})
    targets = compute_market_share(facts, components[OVERALL], cfg.share_mode)
    rows = attach_targets(engineer_features(facts, profiles, cfg.top_n), targets)
    write_feature_table(out / "features.csv", rows)
    print(f"{len(components[OVERALL])} OVERALL components, "
          f"{sum(len(g.edges) for g in graphs.values())} edges over {len(graphs)} scopes")
    if args.ground_truth:
        truth = load_ground_truth(args.ground_truth)
        idx = {f: i for i, c in enumerate(components[OVERALL]) for f in c}
        ids = sorted(set(truth) & set(idx))
        ari = adjusted_rand_index([truth[f] for f in ids], [idx[f] for f in ids])
        print(f"adjusted Rand index vs ground truth: {ari:.4f}")
    return 0


def cmd_train(args):
    raw = _read_config(args.config)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    rows = _read_rows(args.data)
    train, test = time_split(rows, args.train_months, args.test_months)
    names = list(rows[0].features)
    space = {k: dict(v) for k, v in PIPELINE_SPACE.items()}
    space.update({a: space_from_json(s) for a, s in raw.get("space", {}).items()})
    fixed = {a: HyperParams(**p) for a, p in raw.get("hyperparams", {}).items()}
    algos = ALGOS if args.algo == "all" else (args.algo,)
    X_tr, y_tr, _ = to_matrix(train, names)
    X_te, y_te, _ = to_matrix(test, names)
    out = _out_dir(args)
    metrics, cv, imp, tuning = [], {}, [], {}
    for algo in algos:
        label = MODEL_LABELS[algo]
        params, trials = fixed.get(algo, HyperParams()), []
        if args.tune and algo != "lr":
            inner, valid = time_split(train, args.train_months - args.valid_months,
                                      args.valid_months)
            params, trials = random_search(space[algo], args.tune, algo, inner, valid, seed)
        model = fit_model(algo, X_tr, y_tr, params, seed, names)
        write_json(out / f"model_{algo}.json", model.to_dict())
        for split, X, y in (("train", X_tr, y_tr), ("test", X_te, y_te)):
            m = evaluate(model, X, y)
            metrics.append({"model": label, "split": split, "rmse": m.rmse, "mape": m.mape,
                            "n_rows": len(y)})
        if args.cv:
            cv[label] = kfold_cv(train, args.cv, algo, params, seed, names)
        ranked = rank_features(impurity_feature_importance(model), args.top_k)
        imp.extend((i + 1, label, f, repr(s)) for i, (f, s) in enumerate(ranked))
        tuning[label] = {"chosen": asdict(params), "trials": trials}
    write_json(out / "metrics.json", metrics)
    if cv:
        write_json(out / "cv_metrics.json", cv)
    write_json(out / "tuning.json", tuning)
    write_csv(out / "importance.csv", ("rank", "model", "feature", "score"), imp)
    print(format_metrics(metrics))
    return 0


def cmd_explain(args):
    model = load_model(args.model)
    if not isinstance(model, ForestModel):
        raise ConfigInvalid("Tree SHAP needs a forest or boosted model, not a linear one")
    rows = _read_rows(args.data)
    X, y, _ = to_matrix(rows, model.feature_names)
    shap = tree_shap(model, X, [r.facility_id for r in rows], [str(r.month) for r in rows])
    groups = load_group_map(args.groups) if args.groups else default_group_map(model.feature_names)
    report = shap_report(shap, args.level, groups, args.top_k,
                         cap=(model.params.cap_lo, model.params.cap_hi))
    report["model"] = model.label
    out = _out_dir(args)
    write_json(out / "shap_report.json", report)
    write_json(out / "groups.json", groups)
    beeswarm_export(shap, X, out / "beeswarm.csv")
    if not np.isnan(y).any():
        seed = args.seed if args.seed is not None else 0
        perm = permutation_importance(model, X, y, "mse", args.repeats, seed)
        write_csv(out / "permutation_importance.csv", ("rank", "model", "feature", "score"),
                   [(i + 1, model.label, f, repr(s))
                    for i, (f, s) in enumerate(rank_features(perm, len(perm)))])
    print(f"explained {len(rows)} rows; base value {shap.base_value:.2f}")
    return 0


def cmd_report(args):
    run = Path(args.run)
    parts = []
    if (run / "metrics.json").exists():
        parts.append(format_metrics(json.loads((run / "metrics.json").read_text())))
    if (run / "cv_metrics.json").exists():
        parts.append(format_cv(json.loads((run / "cv_metrics.json").read_text())))
    if (run / "importance.csv").exists():
        parts.append(format_importance(run / "importance.csv"))
    if (run / "shap_report.json").exists():
        parts.append(format_drivers(json.loads((run / "shap_report.json").read_text()),
                                    args.facility))
    if not parts:
        raise IngestError(f"no report files found in {run}")
    print("\n\n".join(parts))
    return 0


def cmd_agreement(args):
    result = annotation_agreement(load_annotation_sheet(args.sheet, args.category))
    print(format_agreement(result))
    if args.out:
        out = _out_dir(args)
        write_json(out / "agreement.json", asdict(result))
    return 0


def cmd_pipeline(args):
    if args.config is None:
        raw = {"synthetic": {}}
    else:
        raw = _read_config(args.config)
    if args.seed is None and "seed" not in raw:
        raw = {**raw, "seed": 0}
    cfg = PipelineConfig.from_dict(raw, seed=args.seed, output_dir=args.out)
    result = run_pipeline(cfg)
    m = result.manifest
    total = sum(m["stage_seconds"].values())
    print(f"pipeline finished in {total:.1f}s; bundle in {result.out_dir}")
    if "adjusted_rand_index" in m:
        print(f"adjusted Rand index vs ground truth: {m['adjusted_rand_index']:.4f}")
    print(format_metrics(json.loads((result.out_dir / "metrics.json").read_text())))
    return 0


# -- text tables (2 dp for display; JSON keeps full precision) ----------------

def format_metrics(rows):
    lines = ["model\tsplit\tRMSE\tMAPE"]
    lines += [f"{r['model']}\t{r['split']}\t{r['rmse']:.2f}\t{r['mape']:.2f}" for r in rows]
    return "\n".join(lines)


def format_cv(cv):
    lines = ["model\tfold\tRMSE\tMAPE"]
    for model in cv:
        lines += [f"{model}\t{r['fold']}\t{r['rmse']:.2f}\t{r['mape']:.2f}" for r in cv[model]]
    return "\n".join(lines)


def format_importance(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    models = list(dict.fromkeys(r["model"] for r in rows))
    by = {m: [r["feature"] for r in rows if r["model"] == m] for m in models}
    depth = max(len(v) for v in by.values())
    lines = ["rank\t" + "\t".join(models)]
    for i in range(depth):
        lines.append(f"{i + 1}\t" + "\t".join(by[m][i] if i < len(by[m]) else "" for m in models))
    return "\n".join(lines)


def format_drivers(report, facility=None):
    lines = [f"top drivers ({report.get('model', '?')}, level {report['level']})"]
    for entry in report["reports"]:
        if facility and not str(entry["scope"]).startswith(facility):
            continue
        names = ", ".join(d["name"] for d in entry.get("groups", entry["features"])[:5])
        lines.append(f"{entry['scope']}\t{names}")
    return "\n".join(lines)


def _read_rows(path):
    if not Path(path).exists():
        raise IngestError(f"input file not found: {path}")
    rows = read_feature_table(path)
    if not rows:
        raise IngestError(f"{path} has no rows")
    return rows


def build_parser():
    p = argparse.ArgumentParser(prog="marketshare", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="out"):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, "data")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("competitors", help="competitor graphs, components and targets")
    common(sp)
    sp.add_argument("--encounters", required=True)
    sp.add_argument("--facilities", required=True)
    sp.add_argument("--exclusions", help="CSV of facility pairs never linked")
    sp.add_argument("--ground-truth", help="cluster sidecar; prints the adjusted Rand index")
    sp.add_argument("--rho-hi", type=float)
    sp.add_argument("--rho-lo", type=float)
    sp.add_argument("--max-km", type=float)
    sp.add_argument("--max-controls", type=int, default=3)
    sp.add_argument("--neighbor-mode", choices=("negative", "all"), default="negative")
    sp.add_argument("--share-mode", choices=("component", "statewide"), default="component")
    sp.add_argument("--window-months", type=int, default=24,
                    help="leading months used for correlations")
    sp.set_defaults(func=cmd_competitors)

    sp = sub.add_parser("train", help="fit LR / RF / GBM on a feature table")
    common(sp)
    sp.add_argument("--data", required=True, help="features.csv with targets")
    sp.add_argument("--algo", choices=ALGOS + ("all",), default="all")
    sp.add_argument("--train-months", type=int, default=24)
    sp.add_argument("--test-months", type=int, default=3)
    sp.add_argument("--valid-months", type=int, default=3)
    sp.add_argument("--tune", type=int, default=0, metavar="N", help="random-search trials")
    sp.add_argument("--cv", type=int, default=5, metavar="K", help="CV folds (0 to skip)")
    sp.add_argument("--top-k", type=int, default=15)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("explain", help="Tree SHAP drivers for a saved model")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--level", choices=("facility", "facility-month"), default="facility")
    sp.add_argument("--groups", help="JSON feature-group map")
    sp.add_argument("--top-k", type=int, default=15)
    sp.add_argument("--repeats", type=int, default=3, help="permutation repeats")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("report", help="print result tables from a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--facility", help="only show drivers for this facility")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("agreement", help="annotation agreement means")
    sp.add_argument("--sheet", required=True)
    sp.add_argument("--category", default="overall facility level")
    sp.add_argument("--out", help="also write agreement.json here")
    sp.set_defaults(func=cmd_agreement)

    sp = sub.add_parser("pipeline", help="run every stage end to end")
    common(sp)
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MarketShareError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
