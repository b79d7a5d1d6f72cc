"""Feature attribution: permutation importance, Shapley values, driver reports."""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import AlignmentMismatch, MissingCover, TooManyFeatures
from .evaluation import predict, raw_predict
from .trees import LEAF, ForestModel, check_schema

MAX_BRUTE_FORCE_FEATURES = 15

GROUP_RULES = (
    ("Physician Encounters", r"^(physician_rank\d+|TotalPhysicians|TotPhysWithAtleast30Encs)$"),
    ("Payor Groups", r"^pyr_"),
    ("Nurse ratings", r"^(nursavgrate|nurse_|nursecare_)"),
    ("Encounter Types", r"^baseclass_"),
    ("Service Lines", r"^cpsins_"),
    ("Zip Level Encounters", r"^zip_rank\d+$"),
    ("Service Area", r"^sa_"),
    ("Hospital Types", r"^(htype_|hospownd_)"),
    ("Facility Ratings", r"^(phyavgrate|phys_)"),
)
OTHER_GROUP = "Other"


@dataclass
class ShapMatrix:
    values: np.ndarray
    base_value: float
    feature_names: list
    facility_ids: list = field(default_factory=list)
    months: list = field(default_factory=list)
    raw_prediction: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.feature_names):
            raise AlignmentMismatch("SHAP values do not match the feature list")
        for seq in (self.facility_ids, self.months):
            if seq and len(seq) != len(self.values):
                raise AlignmentMismatch("row labels do not match the SHAP rows")


@dataclass
class DriverReport:
    scope: object
    ranked: list  # (rank, name, mean |phi|)

    def to_json(self):
        return [{"rank": r, "name": n, "mean_abs_shap": s} for r, n, s in self.ranked]


# -- permutation importance -------------------------------------------------

def _metric_fn(metric):
    if callable(metric):
        return metric
    if metric == "mse":
        return lambda y, p: float(np.mean((y - p) ** 2))
    if metric == "rmse":
        return lambda y, p: float(math.sqrt(np.mean((y - p) ** 2)))
    if metric == "mape":
        return lambda y, p: float(100.0 * np.mean(np.abs(y - p) / np.abs(y)))
    raise ValueError(f"unknown metric {metric!r}")


def permutation_importance(model, X, y, metric="mse", repeats=5, seed=0):
    """Mean increase of ``metric`` when one column is shuffled.

    Each (feature, repeat) shuffle uses its own generator seeded from
    ``(seed, feature, repeat)``.  Returns {feature name: score}.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    X = check_schema(X, model.feature_names)
    y = np.asarray(y, dtype=float)
    fn = _metric_fn(metric)
    baseline = fn(y, predict(model, X))
    scores = {}
    for j, name in enumerate(model.feature_names):
        deltas = []
        for r in range(repeats):
            rng = np.random.default_rng([int(seed), j, r])
            Xp = X.copy()
            Xp[:, j] = rng.permutation(Xp[:, j])
            deltas.append(fn(y, predict(model, Xp)) - baseline)
        scores[name] = float(np.mean(deltas))
    return scores


# -- exact Shapley values ---------------------------------------------------

def _shapley_weights(d):
    """w[s] = s! (d - s - 1)! / d! for coalition sizes s = 0..d-1."""
    return np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d)
                     for s in range(d)])


def brute_force_shapley(model, x, background):
    """Interventional Shapley values of one row by subset enumeration.

    The value of coalition S is the mean raw model output over background
    rows with the S columns overwritten by ``x``.  Returns (phi, base_value).
    """
    x = np.asarray(x, dtype=float).ravel()
    background = check_schema(background, model.feature_names)
    d = len(x)
    if d > MAX_BRUTE_FORCE_FEATURES:
        raise TooManyFeatures(f"{d} features; enumeration is capped at {MAX_BRUTE_FORCE_FEATURES}")
    n_masks = 1 << d
    bits = (np.arange(n_masks)[:, None] >> np.arange(d)) & 1
    value = np.empty(n_masks)
    nb = len(background)
    chunk = max(1, 200_000 // max(nb, 1))
    for start in range(0, n_masks, chunk):
        masks = bits[start:start + chunk].astype(bool)
        hybrid = np.where(masks[:, None, :], x[None, None, :], background[None, :, :])
        out = raw_predict(model, hybrid.reshape(-1, d)).reshape(len(masks), nb)
        value[start:start + len(masks)] = out.mean(axis=1)
    w = _shapley_weights(d)
    size = bits.sum(axis=1)
    phi = np.zeros(d)
    for j in range(d):
        without = np.nonzero(bits[:, j] == 0)[0]
        phi[j] = np.sum(w[size[without]] * (value[without | (1 << j)] - value[without]))
    return phi, float(value[0])


# -- path-dependent Tree SHAP -----------------------------------------------

def _leaf_paths(tree):
    """Yield (leaf, [(node, went_left), ...]) for every leaf, root first."""
    stack = [(0, [])]
    while stack:
        node, path = stack.pop()
        if tree.feature[node] == LEAF:
            yield node, path
            continue
        stack.append((tree.right[node], path + [(node, False)]))
        stack.append((tree.left[node], path + [(node, True)]))


def _unwind_kernels(w, z):
    """Column j holds k_r with sum_s w_s c_s = sum_r k_r P_r when P = (z_j + t) c.

    From c_{s-1} = P_s - z c_s (stable downward division), so
    k_r = sum_{s<r} w_s (-z)^(r-1-s), evaluated by Horner's rule.
    """
    u = len(w)
    k = np.zeros((u + 1, len(z)))
    for r in range(1, u + 1):
        k[r] = w[r - 1] - z * k[r - 1]
    return k


def _tree_shap_single(tree, X, phi):
    """Add one tree's attributions into ``phi``; return the tree's base value.

    Per leaf, the path-dependent value of a coalition S is
    value * prod_{j in S} one_j(x) * prod_{j not in S} zero_j, where zero_j
    is the product of cover fractions along the path's splits on feature j
    and one_j(x) says whether x follows all of them.  The Shapley value of
    that product game only depends on the row's one-pattern, so it is
    computed once per distinct pattern: expand P(t) = prod_k (zero_k +
    one_k t), divide out each feature's factor, and weight the remaining
    coefficients by coalition size.
    """
    cover = tree.cover
    if cover is None or np.any(~np.isfinite(cover)) or np.any(cover <= 0):
        raise MissingCover("tree nodes need positive cover counts")
    n = len(X)
    internal = np.nonzero(tree.feature != LEAF)[0]
    goes_left = np.zeros((n, tree.n_nodes), dtype=bool)
    goes_left[:, internal] = X[:, tree.feature[internal]] <= tree.threshold[internal]
    base = 0.0
    for leaf, path in _leaf_paths(tree):
        zero, one = {}, {}
        for node, went_left in path:
            f = int(tree.feature[node])
            child = tree.left[node] if went_left else tree.right[node]
            follows = goes_left[:, node] if went_left else ~goes_left[:, node]
            zero[f] = zero.get(f, 1.0) * (cover[child] / cover[node])
            one[f] = one[f] & follows if f in one else follows
        v = tree.value[leaf]
        base += v * math.prod(zero.values())
        feats = sorted(zero)
        u = len(feats)
        if u == 0:
            continue
        z = np.array([zero[f] for f in feats])
        ones = np.column_stack([one[f] for f in feats])
        codes = ones @ (1 << np.arange(u))
        patterns, inverse = np.unique(codes, return_inverse=True)
        o = ((patterns[:, None] >> np.arange(u)) & 1).astype(float)
        p = len(patterns)
        poly = np.zeros((p, u + 1))
        poly[:, 0] = 1.0
        for k in range(u):
            poly[:, 1:k + 2] = poly[:, 1:k + 2] * z[k] + poly[:, 0:k + 1] * o[:, k:k + 1]
            poly[:, 0] *= z[k]
        w = _shapley_weights(u)
        kernel = _unwind_kernels(w, z)
        with_one = poly @ kernel
        with_zero = (poly[:, :u] @ w)[:, None] / z[None, :]
        contrib = v * (o - z) * np.where(o > 0, with_one, with_zero)
        phi[:, feats] += contrib[inverse.ravel()]
    return base


def tree_shap(model: ForestModel, X, facility_ids=(), months=()):
    """Path-dependent Tree SHAP for a forest or boosted ensemble.

    Explains the raw (uncapped) output: base_value + phi.sum(axis=1)
    reproduces ``model.raw_predict(X)``.
    """
    X = check_schema(X, model.feature_names)
    phi = np.zeros(X.shape)
    base = 0.0
    for tree in model.trees:
        part = np.zeros(X.shape)
        base += _tree_shap_single(tree, X, part)
        phi += part
    phi *= model.tree_scale
    base = model.offset + model.tree_scale * base
    return ShapMatrix(values=phi, base_value=float(base), feature_names=list(model.feature_names),
                      facility_ids=list(facility_ids), months=list(months),
                      raw_prediction=model.raw_predict(X))


# -- aggregation and reports ------------------------------------------------

def default_group_map(feature_names):
    groups = {name: [] for name, _ in GROUP_RULES}
    for f in feature_names:
        for name, pattern in GROUP_RULES:
            if re.search(pattern, f):
                groups[name].append(f)
                break
    return {g: members for g, members in groups.items() if members}


def load_group_map(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    seen = {}
    for g, members in raw.items():
        for f in members:
            if f in seen:
                raise ValueError(f"feature {f!r} is in groups {seen[f]!r} and {g!r}")
            seen[f] = g
    return {g: list(m) for g, m in raw.items()}


def _row_keys(shap, level):
    if level == "facility":
        return list(shap.facility_ids)
    if level == "facility-month":
        return [f"{f}|{m}" for f, m in zip(shap.facility_ids, shap.months)]
    raise ValueError(f"unknown aggregation level {level!r}")


def aggregate_shap(shap, rows=None, group_map=None, level="facility"):
    """Mean |phi| per facility (or facility-month) and feature.

    With ``group_map`` the columns become groups, each the sum of its
    members' mean |phi|; features outside every group go to "Other".
    """
    if rows is not None:
        if len(rows) != len(shap.values):
            raise AlignmentMismatch(f"{len(rows)} rows vs {len(shap.values)} SHAP rows")
        if shap.facility_ids and any(r.facility_id != f for r, f in zip(rows, shap.facility_ids)):
            raise AlignmentMismatch("facility order differs between rows and SHAP matrix")
        if not shap.facility_ids:
            shap.facility_ids = [r.facility_id for r in rows]
            shap.months = [r.month for r in rows]
    if len(shap.facility_ids) != len(shap.values):
        raise AlignmentMismatch("SHAP matrix has no facility labels")
    df = pd.DataFrame(np.abs(shap.values), columns=shap.feature_names)
    df.index = _row_keys(shap, level)
    agg = df.groupby(level=0, sort=True).mean()
    if group_map is None:
        return agg
    out = {}
    grouped = set()
    for g in sorted(group_map):
        members = [f for f in group_map[g] if f in agg.columns]
        grouped.update(members)
        out[g] = agg[members].sum(axis=1) if members else 0.0
    rest = [f for f in agg.columns if f not in grouped]
    if rest:
        out[OTHER_GROUP] = agg[rest].sum(axis=1)
    return pd.DataFrame(out, index=agg.index)


def top_k_drivers(aggregated, k=15):
    """DriverReport per row of an aggregated table; ties broken by name."""
    reports = {}
    for key, row in aggregated.iterrows():
        items = sorted(((float(v), str(c)) for c, v in row.items()), key=lambda t: (-t[0], t[1]))
        reports[key] = DriverReport(scope=key, ranked=[(i + 1, n, s)
                                                       for i, (s, n) in enumerate(items[:k])])
    return reports


def global_order(shap):
    mean_abs = np.abs(shap.values).mean(axis=0) if len(shap.values) else np.zeros(len(shap.feature_names))
    return sorted(range(len(shap.feature_names)),
                  key=lambda j: (-mean_abs[j], shap.feature_names[j]))


BEESWARM_COLUMNS = ("feature", "feature_value", "shap", "facility_id", "month", "row")


def beeswarm_export(shap, X, path):
    """Long-format (feature, value, phi, facility, month) records for plotting.

    Features appear in descending global mean |phi|; rows keep their order.
    """
    X = np.asarray(X, dtype=float)
    if X.shape != shap.values.shape:
        raise AlignmentMismatch(f"X shape {X.shape} vs SHAP shape {shap.values.shape}")
    n = len(X)
    fac = shap.facility_ids or [""] * n
    mon = shap.months or [""] * n
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BEESWARM_COLUMNS)
        for j in global_order(shap):
            name = shap.feature_names[j]
            for i in range(n):
                w.writerow([name, repr(float(X[i, j])), repr(float(shap.values[i, j])),
                            fac[i], str(mon[i]), i])
    return n * X.shape[1]


def read_beeswarm(path):
    """Rebuild (phi matrix, X matrix, feature order) from a beeswarm file."""
    df = pd.read_csv(path, dtype={"facility_id": str, "month": str},
                     keep_default_na=False, float_precision="round_trip")
    features = list(dict.fromkeys(df["feature"]))
    n = int(df["row"].max()) + 1 if len(df) else 0
    phi = np.zeros((n, len(features)))
    X = np.zeros((n, len(features)))
    col = {f: j for j, f in enumerate(features)}
    for f, v, s, r in zip(df["feature"], df["feature_value"], df["shap"], df["row"]):
        phi[r, col[f]] = s
        X[r, col[f]] = v
    return phi, X, features


def shap_report(shap, level="facility", group_map=None, top_k=15, cap=None):
    """JSON-ready driver report per facility (or facility-month)."""
    feats = aggregate_shap(shap, level=level)
    feat_reports = top_k_drivers(feats, top_k)
    group_reports = {}
    if group_map is not None:
        group_reports = top_k_drivers(aggregate_shap(shap, group_map=group_map, level=level), top_k)
    capped = {}
    if cap is not None and shap.raw_prediction is not None:
        keys = _row_keys(shap, level)
        hit = (shap.raw_prediction < cap[0]) | (shap.raw_prediction > cap[1])
        for key, h in zip(keys, hit):
            capped[key] = capped.get(key, 0) + int(h)
    entries = []
    for key in sorted(feat_reports):
        e = {"scope": key, "features": feat_reports[key].to_json()}
        if group_reports:
            e["groups"] = group_reports[key].to_json()
        if cap is not None:
            e["rows_changed_by_capping"] = capped.get(key, 0)
        entries.append(e)
    return {"level": level, "base_value": shap.base_value, "top_k": top_k,
            "explains": "raw (uncapped) model output", "reports": entries}
