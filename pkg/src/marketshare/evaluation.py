"""Splitting, metrics, cross-validation, random search and importances."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import (EmptySpace, IngestError, InsufficientMonths, LengthMismatch, UntrainedModel,
                     ZeroTarget)
from .linear import LINEAR_FORMAT, LinearModel, fit_linear
from .trees import ForestModel, HyperParams, fit_forest, fit_gbm

logger = logging.getLogger(__name__)

ALGOS = ("lr", "rf", "gbm")
# rows whose target is below this are left out of MAPE
MAPE_MIN_TARGET = 1e-9


@dataclass(frozen=True)
class EvalMetrics:
    rmse: float
    mape: float


def to_matrix(rows, feature_names=None):
    """(X, y, feature_names) from FeatureRows; y is NaN where unset."""
    if feature_names is None:
        feature_names = list(rows[0].features) if rows else []
    X = np.array([[r.features[n] for n in feature_names] for r in rows], dtype=float)
    X = X.reshape(len(rows), len(feature_names))
    y = np.array([np.nan if r.target_market_share is None else r.target_market_share
                  for r in rows], dtype=float)
    return X, y, list(feature_names)


def distinct_months(rows):
    return sorted({r.month for r in rows})


def time_split(rows, train_months=24, test_months=3):
    """Earliest ``train_months`` months train, the following ``test_months`` test."""
    months = distinct_months(rows)
    if len(months) < train_months + test_months:
        raise InsufficientMonths(
            f"need {train_months + test_months} distinct months, have {len(months)}")
    train_set = set(months[:train_months])
    test_set = set(months[train_months:train_months + test_months])
    train = [r for r in rows if r.month in train_set]
    test = [r for r in rows if r.month in test_set]
    return train, test


def month_blocks(rows, k):
    months = distinct_months(rows)
    if len(months) < k:
        raise InsufficientMonths(f"need at least {k} distinct months, have {len(months)}")
    return [list(b) for b in np.array_split(np.array(months, dtype=object), k)]


def fit_model(algo, X, y, params=HyperParams(), seed=0, feature_names=None):
    if algo == "lr":
        return fit_linear(X, y, feature_names=feature_names, params=params)
    if algo == "rf":
        return fit_forest(X, y, params, seed, feature_names=feature_names)
    if algo == "gbm":
        return fit_gbm(X, y, params, seed, feature_names=feature_names)
    raise ValueError(f"unknown algo {algo!r}; expected one of {ALGOS}")


def load_model(path):
    """Read a saved forest, boosted or linear model."""
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise IngestError(f"model file not found: {path}") from None
    if d.get("format") == LINEAR_FORMAT:
        return LinearModel.from_dict(d)
    return ForestModel.from_dict(d)


def raw_predict(model, X):
    if not hasattr(model, "raw_predict"):
        raise UntrainedModel(f"{type(model).__name__} is not a trained model")
    return model.raw_predict(X)


def predict(model, X):
    """Model output clamped to the configured cap (default [2, 99])."""
    raw = raw_predict(model, X)
    return np.clip(raw, model.params.cap_lo, model.params.cap_hi)


def _check_lengths(y, yhat):
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.size == 0:
        raise LengthMismatch(f"shapes {y.shape} and {yhat.shape}")
    return y, yhat


def rmse(y, yhat):
    y, yhat = _check_lengths(y, yhat)
    return float(math.sqrt(np.mean((y - yhat) ** 2)))


def mape(y, yhat):
    """Mean absolute percentage error in percent."""
    y, yhat = _check_lengths(y, yhat)
    if np.any(y == 0):
        raise ZeroTarget("MAPE is undefined for zero targets")
    keep = np.abs(y) >= MAPE_MIN_TARGET
    return float(100.0 * np.mean(np.abs(y[keep] - yhat[keep]) / np.abs(y[keep])))


def evaluate(model, X, y):
    yhat = predict(model, X)
    return EvalMetrics(rmse=rmse(y, yhat), mape=mape(y, yhat))


def kfold_cv(rows, k=5, algo="rf", params=HyperParams(), seed=0, feature_names=None):
    """Contiguous month-block cross-validation.

    Returns a list of k+1 dicts: one per fold and a final ``"mean"`` row.
    """
    blocks = month_blocks(rows, k)
    X, y, names = to_matrix(rows, feature_names)
    month_of = np.array([r.month.ordinal for r in rows])
    out = []
    for i, block in enumerate(blocks):
        held = np.isin(month_of, [m.ordinal for m in block])
        model = fit_model(algo, X[~held], y[~held], params, seed, names)
        m = evaluate(model, X[held], y[held])
        out.append({"fold": i + 1, "months": [str(block[0]), str(block[-1])],
                    "rmse": m.rmse, "mape": m.mape})
    out.append({"fold": "mean", "rmse": float(np.mean([r["rmse"] for r in out])),
                "mape": float(np.mean([r["mape"] for r in out]))})
    return out


# search space entries: (lo, hi) numeric range, ("log", lo, hi), or a list of choices
DEFAULT_SPACE = {
    "rf": {"n_trees": ("log", 20, 120), "max_depth": [4, 6, 8, 12, None],
           "min_samples_leaf": (1, 8), "max_features_fraction": (0.2, 1.0),
           "bootstrap": [True]},
    "gbm": {"n_trees": ("log", 20, 150), "max_depth": [2, 3, 4, 5],
            "min_samples_leaf": (1, 10), "max_features_fraction": (0.3, 1.0),
            "learning_rate": ("log", 0.03, 0.3), "bootstrap": [False]},
    "lr": {},
}
_LOG_PARAMS = ("n_trees", "learning_rate")
_INT_PARAMS = ("n_trees", "max_depth", "min_samples_leaf")


def sample_params(space, rng, base=HyperParams()):
    if not space:
        raise EmptySpace("search space is empty")
    chosen = {}
    for name in sorted(space):
        spec = space[name]
        if isinstance(spec, list):
            if not spec:
                raise EmptySpace(f"no choices for {name}")
            chosen[name] = spec[int(rng.integers(len(spec)))]
            continue
        log = name in _LOG_PARAMS
        if isinstance(spec, tuple) and spec and spec[0] == "log":
            log, spec = True, spec[1:]
        lo, hi = spec
        if lo > hi:
            raise EmptySpace(f"empty range for {name}: {spec}")
        if log:
            v = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        else:
            v = rng.uniform(lo, hi)
        chosen[name] = int(round(v)) if name in _INT_PARAMS else float(v)
    return base.replace(**chosen)


def random_search(space, n_iter, algo, train, valid, seed=0, base=HyperParams()):
    """Sample ``n_iter`` configurations and keep the lowest validation MAPE.

    Returns ``(best_params, trials)``; each trial records its parameters
    and validation metrics in sampling order.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    if valid and train and max(r.month for r in train) >= min(r.month for r in valid):
        raise ValueError("validation rows must come after the training rows")
    rng = np.random.default_rng([int(seed), 7919])
    X, y, names = to_matrix(train)
    Xv, yv, _ = to_matrix(valid, names)
    trials = []
    best = None
    for i in range(n_iter):
        params = sample_params(space, rng, base)
        model = fit_model(algo, X, y, params, seed, names)
        m = evaluate(model, Xv, yv)
        trials.append({"trial": i, "params": asdict(params), "rmse": m.rmse, "mape": m.mape})
        if best is None or m.mape < best[0]:
            best = (m.mape, params)
        logger.debug("%s trial %d: mape=%.4f", algo, i, m.mape)
    return best[1], trials


def impurity_feature_importance(model):
    """Per-feature importance scores keyed by feature name.

    Forests: total SSE reduction of the splits on each feature, normalized
    to sum to 1 (all zeros if no tree ever split).  Linear models: |coef|,
    which only serves for ranking.
    """
    if isinstance(model, LinearModel):
        return dict(zip(model.feature_names, np.abs(model.coefficients).tolist()))
    if not isinstance(model, ForestModel) or not model.trees:
        raise UntrainedModel("importance needs a trained ForestModel or LinearModel")
    total = np.zeros(len(model.feature_names))
    for t in model.trees:
        internal = t.feature >= 0
        np.add.at(total, t.feature[internal], t.gain[internal])
    s = total.sum()
    if s > 0:
        total = total / s
    return dict(zip(model.feature_names, total.tolist()))


def rank_features(scores, k=15):
    """Top-k (feature, score) pairs, ties broken alphabetically."""
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
