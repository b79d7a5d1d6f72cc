"""Ordinary least squares baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .trees import HyperParams, check_schema

LINEAR_FORMAT = "marketshare-linear/1"
RIDGE_LAMBDA = 1e-8
_COND_LIMIT = 1e12


@dataclass
class LinearModel:
    coefficients: np.ndarray
    intercept: float
    feature_names: list
    params: HyperParams = field(default_factory=HyperParams)
    metadata: dict = field(default_factory=dict)

    label = "LR"

    def raw_predict(self, X):
        X = check_schema(X, self.feature_names)
        return X @ self.coefficients + self.intercept

    def to_dict(self):
        return {"format": LINEAR_FORMAT, "feature_names": list(self.feature_names),
                "coefficients": self.coefficients.tolist(), "intercept": self.intercept,
                "params": asdict(self.params), "metadata": dict(self.metadata)}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != LINEAR_FORMAT:
            raise ValueError(f"not a {LINEAR_FORMAT} document")
        return cls(coefficients=np.asarray(d["coefficients"], dtype=float),
                   intercept=float(d["intercept"]), feature_names=list(d["feature_names"]),
                   params=HyperParams(**d.get("params", {})), metadata=dict(d.get("metadata", {})))


def fit_linear(X, y, feature_names=None, params=HyperParams()):
    """Least squares via the normal equations on standardized columns.

    When the Gram matrix is singular (collinear or too few rows) a ridge
    term of 1e-8 is added and ``metadata["ridge"]`` records it.  Constant
    columns get a zero coefficient.
    """
    cols = getattr(X, "columns", None)
    if feature_names is None:
        feature_names = [str(c) for c in cols] if cols is not None else \
            [f"x{j}" for j in range(np.shape(X)[1])]
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    live = sd > 0
    Z = (X[:, live] - mu[live]) / sd[live]
    y_mean = y.mean()
    gram = Z.T @ Z
    rhs = Z.T @ (y - y_mean)
    ridge = 0.0
    if gram.size and (n < Z.shape[1] + 1 or np.linalg.cond(gram) > _COND_LIMIT):
        ridge = RIDGE_LAMBDA
    beta_z = np.linalg.solve(gram + ridge * np.eye(len(gram)), rhs) if gram.size else np.zeros(0)
    coef = np.zeros(d)
    coef[live] = beta_z / sd[live]
    intercept = float(y_mean - mu @ coef)
    return LinearModel(coefficients=coef, intercept=intercept, feature_names=list(feature_names),
                       params=params, metadata={"ridge": ridge, "n_rows": n})
