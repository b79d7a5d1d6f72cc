"""Independent reference implementations used only by the tests.

Each one takes a different route to the answer than the package code so that
agreement means something.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def law_of_cosines_km(lat1, lon1, lat2, lon2, radius=6371.0088):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    c = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
    return radius * math.acos(max(-1.0, min(1.0, c)))


def residual_partial_corr(x, y, controls):
    """Regress x and y on [1, Z] by least squares and correlate the residuals."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    Z = np.column_stack([np.ones(len(x))] + [np.asarray(z, float) for z in controls])
    rx = x - Z @ np.linalg.lstsq(Z, x, rcond=None)[0]
    ry = y - Z @ np.linalg.lstsq(Z, y, rcond=None)[0]
    return float(np.corrcoef(rx, ry)[0, 1])


def exhaustive_root_split(X, y, min_samples_leaf=1):
    """Try every (feature, midpoint) and return the max SSE reduction.

    Returns (gain, feature, threshold) picking the lowest feature, then the
    lowest threshold, among gains within 1e-12 * SSE of the best.
    """
    n, d = X.shape
    sse = float(np.sum((y - y.mean()) ** 2))
    cands = []
    for j in range(d):
        vals = np.unique(X[:, j])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = lo + (hi - lo) / 2.0
            left = X[:, j] <= thr
            nl, nr = left.sum(), (~left).sum()
            if nl < min_samples_leaf or nr < min_samples_leaf:
                continue
            child = (np.sum((y[left] - y[left].mean()) ** 2)
                     + np.sum((y[~left] - y[~left].mean()) ** 2))
            cands.append((sse - child, j, thr))
    if not cands:
        return None
    best = max(c[0] for c in cands)
    tol = 1e-12 * sse
    if best <= tol:
        return None
    tied = [c for c in cands if c[0] >= best - tol]
    return min(tied, key=lambda c: (c[1], c[2]))


def reachability_partition(nodes, edges):
    """Components via boolean transitive closure (Warshall)."""
    nodes = sorted(nodes)
    idx = {v: i for i, v in enumerate(nodes)}
    n = len(nodes)
    R = np.eye(n, dtype=bool)
    for a, b in edges:
        R[idx[a], idx[b]] = R[idx[b], idx[a]] = True
    for k in range(n):
        R |= R[:, [k]] & R[[k], :]
    return {frozenset(nodes[j] for j in np.nonzero(R[i])[0]) for i in range(n)}


def permutation_shapley(f, x, background):
    """Shapley values by averaging marginal contributions over all orderings.

    The value of a coalition S is the mean of f over background rows with the
    S columns replaced by x.  Exponential in d; keep d <= 6.
    """
    x = np.asarray(x, float)
    B = np.asarray(background, float)
    d = len(x)

    def v(S):
        Z = B.copy()
        if S:
            Z[:, list(S)] = x[list(S)]
        return float(np.mean(f(Z)))

    cache = {}
    phi = np.zeros(d)
    perms = list(itertools.permutations(range(d)))
    for order in perms:
        S = ()
        for j in order:
            key0 = frozenset(S)
            key1 = frozenset(S + (j,))
            if key0 not in cache:
                cache[key0] = v(tuple(sorted(key0)))
            if key1 not in cache:
                cache[key1] = v(tuple(sorted(key1)))
            phi[j] += cache[key1] - cache[key0]
            S = S + (j,)
    return phi / len(perms), cache[frozenset()]
