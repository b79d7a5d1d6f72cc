"""Competitor pools from distance-filtered partial-correlation graphs.

Steps: pairwise great-circle distances, partial correlation of monthly
encounter series per scope (each service line and OVERALL), threshold and
business-rule filtering, graph construction, connected components, and
volume-ranked competitor lists per facility.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np

from .errors import DegenerateSeries, DuplicateEdge, MissingVolume

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
OVERALL = "OVERALL"
# residual variance (on the unit-variance scale) below which a series is
# treated as fully explained by the controls
_DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class GeoPoint:
    latitude: float
    longitude: float

    def __post_init__(self):
        if abs(self.latitude) > 90 or abs(self.longitude) > 180:
            raise ValueError(f"invalid coordinates ({self.latitude}, {self.longitude})")


@dataclass(frozen=True)
class Thresholds:
    rho_hi: float = 0.8
    rho_lo: float = -0.7
    max_km: float = 100.0

    def __post_init__(self):
        if not self.rho_lo < 0 < self.rho_hi:
            raise ValueError("thresholds require rho_lo < 0 < rho_hi")
        if self.max_km < 0:
            raise ValueError("max_km must be non-negative")

    def passes(self, rho):
        return rho > self.rho_hi or rho < self.rho_lo


@dataclass(frozen=True)
class CorrelationEdge:
    a: str
    b: str
    scope: str
    rho: float
    distance_km: float

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("self-loop edge")
        if not -1 - 1e-12 <= self.rho <= 1 + 1e-12:
            raise ValueError(f"rho out of range: {self.rho}")

    @property
    def pair(self):
        return tuple(sorted((self.a, self.b)))


@dataclass
class FacilityGraph:
    scope: str
    nodes: set = field(default_factory=set)
    # sorted (a, b) pair -> CorrelationEdge
    edges: dict = field(default_factory=dict)

    def neighbors(self, node):
        out = []
        for (a, b), e in self.edges.items():
            if a == node:
                out.append((b, e))
            elif b == node:
                out.append((a, e))
        return out


@dataclass
class CompetitorAssignment:
    facility_id: str
    service_line: str
    month: object
    competitors: list

    def to_json(self):
        return {"service_line": self.service_line, "facility": self.facility_id,
                "month": str(self.month),
                "competitors": [[cid, w] for cid, w in self.competitors]}

    def __str__(self):
        inner = ", ".join(f"({cid}, {w:.5f})" for cid, w in self.competitors)
        return f"{self.service_line}\t{self.facility_id}\t{self.month}\t{self.facility_id} → [{inner}]"


def haversine_km(p, q):
    lat1, lon1 = math.radians(p.latitude), math.radians(p.longitude)
    lat2, lon2 = math.radians(q.latitude), math.radians(q.longitude)
    h = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def distance_matrix(profiles):
    """Symmetric km distances keyed by (id_a, id_b) for every ordered pair."""
    pts = {p.facility_id: GeoPoint(p.latitude, p.longitude) for p in profiles}
    dist = {}
    for a, b in combinations(sorted(pts), 2):
        d = haversine_km(pts[a], pts[b])
        dist[(a, b)] = dist[(b, a)] = d
    return dist


def partial_correlation(x, y, controls=()):
    """Partial correlation of ``x`` and ``y`` given the ``controls`` series.

    Works on the correlation matrix R of [x, y, *controls].  The (x, y) block
    of the precision matrix R^-1 is the inverse of the Schur complement
    S = R_xy,xy - R_xy,Z R_ZZ^-1 R_Z,xy, and -P_xy / sqrt(P_xx P_yy) reduces
    to S_xy / sqrt(S_xx S_yy).  R_ZZ falls back to a pseudo-inverse when
    singular.  Raises DegenerateSeries when either series has zero variance
    before or after removing the controls.
    """
    data = np.vstack([np.asarray(x, float), np.asarray(y, float)]
                     + [np.asarray(z, float) for z in controls])
    n = data.shape[1]
    if n < len(controls) + 3:
        raise ValueError(f"need at least {len(controls) + 3} observations, got {n}")
    sd = data.std(axis=1)
    if np.any(sd == 0):
        raise DegenerateSeries("constant input series")
    centered = data - data.mean(axis=1, keepdims=True)
    unit = centered / np.linalg.norm(centered, axis=1, keepdims=True)
    corr = unit @ unit.T
    schur = corr[:2, :2]
    if len(controls):
        r_zz = corr[2:, 2:]
        r_xz = corr[:2, 2:]
        try:
            if np.linalg.cond(r_zz) > 1e12:
                raise np.linalg.LinAlgError
            inv_zz = np.linalg.inv(r_zz)
        except np.linalg.LinAlgError:
            inv_zz = np.linalg.pinv(r_zz, hermitian=True)
        schur = schur - r_xz @ inv_zz @ r_xz.T
    if schur[0, 0] <= _DEGENERATE_TOL or schur[1, 1] <= _DEGENERATE_TOL:
        raise DegenerateSeries("series fully explained by controls")
    rho = schur[0, 1] / math.sqrt(schur[0, 0] * schur[1, 1])
    return float(min(1.0, max(-1.0, rho)))


def pick_controls(a, b, series, dist, max_km, max_controls=3):
    """Other in-scope facilities within ``max_km`` of either endpoint, the
    ``max_controls`` largest by total volume (ties by id)."""
    cands = [f for f in series if f not in (a, b)
             and (dist[(a, f)] <= max_km or dist[(b, f)] <= max_km)]
    cands.sort(key=lambda f: (-float(np.sum(series[f])), f))
    return cands[:max_controls]


def load_exclusions(path):
    """Exclusion list file: one ``facility_a,facility_b`` pair per line."""
    pairs = set()
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].startswith("#") or rec[0] == "facility_a":
                continue
            pairs.add(tuple(sorted((rec[0].strip(), rec[1].strip()))))
    return pairs


def correlation_edges(series_by_facility, profiles, thresholds=Thresholds(), scope=OVERALL,
                      exclusions=(), max_controls=3, dist=None):
    """Threshold-passing partial-correlation edges for one scope.

    ``series_by_facility`` maps facility id -> equal-length monthly series.
    A pair is kept iff its rho clears the thresholds, the facilities are at
    most ``max_km`` apart, belong to different systems and are not on the
    exclusion list.  Pairs whose series degenerate are skipped and logged.
    """
    prof = {p.facility_id: p for p in profiles}
    if dist is None:
        dist = distance_matrix([prof[f] for f in series_by_facility])
    excluded = {tuple(sorted(p)) for p in exclusions}
    lengths = {len(s) for s in series_by_facility.values()}
    if len(lengths) > 1:
        raise ValueError(f"series lengths differ in scope {scope}: {sorted(lengths)}")
    edges = []
    for a, b in combinations(sorted(series_by_facility), 2):
        d = dist[(a, b)]
        if d > thresholds.max_km or prof[a].system_id == prof[b].system_id:
            continue
        if (a, b) in excluded:
            continue
        ctrl = pick_controls(a, b, series_by_facility, dist, thresholds.max_km, max_controls)
        try:
            rho = partial_correlation(series_by_facility[a], series_by_facility[b],
                                      [series_by_facility[c] for c in ctrl])
        except DegenerateSeries as exc:
            logger.info("scope %s: skipped pair (%s, %s): %s", scope, a, b, exc)
            continue
        if thresholds.passes(rho):
            edges.append(CorrelationEdge(a, b, scope, rho, d))
    return edges


def build_graph(edges, scope, facilities=()):
    g = FacilityGraph(scope=scope, nodes=set(facilities))
    for e in edges:
        if e.scope != scope:
            raise ValueError(f"edge scope {e.scope!r} does not match graph scope {scope!r}")
        prev = g.edges.get(e.pair)
        if prev is not None:
            if prev.rho != e.rho:
                raise DuplicateEdge(f"pair {e.pair} submitted with rho {prev.rho} and {e.rho}")
            continue
        g.edges[e.pair] = e
        g.nodes.update(e.pair)
    return g


def connected_components(g):
    """Components of the undirected graph, each a set; sorted by smallest id."""
    adj = {v: [] for v in g.nodes}
    for a, b in g.edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = set()
    comps = []
    for start in sorted(adj):
        if start in seen:
            continue
        comp = {start}
        queue = deque([start])
        seen.add(start)
        while queue:
            v = queue.popleft()
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    comp.add(w)
                    queue.append(w)
        comps.append(comp)
    return comps


def component_index(components):
    return {f: i for i, comp in enumerate(components) for f in comp}


def extract_competitors(g, volumes, neighbor_mode="negative"):
    """Volume-ranked competitor lists for every node and month.

    ``volumes`` maps facility -> {month: encounter total}.  Competitors are
    the neighbours joined by a negative-rho edge (``neighbor_mode="all"``
    takes every neighbour), sorted by that month's volume descending with
    ties broken by id; the reported weight is |rho|.
    """
    if neighbor_mode not in ("negative", "all"):
        raise ValueError(f"unknown neighbor_mode {neighbor_mode!r}")
    for f in sorted(g.nodes):
        if f not in volumes:
            raise MissingVolume(f)
    out = []
    for f in sorted(g.nodes):
        nbrs = [(o, e) for o, e in g.neighbors(f)
                if o != f and (neighbor_mode == "all" or e.rho < 0)]
        for month in sorted(volumes[f]):
            ranked = sorted(nbrs, key=lambda oe: (-volumes[oe[0]].get(month, 0), oe[0]))
            out.append(CompetitorAssignment(
                facility_id=f, service_line=g.scope, month=month,
                competitors=[(o, abs(e.rho)) for o, e in ranked]))
    return out


def write_competitors_json(path, assignments):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([a.to_json() for a in assignments], fh, indent=1)
        fh.write("\n")


def write_edge_list(path, graphs):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scope", "node_a", "node_b", "rho", "distance_km"])
        for g in graphs:
            for (a, b), e in sorted(g.edges.items()):
                w.writerow([g.scope, a, b, repr(e.rho), repr(e.distance_km)])


def to_dot(g):
    """Graphviz text for one scope; labelled as a DAG only for reporting."""
    lines = [f'graph "DAG {g.scope}" {{']
    for v in sorted(g.nodes):
        lines.append(f'  "{v}";')
    for (a, b), e in sorted(g.edges.items()):
        lines.append(f'  "{a}" -- "{b}" [weight={e.rho:.5f}, km={e.distance_km:.1f}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def adjusted_rand_index(labels_true, labels_pred):
    """Adjusted Rand index between two labelings of the same items."""
    labels_true, labels_pred = list(labels_true), list(labels_pred)
    if len(labels_true) != len(labels_pred):
        raise ValueError("labelings differ in length")
    n = len(labels_true)
    if n < 2:
        return 1.0
    cont = Counter(zip(labels_true, labels_pred))
    a = Counter(labels_true)
    b = Counter(labels_pred)
    idx = sum(comb(c, 2) for c in cont.values())
    sa = sum(comb(c, 2) for c in a.values())
    sb = sum(comb(c, 2) for c in b.values())
    expected = sa * sb / comb(n, 2)
    top = (sa + sb) / 2.0
    if top == expected:
        return 1.0
    return (idx - expected) / (top - expected)
