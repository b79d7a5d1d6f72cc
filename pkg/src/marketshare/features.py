"""Facility-month feature engineering and market-share targets."""
from __future__ import annotations

import logging

import numpy as np
import pandas as pd

from .competitors import OVERALL, distance_matrix
from .errors import EmptyFacts, IngestError
from .ingest import FACT_COLUMNS, FeatureRow, MonthYear, facts_frame

logger = logging.getLogger(__name__)

_KEY = ["facility_id", "year", "month"]
_BASE_CLASS_ABBR = {"ED": "ED", "Inpatient": "IP", "Outpatient": "OP"}
NEAR_KM = 10.0


def _pivot_counts(df, column, prefix):
    p = df.pivot_table(index=_KEY, columns=column, values="count", aggfunc="sum", fill_value=0)
    p = p.reindex(sorted(p.columns), axis=1)
    p.columns = [f"{prefix}{c}" for c in p.columns]
    return p


def _ranked(df, column, prefix, top_n):
    """Counts of the top-n values of ``column`` per facility-month, descending."""
    g = df.groupby(_KEY + [column], sort=True)["count"].sum().reset_index()
    g = g.sort_values(_KEY + ["count", column], ascending=[True, True, True, False, True],
                      kind="mergesort")
    g["rank"] = g.groupby(_KEY).cumcount() + 1
    g = g[g["rank"] <= top_n]
    p = g.pivot_table(index=_KEY, columns="rank", values="count", fill_value=0)
    p = p.reindex(columns=range(1, top_n + 1), fill_value=0)
    p.columns = [f"{prefix}{r}" for r in p.columns]
    return p


def _one_hot(values, prefix, vocab):
    return {f"{prefix}{v}": float(values == v) for v in vocab}


def engineer_features(facts, profiles, top_n=10):
    """One FeatureRow per facility-month with a fixed, sorted column layout.

    Targets are left unset; see :func:`compute_market_share`.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    df = facts_frame(facts)
    if df.empty:
        raise EmptyFacts("no encounter facts to engineer")
    prof = {p.facility_id: p for p in profiles}
    missing = sorted(set(df["facility_id"]) - set(prof))
    if missing:
        raise IngestError(f"facilities without a profile: {missing}")

    total = df.groupby(_KEY)["count"].sum().rename("facencnt").to_frame()
    parts = [total,
             _pivot_counts(df, "service_line", "cpsins_"),
             _pivot_counts(df, "payor_group", "pyr_"),
             _pivot_counts(df, "age_bucket", "age")]

    base = _pivot_counts(df, "base_class", "")
    denom = total["facencnt"].where(total["facencnt"] > 0, 1)
    perc = base.div(denom, axis=0) * 100.0
    perc.columns = [f"baseclass_perc_{_BASE_CLASS_ABBR.get(c, c)}" for c in base.columns]
    parts.append(perc)

    parts.append(_ranked(df, "zip_code", "zip_rank", top_n))
    parts.append(_ranked(df, "physician_id", "physician_rank", top_n))
    parts.append(_ranked(df, "drg_code", "drg_rank", top_n))

    phys = df.groupby(_KEY + ["physician_id"])["count"].sum()
    phys = phys[phys > 0].reset_index()
    parts.append(phys.groupby(_KEY).agg(
        TotalPhysicians=("physician_id", "size"),
        TotPhysWithAtleast30Encs=("count", lambda c: int((c >= 30).sum()))))

    rating_cols = sorted(c for c in df.columns if c not in FACT_COLUMNS)
    if rating_cols:
        parts.append(df.groupby(_KEY)[rating_cols].mean())

    table = pd.concat(parts, axis=1).fillna(0.0).sort_index()

    dist = distance_matrix(list(prof.values()))
    near = {f: sum(1 for g in prof if g != f and dist[(f, g)] <= NEAR_KM) for f in prof}
    sa_vocab = sorted({p.service_area for p in prof.values()})
    ht_vocab = sorted({p.hospital_type for p in prof.values()})
    own_vocab = sorted({p.ownership for p in prof.values()})

    static = {}
    for f, p in sorted(prof.items()):
        s = {"LicensedBedCnt": float(p.licensed_bed_cnt),
             "nursavgrate": float(p.nurse_avg_rate),
             "Is_Covid": float(p.is_covid),
             "EmergencyServices": float(p.emergency_services),
             "numoffac0to10km": float(near[f])}
        s.update(_one_hot(p.service_area, "sa_", sa_vocab))
        s.update(_one_hot(p.hospital_type, "htype_", ht_vocab))
        s.update(_one_hot(p.ownership, "hospownd_", own_vocab))
        static[f] = s

    dynamic_cols = [str(c) for c in table.columns]
    values = table.to_numpy(dtype=float)
    rows = []
    for (fid, year, month), vec in zip(table.index, values):
        feats = dict(zip(dynamic_cols, vec.tolist()))
        feats.update(static[fid])
        rows.append(FeatureRow(facility_id=fid, month=MonthYear(int(year), int(month)),
                               features=feats))
    return rows


def monthly_totals(facts, service_line=None):
    """facility -> {MonthYear: encounters}, optionally restricted to one line."""
    df = facts_frame(facts)
    if service_line is not None and service_line != OVERALL:
        df = df[df["service_line"] == service_line]
    g = df.groupby(_KEY)["count"].sum()
    out = {}
    for (fid, year, month), c in g.items():
        out.setdefault(fid, {})[MonthYear(int(year), int(month))] = int(c)
    return out


def scope_series(facts, months, facilities=None):
    """scope -> facility -> encounter series over ``months`` (zero-filled).

    Scopes are every service line in the facts plus OVERALL.
    """
    df = facts_frame(facts)
    pos = {(m.year, m.month): i for i, m in enumerate(months)}
    if facilities is None:
        facilities = sorted(set(df["facility_id"]))
    by_sl = df.groupby(["service_line"] + _KEY)["count"].sum()
    out = {OVERALL: {f: np.zeros(len(months)) for f in facilities}}
    for (sl, fid, year, month), c in by_sl.items():
        i = pos.get((int(year), int(month)))
        if i is None or fid not in out[OVERALL]:
            continue
        out.setdefault(sl, {f: np.zeros(len(months)) for f in facilities})
        out[sl][fid][i] += c
        out[OVERALL][fid][i] += c
    return dict(sorted(out.items()))


def compute_market_share(facts, components, mode="component"):
    """Market share target per (facility, month), in percent.

    ``mode="component"`` divides a facility's encounters by the total of its
    component's members for the month; ``mode="statewide"`` divides by the
    total over every facility.  Months where the denominator is zero are
    dropped and logged.
    """
    if mode not in ("component", "statewide"):
        raise ValueError(f"unknown market share mode {mode!r}")
    totals = monthly_totals(facts)
    if mode == "statewide":
        components = [set(totals)]
    comp_of = {}
    for i, comp in enumerate(components):
        for f in comp:
            if f in comp_of:
                raise ValueError(f"facility {f} is in more than one component")
            comp_of[f] = i
    unassigned = sorted(set(totals) - set(comp_of))
    if unassigned:
        raise ValueError(f"facilities with facts but no component: {unassigned}")

    denom = {}
    for f, by_month in totals.items():
        for m, c in by_month.items():
            key = (comp_of[f], m)
            denom[key] = denom.get(key, 0) + c
    targets = {}
    for f in sorted(totals):
        for m in sorted(totals[f]):
            d = denom[(comp_of[f], m)]
            if d == 0:
                logger.warning("zero component total for %s in %s; row dropped", f, m)
                continue
            targets[(f, m)] = 100.0 * totals[f][m] / d
    return targets


def attach_targets(rows, targets):
    """Copy rows that have a target, setting ``target_market_share``."""
    out = []
    for r in rows:
        t = targets.get((r.facility_id, r.month))
        if t is None:
            logger.info("no target for %s %s; row dropped", r.facility_id, r.month)
            continue
        out.append(FeatureRow(r.facility_id, r.month, dict(r.features), float(t)))
    return out


def rows_to_frame(rows):
    """Flat table: facility_id, year, month, target, then features in order."""
    if not rows:
        return pd.DataFrame(columns=["facility_id", "year", "month", "target_market_share"])
    names = list(rows[0].features)
    data = {"facility_id": [r.facility_id for r in rows],
            "year": [r.month.year for r in rows],
            "month": [r.month.month for r in rows],
            "target_market_share": [r.target_market_share for r in rows]}
    feats = pd.DataFrame([[r.features[n] for n in names] for r in rows], columns=names)
    return pd.concat([pd.DataFrame(data), feats], axis=1)


def frame_to_rows(df):
    meta = ["facility_id", "year", "month", "target_market_share"]
    names = [c for c in df.columns if c not in meta]
    rows = []
    for rec in df.to_dict("records"):
        t = rec.get("target_market_share")
        rows.append(FeatureRow(
            facility_id=str(rec["facility_id"]),
            month=MonthYear(int(rec["year"]), int(rec["month"])),
            features={n: float(rec[n]) for n in names},
            target_market_share=None if t is None or pd.isna(t) else float(t)))
    return rows


def write_feature_table(path, rows):
    rows_to_frame(rows).to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def read_feature_table(path):
    return frame_to_rows(pd.read_csv(path, dtype={"facility_id": str},
                                     float_precision="round_trip"))
