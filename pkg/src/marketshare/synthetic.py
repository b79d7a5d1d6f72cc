"""Desk-scale synthetic replacement for the proprietary encounter warehouse.

Facilities are placed in geographic clusters far enough apart that no
cross-cluster pair is within 100 km.  Inside a cluster every service line
has a fixed-size monthly demand pool that is split between the members by
time-varying weights, so one member's gain is another's loss.

The weight paths of a cluster with ``m`` members are driven by
``min(m - 1, max_controls + 1)`` latent random walks whose loadings sum to
zero across members and are shared by all service lines.  With that rank,
the residual left after partialling out ``max_controls`` other members is
one-dimensional, which is what makes the planted pools visible to the
partial-correlation graph.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigInvalid
from .ingest import (AGE_BUCKETS, BASE_CLASSES, FacilityProfile, FeatureRow, MonthYear,
                     write_facts, write_profiles)

logger = logging.getLogger(__name__)

SERVICE_LINES = ("Cancer", "DigestiveHealth", "Heart", "Neuroscience", "Orthopedics",
                 "Unmapped", "WomenandChildren", "exisct", "AllOther")
PAYOR_GROUPS = ("commercialPrivateIndemPPO", "DepartmentofDefense", "DeptofVeteransAffairs",
                "HMOManagedCare", "HealthExchange", "IndianHealthServiceofTribe",
                "KaiserPermanente", "MedicaidFeeforService", "MedicaidManagedCare",
                "MedicareFeeforService", "MedicareManagedCare", "CharityCare",
                "OtherGovernment", "PremeraBlueCross", "Regence", "SelfPay",
                "WorkerCompensation")
SERVICE_AREAS = ("WA_MT SE WA", "PGTSND KING", "OR SW WA", "WA-MT INWA", "PGTSND SOUTH",
                 "PGTSND NORTH")
HOSPITAL_TYPES = ("Acute Care Hospitals", "Critical Access Hospitals", "Childrens",
                  "Psychiatric")
OWNERSHIPS = ("Voluntary non-profit - Private", "Voluntary non-profit - Church",
              "Government - Hospital District or Authority", "Proprietary",
              "Government - State")
RATING_COLUMNS = ("phyavgrate", "nurse_pos_perc", "nurse_neg_perc", "phys_pos_perc",
                  "phys_neg_perc", "nursecare_topbox")

_KM_PER_DEG_LAT = 111.32
_CLUSTER_SPACING_KM = 180.0
_JITTER_KM = 15.0


@dataclass(frozen=True)
class SyntheticConfig:
    n_facilities: int = 30
    n_months: int = 27
    n_service_lines: int = 9
    n_clusters: int = 5
    noise_scale: float = 0.0005
    seed: int = 0
    start_year: int = 2020
    start_month: int = 1
    max_controls: int = 3
    tuples_per_cell: int = 8

    def validate(self):
        if self.n_clusters < 1:
            raise ConfigInvalid("n_clusters must be >= 1")
        if self.n_facilities < 2 * self.n_clusters:
            raise ConfigInvalid("n_facilities must be >= 2 * n_clusters")
        if self.n_months < 27:
            raise ConfigInvalid("n_months must be >= 27 (24 train + 3 test)")
        if not 1 <= self.n_service_lines <= len(SERVICE_LINES):
            raise ConfigInvalid(f"n_service_lines must be in 1..{len(SERVICE_LINES)}")
        if self.noise_scale < 0:
            raise ConfigInvalid("noise_scale must be >= 0")
        if self.tuples_per_cell < 1 or self.max_controls < 0:
            raise ConfigInvalid("tuples_per_cell >= 1 and max_controls >= 0 required")

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigInvalid(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class SyntheticData:
    facts: pd.DataFrame
    profiles: list
    ground_truth: dict
    config: SyntheticConfig
    months: list = field(default_factory=list)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_facts(out / "encounters.csv", self.facts)
        write_profiles(out / "facilities.csv", self.profiles)
        with open(out / "ground_truth_clusters.json", "w", encoding="utf-8") as fh:
            json.dump(self.ground_truth, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _cluster_centers(n_clusters):
    cols = math.ceil(math.sqrt(n_clusters))
    centers = []
    lat0, lon0 = 45.6, -123.6
    for c in range(n_clusters):
        row, col = divmod(c, cols)
        lat = lat0 + row * _CLUSTER_SPACING_KM / _KM_PER_DEG_LAT
        if lat > 85:
            raise ConfigInvalid("too many clusters to place on the grid")
        lon_step = _CLUSTER_SPACING_KM / (_KM_PER_DEG_LAT * math.cos(math.radians(lat + 1.0)))
        lon = lon0 + col * lon_step
        lon = (lon + 180.0) % 360.0 - 180.0
        centers.append((lat, lon))
    return centers


def _share_loadings(rng, m, rank):
    """Orthonormal loadings whose columns sum to zero across members."""
    a = rng.normal(size=(m, rank))
    a -= a.mean(axis=0)
    q, _ = np.linalg.qr(a)
    return q[:, :rank]


def _weight_paths(rng, base, loadings, n_months):
    rank = loadings.shape[1]
    walk = np.cumsum(rng.normal(size=(n_months, rank)), axis=0)
    walk -= walk.mean(axis=0)
    sd = walk.std(axis=0)
    walk /= np.where(sd > 0, sd, 1.0)
    swing = walk @ loadings.T
    amp = 0.5 * base.min() / max(np.abs(swing).max(), 1e-12)
    return base + amp * swing


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticData:
    """Build encounter facts, facility profiles and the planted cluster map."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, nc, T = cfg.n_facilities, cfg.n_clusters, cfg.n_months
    service_lines = SERVICE_LINES[: cfg.n_service_lines]
    start = MonthYear(cfg.start_year, cfg.start_month)
    months = [start.add_months(t) for t in range(T)]

    ids = [f"fac{i + 1:02d}" if n < 100 else f"fac{i + 1:03d}" for i in range(n)]
    order = rng.permutation(n)
    members = [sorted(ids[j] for j in block) for block in np.array_split(order, nc)]
    cluster_of = {f: c for c, block in enumerate(members) for f in block}

    profiles = {}
    for c, (clat, clon) in enumerate(_cluster_centers(nc)):
        for pos, fid in enumerate(members[c]):
            dlat = rng.uniform(-1, 1) * _JITTER_KM / _KM_PER_DEG_LAT
            dlon = rng.uniform(-1, 1) * _JITTER_KM / (_KM_PER_DEG_LAT * math.cos(math.radians(clat)))
            profiles[fid] = FacilityProfile(
                facility_id=fid,
                name=f"Facility {fid[3:]}",
                system_id=f"SYS{pos + 1:02d}",
                latitude=round(clat + dlat, 6),
                longitude=round(clon + dlon, 6),
                licensed_bed_cnt=int(rng.integers(25, 600)),
                nurse_avg_rate=round(float(rng.uniform(2.5, 5.0)), 2),
                service_area=SERVICE_AREAS[c % len(SERVICE_AREAS)],
                hospital_type=HOSPITAL_TYPES[int(rng.integers(len(HOSPITAL_TYPES)))],
                ownership=OWNERSHIPS[int(rng.integers(len(OWNERSHIPS)))],
                is_covid=bool(rng.random() < 0.6),
                emergency_services=bool(rng.random() < 0.8),
            )

    # monthly totals per (facility, service line)
    totals = {}
    for c, block in enumerate(members):
        m = len(block)
        rank = min(m - 1, cfg.max_controls + 1)
        base = rng.dirichlet(np.full(m, 8.0))
        loadings = _share_loadings(rng, m, rank)
        for sl in service_lines:
            pool = rng.uniform(1500.0, 6000.0) * m
            w = _weight_paths(rng, base, loadings, T)
            noise = rng.normal(scale=cfg.noise_scale * pool / m, size=w.shape)
            counts = np.clip(np.rint(pool * w + noise), 0, None).astype(np.int64)
            for i, fid in enumerate(block):
                totals[(fid, sl)] = counts[:, i]

    # per-facility dimension vocabularies
    drg_pool = [f"DRG{k:03d}" for k in range(1, 41)]
    vocab = {}
    for c, block in enumerate(members):
        cluster_zips = [f"9{8 + c // 100}{c % 100:02d}{k}" for k in range(10)] + \
                       [f"99{c % 100:02d}{k}" for k in range(10)]
        for fid in block:
            vocab[fid] = {
                "base_class": (BASE_CLASSES, rng.dirichlet([4.0, 3.0, 6.0])),
                "payor_group": (PAYOR_GROUPS, rng.dirichlet(np.full(len(PAYOR_GROUPS), 0.8))),
                "age_bucket": (AGE_BUCKETS, rng.dirichlet(np.full(len(AGE_BUCKETS), 2.0))),
                "zip_code": (cluster_zips, rng.dirichlet(np.full(len(cluster_zips), 0.6))),
                "physician_id": ([f"PHY{fid[3:]}{k:02d}" for k in range(25)],
                                 rng.dirichlet(np.full(25, 0.7))),
                "drg_code": (drg_pool, rng.dirichlet(np.full(len(drg_pool), 0.5))),
            }
    rating_base = {fid: rng.uniform(2.0, 4.5, size=len(RATING_COLUMNS)) for fid in ids}

    dims = ("base_class", "payor_group", "age_bucket", "zip_code", "physician_id", "drg_code")
    records = []
    for fid in ids:
        voc = vocab[fid]
        for t, mon in enumerate(months):
            ratings = np.clip(rating_base[fid] + rng.normal(scale=0.25, size=len(RATING_COLUMNS)),
                              0.0, 5.0).round(3)
            for sl in service_lines:
                total = int(totals[(fid, sl)][t])
                draws = [rng.choice(len(voc[d][0]), size=cfg.tuples_per_cell, p=voc[d][1])
                         for d in dims]
                tuples = sorted(set(zip(*(map(int, col) for col in draws))))
                split = rng.multinomial(total, rng.dirichlet(np.ones(len(tuples))))
                for tup, cnt in zip(tuples, split):
                    if cnt == 0:
                        continue
                    rec = {"facility_id": fid, "year": mon.year, "month": mon.month,
                           "service_line": sl}
                    for d, k in zip(dims, tup):
                        rec[d] = voc[d][0][k]
                    rec["count"] = int(cnt)
                    rec.update(zip(RATING_COLUMNS, ratings.tolist()))
                    records.append(rec)
    facts = pd.DataFrame.from_records(records)
    logger.info("synthesized %d fact rows for %d facilities x %d months",
                len(facts), n, T)
    return SyntheticData(
        facts=facts,
        profiles=[profiles[f] for f in ids],
        ground_truth={f: cluster_of[f] for f in ids},
        config=cfg,
        months=months,
    )


def make_nonlinear_panel(seed, n_facilities=20, n_months=27, n_features=6, noise=1.0):
    """Facility-month rows whose target is a thresholded, non-additive function.

    Used to check that tree ensembles beat the linear baseline where they
    should.  Targets stay inside [5, 95].
    """
    rng = np.random.default_rng(seed)
    start = MonthYear(2020, 1)
    rows = []
    for i in range(n_facilities):
        fid = f"fac{i + 1:02d}"
        level = rng.uniform(0, 1, size=n_features)
        for t in range(n_months):
            x = np.clip(level + rng.normal(scale=0.15, size=n_features), 0, 1)
            y = (15.0 + 45.0 * (x[0] > 0.5) * (x[1] > 0.4)
                 + 20.0 * np.sin(np.pi * x[2]) ** 2 + 10.0 * x[3] * (x[4] > 0.5)
                 + rng.normal(scale=noise))
            rows.append(FeatureRow(
                facility_id=fid, month=start.add_months(t),
                features={f"x{j}": float(x[j]) for j in range(n_features)},
                target_market_share=float(np.clip(y, 5.0, 95.0))))
    return rows


def config_dict(cfg):
    return asdict(cfg)
