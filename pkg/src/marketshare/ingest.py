"""Fact/dimension records and their CSV surfaces.

``encounters.csv`` holds one aggregated encounter count per facility, month
and dimension tuple.  Any column beyond the documented schema is read as an
optional numeric rating (sentiment scores, survey ratings) attached to the
row; ratings are averaged per facility-month during feature engineering.
"""
from __future__ import annotations

import csv
import functools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from .errors import DuplicateKey, IngestError, MalformedRow

logger = logging.getLogger(__name__)

BASE_CLASSES = ("ED", "Inpatient", "Outpatient")
AGE_BUCKETS = ("0to10", "10to20", "20to30", "30to40", "40to50",
               "50to60", "60to70", "70to80", "80Plus")

FACT_COLUMNS = ("facility_id", "year", "month", "service_line", "base_class",
                "payor_group", "age_bucket", "zip_code", "physician_id",
                "drg_code", "count")
PROFILE_COLUMNS = ("facility_id", "name", "system_id", "latitude", "longitude",
                   "licensed_bed_cnt", "nurse_avg_rate", "service_area",
                   "hospital_type", "ownership", "is_covid", "emergency_services")
# dimension columns that, with facility and month, make up a fact's key
DIMENSIONS = ("service_line", "base_class", "payor_group", "age_bucket",
              "zip_code", "physician_id", "drg_code")


@functools.total_ordering
@dataclass(frozen=True)
class MonthYear:
    year: int
    month: int

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise ValueError(f"month must be in 1..12, got {self.month}")

    def __lt__(self, other):
        if not isinstance(other, MonthYear):
            return NotImplemented
        return (self.year, self.month) < (other.year, other.month)

    @property
    def ordinal(self):
        """Months since year 0; handy for arithmetic and sorting."""
        return self.year * 12 + (self.month - 1)

    @classmethod
    def from_ordinal(cls, n):
        return cls(n // 12, n % 12 + 1)

    def add_months(self, n):
        return MonthYear.from_ordinal(self.ordinal + n)

    @classmethod
    def parse(cls, text):
        year, month = text.split("-")
        return cls(int(year), int(month))

    def __str__(self):
        return f"{self.year:04d}-{self.month:02d}"


@dataclass(frozen=True)
class EncounterFact:
    facility_id: str
    month: MonthYear
    service_line: str
    base_class: str
    payor_group: str
    age_bucket: str
    zip_code: str
    physician_id: str
    drg_code: str
    count: int
    ratings: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def key(self):
        return (self.facility_id, self.month) + tuple(getattr(self, d) for d in DIMENSIONS)


@dataclass(frozen=True)
class FacilityProfile:
    facility_id: str
    name: str
    system_id: str
    latitude: float
    longitude: float
    licensed_bed_cnt: int
    nurse_avg_rate: float
    service_area: str
    hospital_type: str
    ownership: str
    is_covid: bool
    emergency_services: bool

    def __post_init__(self):
        if abs(self.latitude) > 90 or abs(self.longitude) > 180:
            raise ValueError(f"{self.facility_id}: coordinates out of range")
        if self.licensed_bed_cnt < 1:
            raise ValueError(f"{self.facility_id}: licensed_bed_cnt must be >= 1")


@dataclass
class FeatureRow:
    facility_id: str
    month: MonthYear
    features: dict
    target_market_share: float | None = None


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "t", "yes", "y"):
        return True
    if t in ("0", "false", "f", "no", "n", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _check_header(header, required, path):
    if header is None:
        raise MalformedRow(1, f"{path}: empty file, header row is mandatory")
    missing = [c for c in required if c not in header]
    if missing:
        raise MalformedRow(1, f"missing columns {missing}")


def load_facts(path):
    """Parse ``encounters.csv`` into a list of :class:`EncounterFact`.

    Raises MalformedRow (with the 1-based file line number) on bad types or a
    negative count and DuplicateKey when a (facility, month, dimensions)
    tuple repeats.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"input file not found: {path}")
    facts = []
    seen = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, FACT_COLUMNS, path)
        extra = [c for c in reader.fieldnames if c not in FACT_COLUMNS]
        for lineno, rec in enumerate(reader, start=2):
            try:
                month = MonthYear(int(rec["year"]), int(rec["month"]))
                count = int(rec["count"])
                ratings = {c: float(rec[c]) for c in extra if rec[c] not in ("", None)}
            except (TypeError, ValueError) as exc:
                raise MalformedRow(lineno, str(exc)) from None
            if count < 0:
                raise MalformedRow(lineno, f"negative count {count}")
            if rec["base_class"] not in BASE_CLASSES:
                raise MalformedRow(lineno, f"unknown base_class {rec['base_class']!r}")
            fact = EncounterFact(
                facility_id=rec["facility_id"], month=month,
                service_line=rec["service_line"], base_class=rec["base_class"],
                payor_group=rec["payor_group"], age_bucket=rec["age_bucket"],
                zip_code=rec["zip_code"], physician_id=rec["physician_id"],
                drg_code=rec["drg_code"], count=count, ratings=ratings)
            if fact.key in seen:
                raise DuplicateKey(lineno, fact.key)
            seen[fact.key] = lineno
            facts.append(fact)
    logger.info("loaded %d facts from %s", len(facts), path)
    return facts


def facts_frame(facts):
    """Columnar view of facts (a list of EncounterFact or an existing frame)."""
    if isinstance(facts, pd.DataFrame):
        return facts
    records = []
    for f in facts:
        rec = {"facility_id": f.facility_id, "year": f.month.year, "month": f.month.month}
        rec.update({d: getattr(f, d) for d in DIMENSIONS})
        rec["count"] = f.count
        rec.update(f.ratings)
        records.append(rec)
    df = pd.DataFrame.from_records(records)
    if df.empty:
        df = pd.DataFrame(columns=list(FACT_COLUMNS))
    return df


def frame_to_facts(df):
    extra = [c for c in df.columns if c not in FACT_COLUMNS]
    facts = []
    for rec in df.to_dict("records"):
        facts.append(EncounterFact(
            facility_id=str(rec["facility_id"]),
            month=MonthYear(int(rec["year"]), int(rec["month"])),
            count=int(rec["count"]),
            ratings={c: float(rec[c]) for c in extra},
            **{d: str(rec[d]) for d in DIMENSIONS}))
    return facts


def write_facts(path, facts):
    df = facts_frame(facts)
    cols = list(FACT_COLUMNS) + [c for c in df.columns if c not in FACT_COLUMNS]
    df[cols].to_csv(path, index=False, lineterminator="\n")


def load_profiles(path):
    path = Path(path)
    if not path.exists():
        raise IngestError(f"input file not found: {path}")
    profiles = []
    seen = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, PROFILE_COLUMNS, path)
        for lineno, rec in enumerate(reader, start=2):
            try:
                prof = FacilityProfile(
                    facility_id=rec["facility_id"], name=rec["name"],
                    system_id=rec["system_id"],
                    latitude=float(rec["latitude"]), longitude=float(rec["longitude"]),
                    licensed_bed_cnt=int(rec["licensed_bed_cnt"]),
                    nurse_avg_rate=float(rec["nurse_avg_rate"]),
                    service_area=rec["service_area"], hospital_type=rec["hospital_type"],
                    ownership=rec["ownership"], is_covid=_parse_bool(rec["is_covid"]),
                    emergency_services=_parse_bool(rec["emergency_services"]))
            except (TypeError, ValueError) as exc:
                raise MalformedRow(lineno, str(exc)) from None
            if prof.facility_id in seen:
                raise DuplicateKey(lineno, (prof.facility_id,))
            seen.add(prof.facility_id)
            profiles.append(prof)
    return profiles


def write_profiles(path, profiles):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_COLUMNS)
        for p in profiles:
            w.writerow([p.facility_id, p.name, p.system_id, repr(p.latitude),
                        repr(p.longitude), p.licensed_bed_cnt, repr(p.nurse_avg_rate),
                        p.service_area, p.hospital_type, p.ownership,
                        int(p.is_covid), int(p.emergency_services)])


def load_ground_truth(path):
    with open(path, encoding="utf-8") as fh:
        return {str(k): int(v) for k, v in json.load(fh).items()}
