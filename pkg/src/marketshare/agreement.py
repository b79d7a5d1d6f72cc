"""Annotation agreement: SME scores (1-5) per competitor component."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .errors import MalformedRow, TooFewAnnotators

ABSENT = ("", "-", "NA", "na")


@dataclass
class AnnotationSheet:
    category: str
    annotators: list
    # component_id -> {annotator: score}; absent scores are simply missing
    scores: dict = field(default_factory=dict)


@dataclass
class AgreementResult:
    category: str
    component_means: dict
    annotator_means: dict
    overall: float


def load_annotation_sheet(path, category="overall facility level"):
    """Read ``component_id, annotator_1..n`` with blanks (or '-') for absent."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "component_id" or len(header) < 3:
            raise MalformedRow(1, "expected header component_id, annotator_1, annotator_2, ...")
        annotators = [h.strip() for h in header[1:]]
        scores = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or not rec[0].strip():
                continue
            comp = rec[0].strip()
            row = {}
            for ann, cell in zip(annotators, rec[1:]):
                cell = cell.strip()
                if cell in ABSENT:
                    continue
                try:
                    v = int(cell)
                except ValueError:
                    raise MalformedRow(lineno, f"score {cell!r} is not an integer") from None
                if not 1 <= v <= 5:
                    raise MalformedRow(lineno, f"score {v} outside 1..5")
                row[ann] = v
            scores[comp] = row
    return AnnotationSheet(category=category, annotators=annotators, scores=scores)


def annotation_agreement(sheet):
    """Per-component means, per-annotator means, and the mean of component means."""
    comp_means = {}
    by_annotator = {a: [] for a in sheet.annotators}
    for comp, row in sheet.scores.items():
        if len(row) < 2:
            raise TooFewAnnotators(comp, len(row))
        comp_means[comp] = sum(row.values()) / len(row)
        for a, v in row.items():
            by_annotator.setdefault(a, []).append(v)
    ann_means = {a: sum(v) / len(v) for a, v in by_annotator.items() if v}
    overall = sum(comp_means.values()) / len(comp_means) if comp_means else float("nan")
    return AgreementResult(sheet.category, comp_means, ann_means, overall)


def format_agreement(result):
    lines = [f"Annotation agreement ({result.category})", "component\tmean"]
    for comp in sorted(result.component_means, key=_natural):
        lines.append(f"{comp}\t{result.component_means[comp]:.2f}")
    lines.append("annotator\tmean")
    for a in sorted(result.annotator_means, key=_natural):
        lines.append(f"{a}\t{result.annotator_means[a]:.2f}")
    lines.append(f"Overall\t{result.overall:.2f}")
    return "\n".join(lines)


def _natural(key):
    return (0, int(key), "") if key.isdigit() else (1, 0, key)
