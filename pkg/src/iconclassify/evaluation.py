"""Hierarchical evaluation of predicted Iconclass codes.

A prediction is compared to ground truth level by level: M leading levels
agree, the prediction has P levels, the truth has G. Everything else
(precision/recall/F1, match typing, weighted scores, level accuracy,
truncation sweeps) is derived from those three counts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

from .errors import ManifestParseError
from .taxonomy import IconclassCode, common_depth, truncate_code


class MatchType(Enum):
    """Prediction-vs-truth relationship; the enum value is the base score."""

    FULL = 100
    EXTRA = 90
    PARTIAL_A = 85  # too shallow, but every predicted level correct
    PARTIAL_B = 70  # too shallow and partly wrong
    PARTIAL_C = 60  # deep enough (or deeper), partly wrong
    NO_MATCH = 0

    @property
    def base_score(self) -> int:
        return self.value


# half of the base score is the floor for partial matches
_FLOORS = {
    MatchType.PARTIAL_A: 42.5,
    MatchType.PARTIAL_B: 35.0,
    MatchType.PARTIAL_C: 30.0,
}


@dataclass(frozen=True)
class LevelComparison:
    matched: int
    pred_levels: int
    gt_levels: int

    def __post_init__(self):
        if self.pred_levels < 1 or self.gt_levels < 1:
            raise ValueError("codes have at least one level")
        if not 0 <= self.matched <= min(self.pred_levels, self.gt_levels):
            raise ValueError(
                f"matched {self.matched} out of range for "
                f"P={self.pred_levels}, G={self.gt_levels}"
            )


def compare(pred: IconclassCode, gt: IconclassCode) -> LevelComparison:
    return LevelComparison(
        matched=common_depth(pred, gt),
        pred_levels=pred.levels,
        gt_levels=gt.levels,
    )


def hierarchical_metrics(c: LevelComparison) -> tuple[float, float, float]:
    """(precision, recall, f1): correct levels over predicted levels,
    correct levels over ground-truth levels, and their harmonic mean
    (0 when both are 0)."""
    precision = c.matched / c.pred_levels
    recall = c.matched / c.gt_levels
    if precision + recall == 0:
        return precision, recall, 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def classify_match(c: LevelComparison) -> MatchType:
    m, p, g = c.matched, c.pred_levels, c.gt_levels
    if m == p == g:
        return MatchType.FULL
    if m == g and p > g:
        return MatchType.EXTRA
    if m == 0:
        return MatchType.NO_MATCH
    if p < g and m == p:
        return MatchType.PARTIAL_A
    if p < g and 0 < m < p:
        return MatchType.PARTIAL_B
    if p >= g and 0 < m < p:
        return MatchType.PARTIAL_C
    raise AssertionError(f"unreachable comparison {c}")  # the cases above are total


def weighted_score(c: LevelComparison) -> float:
    """Base score scaled by how much of the hierarchy was matched, with a
    floor at half the base score for partial matches."""
    match = classify_match(c)
    m, p, g = c.matched, c.pred_levels, c.gt_levels
    if match is MatchType.FULL:
        return 100.0
    if match is MatchType.EXTRA:
        return 90.0
    if match is MatchType.NO_MATCH:
        return 0.0
    if match is MatchType.PARTIAL_A:
        raw = match.base_score * (m / g)
    else:
        # partly wrong predictions also pay for their incorrect levels
        raw = match.base_score * (m / g) * (m / p)
    return max(raw, _FLOORS[match])


@dataclass(frozen=True)
class EvalRecord:
    image_id: str
    comparison: LevelComparison
    precision: float
    recall: float
    f1: float
    match_type: MatchType
    weighted: float
    group: Optional[str] = None


def evaluate_pair(
    image_id: str,
    pred: IconclassCode,
    gt: IconclassCode,
    group: Optional[str] = None,
) -> EvalRecord:
    c = compare(pred, gt)
    precision, recall, f1 = hierarchical_metrics(c)
    return EvalRecord(
        image_id=image_id,
        comparison=c,
        precision=precision,
        recall=recall,
        f1=f1,
        match_type=classify_match(c),
        weighted=weighted_score(c),
        group=group,
    )


_MATCH_ORDER = (
    MatchType.EXTRA,
    MatchType.FULL,
    MatchType.PARTIAL_A,
    MatchType.PARTIAL_B,
    MatchType.PARTIAL_C,
    MatchType.NO_MATCH,
)


@dataclass
class MethodReport:
    label: str
    count: int
    avg_weighted: float
    avg_precision: float
    avg_recall: float
    avg_f1: float
    match_counts: dict[str, int]


def aggregate(records: Sequence[EvalRecord], label: str) -> MethodReport:
    """Arithmetic means over per-image metrics, plus match-type counts."""
    if not records:
        raise ValueError("cannot aggregate zero records")
    n = len(records)
    counts = {mt.name.lower(): 0 for mt in _MATCH_ORDER}
    for rec in records:
        counts[rec.match_type.name.lower()] += 1
    return MethodReport(
        label=label,
        count=n,
        avg_weighted=sum(r.weighted for r in records) / n,
        avg_precision=sum(r.precision for r in records) / n,
        avg_recall=sum(r.recall for r in records) / n,
        avg_f1=sum(r.f1 for r in records) / n,
        match_counts=counts,
    )


@dataclass(frozen=True)
class LevelAccuracyRow:
    level: int
    objects: int
    percent: float


def level_accuracy(records: Sequence[EvalRecord], max_level: int = 9) -> list[LevelAccuracyRow]:
    """For each level, how many records matched at least that deep."""
    if not records:
        raise ValueError("cannot compute level accuracy for zero records")
    total = len(records)
    rows = []
    for level in range(1, max_level + 1):
        objects = sum(1 for r in records if r.comparison.matched >= level)
        rows.append(LevelAccuracyRow(level=level, objects=objects, percent=100.0 * objects / total))
    return rows


@dataclass(frozen=True)
class TruncationRow:
    k: int
    precision: float
    recall: float
    f1: float
    avg_levels: float


def truncation_report(
    pairs: Sequence[tuple[IconclassCode, IconclassCode]],
    max_k: int = 4,
) -> list[TruncationRow]:
    """Re-evaluate after chopping k trailing levels off each prediction,
    for k = 0..max_k. Truncation never goes below one level."""
    if not pairs:
        raise ValueError("cannot build a truncation report for zero pairs")
    rows = []
    n = len(pairs)
    for k in range(max_k + 1):
        p_sum = r_sum = f_sum = level_sum = 0.0
        for pred, gt in pairs:
            cut = truncate_code(pred, k)
            precision, recall, f1 = hierarchical_metrics(compare(cut, gt))
            p_sum += precision
            r_sum += recall
            f_sum += f1
            level_sum += cut.levels
        rows.append(
            TruncationRow(
                k=k,
                precision=p_sum / n,
                recall=r_sum / n,
                f1=f_sum / n,
                avg_levels=level_sum / n,
            )
        )
    return rows


@dataclass(frozen=True)
class PredictionRow:
    image_id: str
    predicted: str
    ground_truth: str
    group: Optional[str] = None


def read_predictions_csv(path: Union[str, Path]) -> list[PredictionRow]:
    """Read the classifier's CSV projection. Header is required; every row
    needs a non-empty prediction and ground truth."""
    p = Path(path)
    if not p.is_file():
        raise ManifestParseError(f"predictions file not found: {p}")
    rows: list[PredictionRow] = []
    with open(p, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"image_id", "predicted_code", "ground_truth_code"}
        if not reader.fieldnames or not needed.issubset(reader.fieldnames):
            raise ManifestParseError(
                "predictions CSV needs columns image_id, predicted_code, ground_truth_code"
            )
        for line_no, rec in enumerate(reader, start=2):
            image_id = (rec.get("image_id") or "").strip()
            predicted = (rec.get("predicted_code") or "").strip()
            gt = (rec.get("ground_truth_code") or "").strip()
            if not image_id or not predicted or not gt:
                raise ManifestParseError(f"line {line_no}: incomplete prediction row")
            group = (rec.get("group") or "").strip() or None
            rows.append(PredictionRow(image_id, predicted, gt, group))
    return rows


def build_report(
    label: str,
    records: Sequence[EvalRecord],
    pairs: Sequence[tuple[IconclassCode, IconclassCode]],
    max_level: int = 9,
    max_k: int = 4,
    config: Optional[dict] = None,
) -> dict:
    """Assemble the full JSON-ready report for one method run."""
    summary = aggregate(records, label)
    report = {
        "label": label,
        "count": summary.count,
        "summary": {
            "avg_weighted": summary.avg_weighted,
            "avg_precision": summary.avg_precision,
            "avg_recall": summary.avg_recall,
            "avg_f1": summary.avg_f1,
        },
        "match_counts": summary.match_counts,
        "level_accuracy": [
            {"level": r.level, "objects": r.objects, "percent": r.percent}
            for r in level_accuracy(records, max_level)
        ],
        "truncation": [
            {
                "k": r.k,
                "precision": r.precision,
                "recall": r.recall,
                "f1": r.f1,
                "avg_levels": r.avg_levels,
            }
            for r in truncation_report(pairs, max_k)
        ],
    }
    groups = sorted({r.group for r in records if r.group})
    if groups:
        report["groups"] = {
            g: {
                "count": agg.count,
                "avg_weighted": agg.avg_weighted,
                "avg_precision": agg.avg_precision,
                "avg_recall": agg.avg_recall,
                "avg_f1": agg.avg_f1,
            }
            for g in groups
            for agg in [aggregate([r for r in records if r.group == g], g)]
        }
    if config:
        report["config"] = config
    return report


def render_report_text(report: dict) -> str:
    """Aligned plain-text tables mirroring the JSON report."""
    lines = []
    s = report["summary"]
    lines.append("== Summary ==")
    lines.append(f"{'method':<34}{'count':>6}{'weighted':>11}{'precision':>11}{'recall':>9}{'f1':>9}")
    lines.append(
        f"{report['label']:<34}{report['count']:>6}"
        f"{s['avg_weighted']:>11.5f}{s['avg_precision']:>11.4f}"
        f"{s['avg_recall']:>9.4f}{s['avg_f1']:>9.4f}"
    )
    lines.append("")
    lines.append("== Match types ==")
    names = [mt.name.lower() for mt in _MATCH_ORDER]
    counts = report["match_counts"]
    lines.append("".join(f"{n:>11}" for n in names))
    lines.append("".join(f"{counts[n]:>11}" for n in names))
    lines.append("")
    lines.append("== Accuracy by level ==")
    lines.append(f"{'level':>5}{'objects':>9}{'percent':>9}")
    for row in report["level_accuracy"]:
        lines.append(f"{row['level']:>5}{row['objects']:>9}{row['percent']:>9.2f}")
    lines.append("")
    lines.append("== Truncation sweep ==")
    lines.append(f"{'k':>2}{'precision':>11}{'recall':>9}{'f1':>9}{'avg_levels':>12}")
    for row in report["truncation"]:
        lines.append(
            f"{row['k']:>2}{row['precision']:>11.4f}{row['recall']:>9.4f}"
            f"{row['f1']:>9.4f}{row['avg_levels']:>12.2f}"
        )
    if "groups" in report:
        lines.append("")
        lines.append("== Groups ==")
        lines.append(f"{'group':<20}{'count':>6}{'weighted':>11}{'precision':>11}{'recall':>9}{'f1':>9}")
        for g, agg in sorted(report["groups"].items()):
            lines.append(
                f"{g:<20}{agg['count']:>6}{agg['avg_weighted']:>11.5f}"
                f"{agg['avg_precision']:>11.4f}{agg['avg_recall']:>9.4f}{agg['avg_f1']:>9.4f}"
            )
    return "\n".join(lines) + "\n"
