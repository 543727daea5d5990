"""Navigation metrics and fold aggregation.

Success-style metrics are stored as fractions internally and reported as
percentages in MetricReport, matching the usual table convention. The
conformity metric scores coverage of the reference path (mean exponential
of node distances) damped by a length score that penalizes any deviation
of the predicted path length from the coverage-weighted reference length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .world import House

PERCENT_METRICS = ("sr", "spl", "cls")
SEEN_FOLD = "val_seen"
UNSEEN_FOLD = "val_unseen"


def path_length(path: Sequence[int], house: House) -> float:
    """Sum of edge lengths along the path; errors on a non-adjacent pair."""
    return sum(house.edge(u, v).length for u, v in zip(path, path[1:]))


def nav_error(predicted: Sequence[int], reference: Sequence[int], house: House) -> float:
    return house.distance(predicted[-1], reference[-1])


def success(predicted: Sequence[int], reference: Sequence[int], house: House,
            d_th: float) -> int:
    return 1 if nav_error(predicted, reference, house) <= d_th else 0


def spl(predicted: Sequence[int], reference: Sequence[int], house: House,
        d_th: float) -> float:
    """Success weighted by normalized path length: S * l / max(p, l)."""
    s = success(predicted, reference, house, d_th)
    l = house.distance(reference[0], reference[-1])
    p = path_length(predicted, house)
    if l == 0.0 and p == 0.0:
        return float(s)
    return s * l / max(p, l)


def cls_score(predicted: Sequence[int], reference: Sequence[int], house: House,
              d_th: float) -> float:
    """Coverage of the reference weighted by a length score, in [0, 1]."""
    coverage = sum(math.exp(-min(house.distance(r, p) for p in predicted) / d_th)
                   for r in reference) / len(reference)
    expected = coverage * path_length(reference, house)
    pl_pred = path_length(predicted, house)
    denom = expected + abs(pl_pred - expected)
    length_score = 1.0 if denom == 0.0 else expected / denom
    return coverage * length_score


def goal_progress(predicted: Sequence[int], goal_room: str, house: House) -> float:
    """Reduction in distance to the goal room from first to last position."""
    return house.room_distance(predicted[0], goal_room) - \
        house.room_distance(predicted[-1], goal_room)


def episode_metrics(house: House, predicted: Sequence[int], reference: Sequence[int],
                    d_th: float, goal_room: str | None = None) -> dict[str, float]:
    if not predicted or not reference:
        raise ValueError("paths must be non-empty")
    out = {
        "pl": path_length(predicted, house),
        "ne": nav_error(predicted, reference, house),
        "sr": float(success(predicted, reference, house, d_th)),
        "spl": spl(predicted, reference, house, d_th),
        "cls": cls_score(predicted, reference, house, d_th),
    }
    if goal_room is not None:
        out["progress"] = goal_progress(predicted, goal_room, house)
    return out


@dataclass
class MetricReport:
    """Per-fold metric means; percentages for sr/spl/cls; seen-unseen gaps."""

    folds: dict[str, dict[str, float]]
    counts: dict[str, int]
    gap: dict[str, float] = field(default_factory=dict)
    seed_count: int = 1
    sd: dict[str, dict[str, float]] | None = None

    def to_dict(self) -> dict:
        out = {"folds": self.folds, "counts": self.counts, "gap": self.gap,
               "seed_count": self.seed_count}
        if self.sd is not None:
            out["sd"] = self.sd
        return out


def _fold_means(rows: list[dict[str, float]]) -> dict[str, float]:
    keys = sorted({k for row in rows for k in row})
    means = {}
    for k in keys:
        vals = [row[k] for row in rows if k in row]
        mean = sum(vals) / len(vals)
        if k in PERCENT_METRICS:
            mean *= 100.0
        means[k] = mean
    return means


def compute_gap(folds: dict[str, dict[str, float]]) -> dict[str, float]:
    if SEEN_FOLD not in folds or UNSEEN_FOLD not in folds:
        return {}
    seen, unseen = folds[SEEN_FOLD], folds[UNSEEN_FOLD]
    return {k: seen[k] - unseen[k] for k in seen if k in unseen}


def aggregate(episode_rows: Sequence[dict[str, float]],
              fold_tags: Sequence[str]) -> MetricReport:
    """Mean metrics per fold plus the seen-unseen gap."""
    if len(episode_rows) != len(fold_tags):
        raise ValueError("one fold tag per episode required")
    by_fold: dict[str, list[dict[str, float]]] = {}
    for row, fold in zip(episode_rows, fold_tags):
        by_fold.setdefault(fold, []).append(row)
    for fold, rows in by_fold.items():
        if not rows:
            raise ValueError(f"empty fold {fold!r}")
    if not by_fold:
        raise ValueError("no episodes to aggregate")
    folds = {fold: _fold_means(rows) for fold, rows in sorted(by_fold.items())}
    counts = {fold: len(rows) for fold, rows in sorted(by_fold.items())}
    return MetricReport(folds=folds, counts=counts, gap=compute_gap(folds))


def aggregate_runs(reports: Sequence[MetricReport]) -> MetricReport:
    """Mean and sample standard deviation across independent runs."""
    if not reports:
        raise ValueError("no reports to aggregate")
    fold_names = sorted({f for r in reports for f in r.folds})
    folds: dict[str, dict[str, float]] = {}
    sd: dict[str, dict[str, float]] = {}
    counts: dict[str, int] = {}
    for fold in fold_names:
        present = [r.folds[fold] for r in reports if fold in r.folds]
        keys = sorted({k for row in present for k in row})
        folds[fold] = {}
        sd[fold] = {}
        for k in keys:
            vals = [row[k] for row in present if k in row]
            mean = sum(vals) / len(vals)
            folds[fold][k] = mean
            if len(vals) > 1:
                var = sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
                sd[fold][k] = math.sqrt(var)
            else:
                sd[fold][k] = 0.0
        counts[fold] = sum(r.counts.get(fold, 0) for r in reports)
    return MetricReport(folds=folds, counts=counts, gap=compute_gap(folds),
                        seed_count=len(reports), sd=sd)
