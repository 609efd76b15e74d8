"""
Validation against known market days: precision, recall and the
false-positive rate on pseudo-locations, over a sweep of cutoffs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .detect import THRESHOLDS
from .raster import DayOfWeek, LocationDataset

GroundTruth = Dict[str, Tuple[DayOfWeek, ...]]


def read_truth(path) -> GroundTruth:
    """JSON object mapping location_id to a list of weekday names."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    out = {}
    for loc, days in doc.items():
        parsed = [DayOfWeek.parse(d) for d in days]
        if len(set(parsed)) != len(parsed):
            raise ValueError(f"{loc}: repeated market day")
        out[loc] = tuple(sorted(parsed))
    return out


def write_truth(truth: Mapping[str, Iterable], path) -> None:
    doc = {loc: [DayOfWeek(d).label for d in sorted(days)] for loc, days in sorted(truth.items())}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def make_pseudo_location(dataset: LocationDataset, market_days: Iterable, seed: int = 0) -> LocationDataset:
    """Replace every market-day scene by a relabelled non-market-day scene.

    Donors are drawn uniformly without replacement while any remain, then
    with replacement. The donor takes over the removed scene's acquisition
    time and offset, hence its weekday slot; its id records both scenes.
    """
    days = {int(DayOfWeek(d)) for d in market_days}
    scenes = dataset.scenes
    is_mkt = np.array([int(s.day_of_week) in days for s in scenes], dtype=bool)
    donors = [s for s, m in zip(scenes, is_mkt) if not m]
    if not donors:
        raise ValueError(f"{dataset.location_id}: no non-market-day scenes to draw from")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(donors)))
    out = [s for s, m in zip(scenes, is_mkt) if not m]
    for s, m in zip(scenes, is_mkt):
        if not m:
            continue
        j = order.pop() if order else int(rng.integers(len(donors)))
        d = donors[j]
        out.append(d.replace(scene_id=f"{s.scene_id}<{d.scene_id}", acquired_utc=s.acquired_utc,
                             utc_offset_minutes=s.utc_offset_minutes))
    return dataset.subset(out)


@dataclass
class MetricsRow:
    cutoff: float
    precision: Optional[float]
    recall: float
    false_positive_rate: Optional[float]
    true_positives: int
    detected: int
    truth: int
    pseudo_flagged: int
    pseudo_total: int

    def row(self) -> dict:
        f = lambda x: "" if x is None else repr(float(x))
        return {"cutoff": repr(self.cutoff), "precision": f(self.precision), "recall": f(self.recall),
                "false_positive_rate": f(self.false_positive_rate),
                "true_positives": self.true_positives, "detected": self.detected,
                "truth": self.truth, "pseudo_flagged": self.pseudo_flagged,
                "pseudo_total": self.pseudo_total}


METRICS_COLUMNS = ("cutoff", "precision", "recall", "false_positive_rate", "true_positives",
                   "detected", "truth", "pseudo_flagged", "pseudo_total")


def _days(det, cutoff) -> set:
    """Detected weekdays at ``cutoff`` from a DetectionResult, a callable, or a fixed set."""
    if det is None:
        return set()
    if hasattr(det, "days_at"):
        return {int(d) for d in det.days_at(cutoff)}
    if callable(det):
        return {int(d) for d in det(cutoff)}
    return {int(d) for d in det}


def score(detections: Mapping[str, object], truth: Mapping[str, Iterable],
          pseudo_detections: Mapping[str, object] = None,
          cutoffs: Sequence[float] = THRESHOLDS) -> List[MetricsRow]:
    """Tuple-level precision and recall plus the pseudo-location false-positive rate per cutoff.

    Locations missing from ``detections`` count as detecting nothing.
    Precision is None when nothing is detected; the rate is None without pseudo-locations.
    """
    truth_set = {(loc, int(DayOfWeek(d))) for loc, days in truth.items() for d in days}
    if not truth_set:
        raise ValueError("ground truth is empty")
    pseudo_detections = pseudo_detections or {}
    locs = sorted(set(truth) | set(detections))
    rows = []
    for c in cutoffs:
        det = {(loc, d) for loc in locs for d in _days(detections.get(loc), c)}
        tp = len(det & truth_set)
        flagged = sum(1 for p in pseudo_detections.values() if _days(p, c))
        npseudo = len(pseudo_detections)
        rows.append(MetricsRow(float(c), tp / len(det) if det else None, tp / len(truth_set),
                               flagged / npseudo if npseudo else None, tp, len(det),
                               len(truth_set), flagged, npseudo))
    return rows


def write_metrics(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r.row())
