"""
Activity tracking inside detected market shapes.

Every scene that survives the tracking filter is differenced against its own
reference composite; a 3x3 median tames outlier pixels and the combined
measure is summed over a shape. Nested shapes of one weekday are cut into
rings and the market area is grown ring by ring from the core for as long as
market-day readings clearly exceed non-market-day ones.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .composite import HI, LANES, LO, MIN_VALID, networks, sample_schedule
from .ingest import format_timestamp, parse_timestamp
from .raster import DayOfWeek, Generation, LocationDataset, Scene
from .signal import ANGLES, NBANDS, RGB, band_stack

log = logging.getLogger(__name__)

MERGE_RATIO = 0.7
MIN_VALID_FRACTION = 0.10
MIN_READINGS = 8
FRINGE_QUANTILE = 0.75
STRICT_SUN_DEG = 14.0
STRICT_CLEAN = 0.90

PANEL_COLUMNS = ("location_id", "shape_dow", "scene_id", "acquired_utc", "is_market_day",
                 "raw_value", "valid_fraction", "generation")


def tracking_difference(scene5: np.ndarray, composite5: np.ndarray,
                        scene_valid: Optional[np.ndarray] = None,
                        composite_valid: Optional[np.ndarray] = None):
    """Combined measure of the 3x3-median-filtered absolute band differences.

    Inputs are (H, W, 5). Returns (field (H, W), ok (H, W)); ``ok`` marks
    pixels where both scene and composite are usable, NaN elsewhere.
    """
    a = np.asarray(scene5, dtype=np.float64)
    c = np.asarray(composite5, dtype=np.float64)
    ok = np.isfinite(a).all(-1) & np.isfinite(c).all(-1)
    if scene_valid is not None:
        ok &= scene_valid
    if composite_valid is not None:
        ok &= composite_valid
    d = np.abs(a - c)
    filt = np.empty_like(d)
    for b in range(d.shape[-1]):
        filt[..., b], _ = _kernels.masked_median_filter(d[..., b], ok, 1)
    out = filt[..., RGB].max(-1) * filt[..., ANGLES].max(-1)
    out[~ok] = np.nan
    return out, ok


def shape_reading(values: np.ndarray, area: np.ndarray, valid: Optional[np.ndarray] = None,
                  min_fraction: float = MIN_VALID_FRACTION):
    """Sum of ``values`` over the valid part of ``area``, rescaled to the full area.

    Returns (raw_value, valid_fraction), or None when less than
    ``min_fraction`` of the area is valid.
    """
    area = np.asarray(area, dtype=bool)
    total = int(area.sum())
    if total == 0:
        return None
    ok = area & np.isfinite(values)
    if valid is not None:
        ok &= valid
    n = int(ok.sum())
    frac = n / total
    if n == 0 or frac < min_fraction:
        return None
    return float(values[ok].sum()) * total / n, frac


@dataclass
class RingSet:
    """Core shape plus disjoint rings ordered from the core outward."""

    core: np.ndarray
    rings: List[np.ndarray]
    thresholds: List[float]        # threshold of the core and of each ring's outer boundary

    def area(self, k: int) -> np.ndarray:
        """Union of the core and the first ``k`` rings."""
        m = self.core.copy()
        for r in self.rings[:k]:
            m |= r
        return m

    @property
    def outer(self) -> np.ndarray:
        return self.area(len(self.rings))


def build_rings(nested: Sequence[Tuple[float, np.ndarray]], ratio: float = MERGE_RATIO) -> RingSet:
    """Rings from nested (threshold, mask) pairs given core first (descending threshold).

    A boundary is skipped when the area inside it is at least ``ratio`` times
    the area of the next shape out; the outer of the two then stands in.
    """
    if not nested:
        raise ValueError("build_rings needs at least one shape")
    kept = [nested[0]]
    for t, m in nested[1:]:
        if kept[-1][1].sum() >= ratio * m.sum():
            kept[-1] = (t, m)
        else:
            kept.append((t, m))
    core = kept[0][1].copy()
    rings = [kept[i][1] & ~kept[i - 1][1] for i in range(1, len(kept))]
    return RingSet(core, rings, [t for t, _ in kept])


def ring_passes(market: Sequence[float], nonmarket: Sequence[float],
                min_readings: int = MIN_READINGS) -> bool:
    market = np.asarray(market, dtype=np.float64)
    nonmarket = np.asarray(nonmarket, dtype=np.float64)
    if market.size < min_readings or nonmarket.size < min_readings:
        return False
    return bool(np.median(market) > np.quantile(nonmarket, FRINGE_QUANTILE))


def select_fringe(readings: Sequence[Tuple[Sequence[float], Sequence[float]]],
                  monotone: bool = True, min_readings: int = MIN_READINGS) -> int:
    """Number of rings inside the market fringe (0 = core only).

    ``readings[i]`` holds the (market-day, non-market-day) readings of ring
    i + 1. The fringe is the outermost passing ring; with ``monotone`` every
    ring inside it must pass as well.
    """
    passed = [ring_passes(m, nm, min_readings) for m, nm in readings]
    k = 0
    for i, p in enumerate(passed, 1):
        if p:
            k = i
        elif monotone:
            break
    return k


@dataclass
class ActivityReading:
    location_id: str
    shape_dow: DayOfWeek
    scene_id: str
    acquired_utc: datetime
    is_market_day: bool
    raw_value: float
    valid_fraction: float
    generation: Generation

    def row(self) -> dict:
        return {"location_id": self.location_id, "shape_dow": DayOfWeek(self.shape_dow).label,
                "scene_id": self.scene_id, "acquired_utc": format_timestamp(self.acquired_utc),
                "is_market_day": "true" if self.is_market_day else "false",
                "raw_value": repr(float(self.raw_value)),
                "valid_fraction": repr(float(self.valid_fraction)),
                "generation": Generation(self.generation).value}


def write_panel(readings: Sequence[ActivityReading], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=PANEL_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in readings:
            w.writerow(r.row())


def read_panel(path) -> List[ActivityReading]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(ActivityReading(row["location_id"], DayOfWeek.parse(row["shape_dow"]),
                                       row["scene_id"], parse_timestamp(row["acquired_utc"]),
                                       row["is_market_day"].strip().lower() == "true",
                                       float(row["raw_value"]), float(row["valid_fraction"]),
                                       Generation(row["generation"])))
    return out


def strict_quality_mask(scenes: Sequence[Scene]) -> np.ndarray:
    """True for scenes within 14 degrees of the median sun elevation and at least 90% clean."""
    if not scenes:
        return np.zeros(0, dtype=bool)
    sun = np.array([s.quality.sun_elevation_deg for s in scenes])
    clear = np.array([s.quality.tile_clear_fraction for s in scenes])
    return (np.abs(sun - np.median(sun)) <= STRICT_SUN_DEG) & (clear >= STRICT_CLEAN)


def _window(mask: np.ndarray, margin: int = 1):
    rr, cc = np.nonzero(mask)
    h, w = mask.shape
    return (slice(max(0, rr.min() - margin), min(h, rr.max() + 1 + margin)),
            slice(max(0, cc.min() - margin), min(w, cc.max() + 1 + margin)))


def tracking_fields(dataset: LocationDataset, footprint: np.ndarray,
                    min_valid: int = MIN_VALID, maps=None) -> Iterator[Tuple[Scene, np.ndarray, np.ndarray, tuple]]:
    """Per-scene tracking field over the bounding box of ``footprint`` (plus a 1-pixel margin).

    Yields (scene, field, ok, window) for every scene with reference imagery.
    """
    if not footprint.any():
        return
    rows, cols = _window(footprint)
    scenes = dataset.scenes
    stack, valid = band_stack(scenes, rows, cols, maps)
    h = rows.stop - rows.start
    w = cols.stop - cols.start
    sched = sample_schedule(scenes)
    na, nb, no = networks()
    for r, ti in enumerate(sched.targets):
        idx, wts, n, exp_idx, exp_n = sched.row(r)
        comp, counts, _ = _kernels.composite_block(stack, valid, idx, wts, n, exp_idx, exp_n,
                                                   na, nb, no, min_valid, LO, HI, LANES)
        s5 = stack[ti].T.reshape(h, w, NBANDS)
        c5 = comp.T.reshape(h, w, NBANDS)
        fld, ok = tracking_difference(s5, c5, valid[ti].reshape(h, w), (counts > 0).reshape(h, w))
        yield scenes[ti], fld, ok, (rows, cols)


@dataclass
class TrackResult:
    location_id: str
    market_days: Tuple[DayOfWeek, ...]
    rings: Dict[DayOfWeek, RingSet]
    fringe: Dict[DayOfWeek, int]
    areas: Dict[DayOfWeek, np.ndarray]
    panel: List[ActivityReading]
    dropped_strict: int = 0
    info: dict = field(default_factory=dict)


def track_location(dataset: LocationDataset, nested: Dict[DayOfWeek, Sequence[Tuple[float, np.ndarray]]],
                   market_days: Sequence[DayOfWeek], monotone: bool = True,
                   strict: bool = False, min_valid: int = MIN_VALID, maps=None) -> TrackResult:
    """Rings, fringe selection and the activity panel for one location.

    ``dataset`` must already be filtered (TRACK mode) and either harmonised
    or accompanied by its harmonisation ``maps``; ``nested`` maps each market
    day to its nested shapes, core first.
    """
    days = tuple(sorted(DayOfWeek(d) for d in market_days))
    ringsets = {d: build_rings(nested[d]) for d in days}
    footprint = np.zeros(dataset.shape, dtype=bool)
    for rs in ringsets.values():
        footprint |= rs.outer

    keep = np.ones(len(dataset.scenes), dtype=bool)
    if strict:
        keep = strict_quality_mask(dataset.scenes)
    keep_ids = {s.scene_id for s, k in zip(dataset.scenes, keep) if k}

    # rings are evaluated on every scene; the panel then uses the chosen areas
    part_vals: Dict[DayOfWeek, List[list]] = {d: [] for d in days}
    meta = []
    fields = []
    for scene, fld, ok, (rows, cols) in tracking_fields(dataset, footprint, min_valid, maps):
        if scene.scene_id not in keep_ids:
            continue
        meta.append(scene)
        fields.append((fld, ok))
        for d in days:
            rs = ringsets[d]
            parts = [rs.core[rows, cols]] + [r[rows, cols] for r in rs.rings]
            part_vals[d].append([shape_reading(fld, p, ok) for p in parts])
    sdays = np.array([int(s.day_of_week) for s in meta], dtype=np.int64)
    is_mkt = np.isin(sdays, [int(d) for d in days])

    fringe, areas = {}, {}
    for d in days:
        rs = ringsets[d]
        per_ring = []
        for k in range(1, len(rs.rings) + 1):
            mk = [v[k][0] for v, sd in zip(part_vals[d], sdays) if v[k] is not None and sd == int(d)]
            nm = [v[k][0] for v, m in zip(part_vals[d], is_mkt) if v[k] is not None and not m]
            per_ring.append((mk, nm))
        fringe[d] = select_fringe(per_ring, monotone)
        areas[d] = rs.area(fringe[d])

    panel = []
    window = _window(footprint) if footprint.any() else None
    for scene, (fld, ok), m in zip(meta, fields, is_mkt):
        for d in days:
            area = areas[d][window]
            rd = shape_reading(fld, area, ok)
            if rd is None:
                continue
            panel.append(ActivityReading(dataset.location_id, d, scene.scene_id, scene.acquired_utc,
                                         bool(m), rd[0], rd[1], scene.generation))
    panel.sort(key=lambda r: (int(r.shape_dow), r.acquired_utc, r.scene_id))
    return TrackResult(dataset.location_id, days, ringsets, fringe, areas, panel,
                       int((~keep).sum()))
