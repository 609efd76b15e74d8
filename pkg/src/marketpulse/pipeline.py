"""
Per-location detection and tracking, wired from the module building blocks.

Harmonisation is carried as per-scene quantile maps applied while stacks are
assembled, so a location never holds a second, matched copy of its rasters.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .detect import CUTOFF, DetectionResult, detect_from_fields
from .harmonize import build_target_composites, harmonization_maps, scene_map, _target_for
from .ingest import FilterReport, Mode, quality_filter
from .raster import LocationDataset
from .signal import dow_difference_fields, periodicity_fields
from .track import TrackResult, track_location

log = logging.getLogger(__name__)


@dataclass
class DetectOutcome:
    detection: DetectionResult
    report: FilterReport
    fields: Dict
    targets: Optional[dict] = None
    maps: Optional[dict] = None
    timings: Dict[str, float] = field(default_factory=dict)


def detect_dataset(raw: LocationDataset, cutoff: float = CUTOFF, harmonize: bool = True) -> DetectOutcome:
    """Filter, harmonise, difference, clean and threshold one location."""
    tm = {}
    t0 = time.perf_counter()
    ds, report = quality_filter(raw, Mode.DETECT)
    tm["filter"] = time.perf_counter() - t0
    targets = maps = None
    if harmonize:
        t0 = time.perf_counter()
        targets = build_target_composites(ds)
        maps = harmonization_maps(ds, targets)
        tm["harmonize"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    dowf = dow_difference_fields(ds, maps=maps)
    tm["differences"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    fields = periodicity_fields(dowf)
    det = detect_from_fields(fields, ds.transform, ds.polygon_mask, ds.location_id, cutoff, ds.crs)
    det.info = {"scenes_loaded": len(raw), "scenes_used": len(ds)}
    tm["shapes"] = time.perf_counter() - t0
    return DetectOutcome(det, report, fields, targets, maps, tm)


def _align(det: DetectionResult, raw: LocationDataset) -> DetectionResult:
    if det.grid_shape != raw.shape or det.transform != raw.transform:
        raise ValueError(f"{raw.location_id}: detection grid does not match the loaded imagery")
    return det


def track_dataset(raw: LocationDataset, detection: DetectionResult, targets: Optional[dict] = None,
                  maps: Optional[dict] = None, harmonize: bool = True, monotone: bool = True,
                  strict: bool = False):
    """TRACK-filter ``raw`` around the detected market and build its activity panel.

    ``targets`` and ``maps`` from the detection run are reused when given;
    otherwise they are rebuilt from the DETECT-filtered scenes, which gives
    identical values.
    """
    _align(detection, raw)
    days = detection.market_days
    if not days:
        return None, None
    nested = {d: detection.nested(d) for d in days}
    footprint = np.zeros(raw.shape, dtype=bool)
    for d in days:
        footprint |= nested[d][-1][1]
    ds, report = quality_filter(raw, Mode.TRACK, market_area=footprint)
    tmaps = None
    if harmonize:
        if targets is None:
            targets = build_target_composites(quality_filter(raw, Mode.DETECT)[0])
        maps = maps or {}
        region = raw.polygon_mask
        tmaps = {s.scene_id: maps[s.scene_id] if s.scene_id in maps
                 else scene_map(s, _target_for(targets, s), region) for s in ds.scenes}
    res = track_location(ds, nested, days, monotone=monotone, strict=strict, maps=tmaps)
    return res, report


@dataclass
class LocationRun:
    location_id: str
    detect: Optional[DetectOutcome] = None
    track: Optional[TrackResult] = None
    track_report: Optional[FilterReport] = None
    error: Optional[str] = None
    timings: Dict[str, float] = field(default_factory=dict)


def run_location(raw: LocationDataset, cutoff: float = CUTOFF, harmonize: bool = True,
                 track: bool = True, monotone: bool = True, strict: bool = False) -> LocationRun:
    """Detection followed (when a market is found) by tracking."""
    run = LocationRun(raw.location_id)
    t0 = time.perf_counter()
    run.detect = detect_dataset(raw, cutoff, harmonize)
    run.timings["detect"] = time.perf_counter() - t0
    if track and run.detect.detection.market_days:
        t0 = time.perf_counter()
        run.track, run.track_report = track_dataset(raw, run.detect.detection, run.detect.targets,
                                                    run.detect.maps, harmonize, monotone, strict)
        run.timings["track"] = time.perf_counter() - t0
    return run
