"""
From cleaned weekday fields to market shapes and market days.

Shapes are 8-connected superlevel components over a fixed geometric
threshold grid. The strongest shape (the peak) anchors the location; shapes
not touching the largest same-day shape around it are discarded, and a
weekday is a market day when something survives at or above the cutoff.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from statistics import mean, median
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .raster import DayOfWeek, GeoTransform, mask_to_geometry, rasterize_polygon

MIN_AREA_M2 = 50.0
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def threshold_grid() -> Tuple[float, ...]:
    """The 26 detection thresholds (t/20)^4 for t = 9..34, correctly rounded."""
    return tuple(float(Fraction(t, 20) ** 4) for t in range(9, 35))


THRESHOLDS = threshold_grid()
CUTOFF = THRESHOLDS[16 - 9]   # (16/20)^4 = 0.4096


@dataclass(eq=False)
class MarketShape:
    location_id: str
    day_of_week: DayOfWeek
    threshold: float
    rows: np.ndarray
    cols: np.ndarray
    pixel_size_m: float
    shape_id: int = -1

    @property
    def pixel_count(self) -> int:
        return int(self.rows.size)

    @property
    def area_m2(self) -> float:
        return self.pixel_count * self.pixel_size_m ** 2

    def centroid(self, transform: Optional[GeoTransform] = None):
        """Mean pixel-centre position, in metres when ``transform`` is given."""
        r = self.rows.mean() + 0.5
        c = self.cols.mean() + 0.5
        if transform is None:
            return (c * self.pixel_size_m, -r * self.pixel_size_m)
        return (transform.origin_x + c * transform.pixel_size_m,
                transform.origin_y - r * transform.pixel_size_m)

    def flat(self, width: int) -> np.ndarray:
        return self.rows.astype(np.int64) * width + self.cols

    def mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.rows, self.cols] = True
        return m

    def intersects(self, other: "MarketShape") -> bool:
        a = set(zip(self.rows.tolist(), self.cols.tolist()))
        return any((r, c) in a for r, c in zip(other.rows.tolist(), other.cols.tolist()))

    def contains(self, other: "MarketShape") -> bool:
        a = set(zip(self.rows.tolist(), self.cols.tolist()))
        return all((r, c) in a for r, c in zip(other.rows.tolist(), other.cols.tolist()))


def extract_shapes(field: np.ndarray, threshold: float, pixel_size_m: float,
                   region: Optional[np.ndarray] = None, day_of_week=DayOfWeek.MON,
                   location_id: str = "", min_area_m2: float = MIN_AREA_M2) -> List[MarketShape]:
    """8-connected components of ``field >= threshold`` covering at least ``min_area_m2``."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    f = np.asarray(field, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        above = np.isfinite(f) & (f >= threshold)
    if region is not None:
        above &= region
    labels, n = ndimage.label(above, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    shapes = []
    for k, sl in enumerate(ndimage.find_objects(labels), 1):
        rr, cc = np.nonzero(labels[sl] == k)
        rr = rr + sl[0].start
        cc = cc + sl[1].start
        if rr.size * pixel_size_m ** 2 < min_area_m2:
            continue
        shapes.append(MarketShape(location_id, DayOfWeek(day_of_week), threshold,
                                  rr, cc, pixel_size_m))
    return shapes


def shapes_for_fields(fields: Mapping[DayOfWeek, np.ndarray], pixel_size_m: float,
                      region: Optional[np.ndarray] = None, location_id: str = "",
                      thresholds: Sequence[float] = THRESHOLDS) -> List[MarketShape]:
    """Shapes for every weekday and threshold, numbered in (day, threshold, scan) order."""
    out = []
    for d in sorted(fields):
        for t in thresholds:
            found = extract_shapes(fields[d], t, pixel_size_m, region, d, location_id)
            if not found:
                break   # superlevel sets only shrink
            out.extend(found)
    for i, s in enumerate(out):
        s.shape_id = i
    return out


@dataclass
class PeakFilter:
    retained: List[MarketShape]
    peak: Optional[MarketShape]
    encompassing: Optional[MarketShape]


def peak_filter(shapes: Sequence[MarketShape]) -> PeakFilter:
    """Keep the shapes that intersect the largest same-day shape around the peak.

    The peak is the shape at the highest threshold; ties go to the larger
    area, then the earlier weekday, then the smaller centroid x.
    """
    if not shapes:
        return PeakFilter([], None, None)
    peak = min(shapes, key=lambda s: (-s.threshold, -s.pixel_count, int(s.day_of_week),
                                      s.centroid()[0]))
    around = [s for s in shapes if s.day_of_week == peak.day_of_week and s.contains(peak)]
    enc = min(around, key=lambda s: (s.threshold, -s.pixel_count))
    retained = [s for s in shapes if s is enc or s.intersects(enc)]
    return PeakFilter(retained, peak, enc)


def decide_market_days(shapes: Sequence[MarketShape], cutoff: float = CUTOFF) -> Tuple[DayOfWeek, ...]:
    """Weekdays with a retained shape surviving at a threshold of at least ``cutoff``."""
    return tuple(sorted({s.day_of_week for s in shapes if s.threshold >= cutoff}))


@dataclass
class DetectionResult:
    location_id: str
    shapes: List[MarketShape]
    retained: List[MarketShape]
    peak: Optional[MarketShape]
    encompassing: Optional[MarketShape]
    transform: GeoTransform
    grid_shape: Tuple[int, int]
    cutoff: float = CUTOFF
    crs: Optional[str] = None
    info: dict = field(default_factory=dict)

    @property
    def market_days(self) -> Tuple[DayOfWeek, ...]:
        return decide_market_days(self.retained, self.cutoff)

    def days_at(self, cutoff: float) -> Tuple[DayOfWeek, ...]:
        return decide_market_days(self.retained, cutoff)

    @property
    def max_threshold(self) -> Dict[DayOfWeek, float]:
        out = {}
        for s in self.retained:
            out[s.day_of_week] = max(out.get(s.day_of_week, 0.0), s.threshold)
        return out

    def nested(self, dow) -> List[Tuple[float, np.ndarray]]:
        """(threshold, union mask) of the retained shapes of one weekday, core first."""
        levels: Dict[float, np.ndarray] = {}
        for s in self.retained:
            if s.day_of_week != dow:
                continue
            m = levels.setdefault(s.threshold, np.zeros(self.grid_shape, dtype=bool))
            m[s.rows, s.cols] = True
        return [(t, levels[t]) for t in sorted(levels, reverse=True)]

    def market_area(self, dow, cutoff: Optional[float] = None) -> np.ndarray:
        """Union of retained shapes of ``dow`` at the lowest grid level >= cutoff."""
        cutoff = self.cutoff if cutoff is None else cutoff
        levels = [t for t, _ in self.nested(dow) if t >= cutoff]
        if not levels:
            return np.zeros(self.grid_shape, dtype=bool)
        return dict(self.nested(dow))[min(levels)]

    def extent(self) -> np.ndarray:
        """Union of every retained shape on a market day (the tracking footprint)."""
        m = np.zeros(self.grid_shape, dtype=bool)
        days = set(self.market_days)
        for s in self.retained:
            if s.day_of_week in days:
                m[s.rows, s.cols] = True
        return m


def detect_from_fields(fields: Mapping[DayOfWeek, np.ndarray], transform: GeoTransform,
                       region: Optional[np.ndarray], location_id: str,
                       cutoff: float = CUTOFF, crs: Optional[str] = None) -> DetectionResult:
    h, w = next(iter(fields.values())).shape
    shapes = shapes_for_fields(fields, transform.pixel_size_m, region, location_id)
    pf = peak_filter(shapes)
    return DetectionResult(location_id, shapes, pf.retained, pf.peak, pf.encompassing,
                           transform, (h, w), cutoff, crs)


def _circular_spacing(a: int, b: int) -> int:
    d = abs(a - b)
    return min(d, 7 - d)


def summarize_detections(results: Sequence[DetectionResult]) -> dict:
    """Market-day count distribution, and day spacing and centroid distance of two-day markets."""
    counts = Counter(len(r.market_days) for r in results)
    counts.pop(0, None)
    spacing = Counter()
    distances = []
    for r in results:
        days = r.market_days
        if len(days) != 2:
            continue
        spacing[_circular_spacing(int(days[0]), int(days[1]))] += 1
        cents = []
        for d in days:
            area = r.market_area(d)
            rr, cc = np.nonzero(area)
            cents.append(np.array([r.transform.origin_x + (cc.mean() + 0.5) * r.transform.pixel_size_m,
                                   r.transform.origin_y - (rr.mean() + 0.5) * r.transform.pixel_size_m]))
        distances.append(float(np.hypot(*(cents[0] - cents[1]))))
    return {
        "locations": len(results),
        "market_day_counts": dict(sorted(counts.items())),
        "two_day_spacing": dict(sorted(spacing.items())),
        "centroid_distance_mean_m": mean(distances) if distances else None,
        "centroid_distance_median_m": median(distances) if distances else None,
    }


def to_geojson(result: DetectionResult) -> dict:
    """FeatureCollection of the retained shapes with the run-level decision as foreign members."""
    feats = []
    for s in result.retained:
        geom = mask_to_geometry(s.mask(result.grid_shape), result.transform)
        feats.append({
            "type": "Feature",
            "geometry": geom.__geo_interface__,
            "properties": {"location_id": s.location_id, "dow": s.day_of_week.label,
                           "threshold": s.threshold, "area_m2": s.area_m2},
        })
    doc = {
        "type": "FeatureCollection",
        "location_id": result.location_id,
        "cutoff": result.cutoff,
        "market_days": [d.label for d in result.market_days],
        "grid": {"origin_x": result.transform.origin_x, "origin_y": result.transform.origin_y,
                 "pixel_size_m": result.transform.pixel_size_m,
                 "height": result.grid_shape[0], "width": result.grid_shape[1]},
        "features": feats,
    }
    if result.peak is not None:
        doc["peak"] = {"dow": result.peak.day_of_week.label, "threshold": result.peak.threshold,
                       "area_m2": result.peak.area_m2}
    if result.crs:
        doc["crs"] = {"type": "name", "properties": {"name": result.crs}}
    return doc


def write_geojson(result: DetectionResult, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_geojson(result), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_geojson(path) -> DetectionResult:
    """Rebuild a detection from its GeoJSON; shapes are re-rasterised by pixel centre."""
    from shapely.geometry import shape as to_shape

    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    g = doc["grid"]
    transform = GeoTransform(g["origin_x"], g["origin_y"], g["pixel_size_m"])
    hw = (g["height"], g["width"])
    shapes = []
    for i, f in enumerate(doc["features"]):
        p = f["properties"]
        m = rasterize_polygon(to_shape(f["geometry"]), transform, *hw)
        rr, cc = np.nonzero(m)
        shapes.append(MarketShape(p["location_id"], DayOfWeek.parse(p["dow"]), p["threshold"],
                                  rr, cc, transform.pixel_size_m, i))
    crs = doc.get("crs", {}).get("properties", {}).get("name")
    res = DetectionResult(doc["location_id"], shapes, shapes, None, None, transform, hw,
                          doc.get("cutoff", CUTOFF), crs)
    if doc.get("peak"):
        pk = doc["peak"]
        cands = [s for s in shapes if s.day_of_week.label == pk["dow"]
                 and s.threshold == pk["threshold"]]
        res.peak = max(cands, key=lambda s: s.pixel_count) if cands else None
    return res
