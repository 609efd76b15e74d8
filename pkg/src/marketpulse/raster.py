"""
Core raster types shared by every stage: scenes, candidate polygons and the
north-up pixel grid they live on.

Coordinates are metres in one projected CRS per location. Row 0 is the
northern edge, so y decreases with the row index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Optional, Sequence

import numpy as np
import shapely
from shapely.geometry.base import BaseGeometry


class Generation(str, enum.Enum):
    OLD = "OLD"
    NEW = "NEW"


class DayOfWeek(enum.IntEnum):
    MON = 0
    TUE = 1
    WED = 2
    THU = 3
    FRI = 4
    SAT = 5
    SUN = 6

    @property
    def label(self) -> str:
        return _DOW_NAMES[self.value]

    @classmethod
    def parse(cls, name: str) -> "DayOfWeek":
        key = name.strip().lower()[:3]
        for i, full in enumerate(_DOW_NAMES):
            if full.lower()[:3] == key:
                return cls(i)
        raise ValueError(f"not a weekday name: {name!r}")


_DOW_NAMES = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday",
              "Saturday", "Sunday")


@dataclass(frozen=True)
class GeoTransform:
    """Top-left origin of a north-up grid with square pixels."""

    origin_x: float
    origin_y: float
    pixel_size_m: float

    def __post_init__(self):
        if not self.pixel_size_m > 0:
            raise ValueError("pixel_size_m must be positive")

    @property
    def pixel_area_m2(self) -> float:
        return self.pixel_size_m ** 2

    def pixel_centers(self, height: int, width: int):
        """Return (xs, ys) arrays of shape (height, width)."""
        cols = self.origin_x + (np.arange(width) + 0.5) * self.pixel_size_m
        rows = self.origin_y - (np.arange(height) + 0.5) * self.pixel_size_m
        return np.meshgrid(cols, rows)

    def offset(self, row_off: int, col_off: int) -> "GeoTransform":
        return GeoTransform(self.origin_x + col_off * self.pixel_size_m,
                            self.origin_y - row_off * self.pixel_size_m,
                            self.pixel_size_m)

    def translated(self, dx: float, dy: float) -> "GeoTransform":
        return GeoTransform(self.origin_x + dx, self.origin_y + dy, self.pixel_size_m)

    def to_affine(self):
        from affine import Affine
        return Affine(self.pixel_size_m, 0.0, self.origin_x,
                      0.0, -self.pixel_size_m, self.origin_y)

    @classmethod
    def from_affine(cls, aff) -> "GeoTransform":
        if abs(aff.b) > 1e-12 or abs(aff.d) > 1e-12:
            raise ValueError("rotated rasters are not supported")
        if not np.isclose(aff.a, -aff.e, rtol=1e-9):
            raise ValueError("pixels must be square and north-up")
        return cls(float(aff.c), float(aff.f), float(aff.a))


@dataclass(frozen=True)
class SceneQuality:
    tile_clear_fraction: float = 1.0
    tile_cloud_fraction: float = 0.0
    tile_shadow_fraction: float = 0.0
    tile_haze_fraction: float = 0.0
    candidate_coverage_fraction: float = 1.0
    sun_elevation_deg: float = 60.0

    def __post_init__(self):
        for name in ("tile_clear_fraction", "tile_cloud_fraction",
                     "tile_shadow_fraction", "tile_haze_fraction",
                     "candidate_coverage_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Scene:
    """One RGB acquisition on the location grid.

    ``pixels`` is (H, W, 3) float32 reflectance, ``mask`` is (H, W) with True
    for usable pixels. Arrays are made read-only on construction.
    """

    scene_id: str
    pixels: np.ndarray
    mask: np.ndarray
    acquired_utc: datetime
    utc_offset_minutes: int
    transform: GeoTransform
    generation: Generation = Generation.NEW
    quality: SceneQuality = field(default_factory=SceneQuality)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        mk = np.asarray(self.mask, dtype=bool)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"{self.scene_id}: pixels must be HxWx3, got {px.shape}")
        if mk.shape != px.shape[:2]:
            raise ValueError(f"{self.scene_id}: mask shape {mk.shape} != {px.shape[:2]}")
        if not np.isfinite(px).all() or (px < 0).any():
            raise ValueError(f"{self.scene_id}: reflectance must be finite and >= 0")
        if not -840 <= self.utc_offset_minutes <= 840:
            raise ValueError(f"{self.scene_id}: utc offset out of range")
        if self.acquired_utc.tzinfo is None:
            raise ValueError(f"{self.scene_id}: acquired_utc must be timezone-aware")
        object.__setattr__(self, "pixels", _frozen(px.view()))
        object.__setattr__(self, "mask", _frozen(mk.view()))
        object.__setattr__(self, "generation", Generation(self.generation))

    @property
    def shape(self):
        return self.mask.shape

    @property
    def local_time(self) -> datetime:
        return (self.acquired_utc.astimezone(timezone.utc)
                + timedelta(minutes=self.utc_offset_minutes)).replace(tzinfo=None)

    @property
    def day_of_week(self) -> DayOfWeek:
        return local_day_of_week(self)

    def replace(self, **changes) -> "Scene":
        return replace(self, **changes)


def local_day_of_week(scene: Scene) -> DayOfWeek:
    """Weekday of the acquisition in local time (UTC shifted by the scene offset)."""
    return DayOfWeek(scene.local_time.weekday())


@dataclass(frozen=True)
class CandidateLocation:
    location_id: str
    polygon: BaseGeometry
    utc_offset_minutes: int = 0

    def __post_init__(self):
        poly = self.polygon
        if poly.geom_type not in ("Polygon", "MultiPolygon"):
            raise ValueError(f"{self.location_id}: candidate must be a polygon")
        if not poly.is_valid or poly.area <= 0:
            raise ValueError(f"{self.location_id}: candidate polygon is not simple or has no area")


def rasterize_polygon(polygon: BaseGeometry, transform: GeoTransform,
                      height: int, width: int) -> np.ndarray:
    """Boolean raster that is True where the pixel centre lies inside ``polygon``."""
    xs, ys = transform.pixel_centers(height, width)
    if polygon.is_empty:
        return np.zeros((height, width), dtype=bool)
    return shapely.contains_xy(polygon, xs, ys)


def mask_to_geometry(mask: np.ndarray, transform: GeoTransform) -> BaseGeometry:
    """Polygonal outline of the True pixels (pixel-edge boundaries)."""
    from rasterio import features
    from shapely.geometry import shape
    from shapely.ops import unary_union

    polys = [shape(geom) for geom, val in
             features.shapes(mask.astype(np.uint8), mask=mask, connectivity=8,
                             transform=transform.to_affine()) if val == 1]
    if not polys:
        return shapely.geometry.Polygon()
    return polys[0] if len(polys) == 1 else unary_union(polys)


@dataclass(eq=False)
class LocationDataset:
    """All scenes of one candidate location on a common grid, sorted by time."""

    location: CandidateLocation
    scenes: Sequence[Scene]
    transform: GeoTransform
    crs: Optional[str] = None
    warnings: list = field(default_factory=list)
    filter_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scenes = tuple(sorted(self.scenes, key=lambda s: (s.acquired_utc, s.scene_id)))
        ids = [s.scene_id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.location.location_id}: duplicate scene ids")
        shapes = {s.shape for s in self.scenes}
        if len(shapes) > 1:
            raise ValueError(f"{self.location.location_id}: scenes are not on one grid: {shapes}")
        self._polygon_mask = None

    def __len__(self):
        return len(self.scenes)

    @property
    def location_id(self) -> str:
        return self.location.location_id

    @property
    def shape(self):
        if self.scenes:
            return self.scenes[0].shape
        raise ValueError("empty dataset has no grid")

    @property
    def polygon_mask(self) -> np.ndarray:
        if self._polygon_mask is None:
            h, w = self.shape
            self._polygon_mask = rasterize_polygon(self.location.polygon, self.transform, h, w)
        return self._polygon_mask

    @property
    def days_of_week(self) -> np.ndarray:
        return np.array([int(s.day_of_week) for s in self.scenes], dtype=np.int64)

    def subset(self, scenes: Sequence[Scene]) -> "LocationDataset":
        out = LocationDataset(self.location, scenes, self.transform, self.crs,
                              list(self.warnings), dict(self.filter_stats))
        out._polygon_mask = self._polygon_mask
        return out


def utc(year, month, day, hour=0, minute=0) -> datetime:
    return datetime(year, month, day, hour, minute, tzinfo=timezone.utc)
