"""
Loading a location's scene stack from a JSON Lines manifest plus GeoTIFFs,
and the scene-level quality filters applied before detection and tracking.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .raster import (CandidateLocation, Generation, GeoTransform, LocationDataset,
                     Scene, SceneQuality, rasterize_polygon)

log = logging.getLogger(__name__)

MIN_SCENES = 8
DETECT_COVERAGE = 0.20
TRACK_COVERAGE = 0.10
CLEAN_FRACTION = 0.80
MAX_TIME_OFFSET_MIN = 30.0
COLOUR_SD = 2.0


class IngestError(RuntimeError):
    pass


class InsufficientImagery(ValueError):
    pass


class Mode(str, enum.Enum):
    DETECT = "DETECT"
    TRACK = "TRACK"


@dataclass
class ManifestRecord:
    scene_id: str
    path: str
    acquired_utc: str
    utc_offset_minutes: int
    generation: str
    tile_clear_fraction: float
    tile_cloud_fraction: float = 0.0
    tile_shadow_fraction: float = 0.0
    tile_haze_fraction: float = 0.0
    sun_elevation_deg: float = 60.0
    candidate_coverage_fraction: Optional[float] = None
    location_id: Optional[str] = None

    @property
    def timestamp(self) -> datetime:
        return parse_timestamp(self.acquired_utc)


def parse_timestamp(text: str) -> datetime:
    t = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if t.tzinfo is None:
        raise ValueError(f"timestamp without offset: {text!r}")
    return t.astimezone(timezone.utc)


def format_timestamp(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def read_manifest(path) -> List[ManifestRecord]:
    """Parse a manifest; relative raster paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = ManifestRecord(**obj)
                rec.timestamp
            except (TypeError, ValueError) as exc:
                raise IngestError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
            if rec.scene_id in seen:
                raise IngestError(f"{path}:{lineno}: duplicate scene_id {rec.scene_id}")
            seen.add(rec.scene_id)
            if not Path(rec.path).is_absolute():
                rec.path = str(base / rec.path)
            records.append(rec)
    return records


def write_manifest(records: Iterable[ManifestRecord], path, relative_to=None) -> None:
    path = Path(path)
    root = Path(relative_to) if relative_to else path.parent
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = asdict(rec)
            p = Path(obj["path"])
            if p.is_absolute():
                try:
                    obj["path"] = str(p.relative_to(root))
                except ValueError:
                    pass
            obj = {k: v for k, v in obj.items() if v is not None}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _grid_window(transform: GeoTransform, ref: GeoTransform, bounds):
    """Pixel window (row0, row1, col0, col1) of ``bounds`` on the reference grid."""
    ps = ref.pixel_size_m
    minx, miny, maxx, maxy = bounds
    c0 = math.floor((minx - ref.origin_x) / ps + 1e-9)
    c1 = math.ceil((maxx - ref.origin_x) / ps - 1e-9)
    r0 = math.floor((ref.origin_y - maxy) / ps + 1e-9)
    r1 = math.ceil((ref.origin_y - miny) / ps - 1e-9)
    return r0, r1, c0, c1


def _read_scene(rec: ManifestRecord, grid: GeoTransform, window, crs, polygon_mask):
    import rasterio
    from rasterio.windows import Window

    r0, r1, c0, c1 = window
    try:
        with rasterio.open(rec.path) as src:
            if crs is not None and src.crs is not None and src.crs.to_string() != crs:
                raise IngestError(f"{rec.scene_id}: CRS {src.crs} differs from {crs}")
            t = GeoTransform.from_affine(src.transform)
            if not math.isclose(t.pixel_size_m, grid.pixel_size_m, rel_tol=1e-9):
                raise IngestError(f"{rec.scene_id}: pixel size {t.pixel_size_m} differs from grid")
            dc = (t.origin_x - grid.origin_x) / grid.pixel_size_m
            dr = (grid.origin_y - t.origin_y) / grid.pixel_size_m
            if abs(dc - round(dc)) > 1e-6 or abs(dr - round(dr)) > 1e-6:
                raise IngestError(f"{rec.scene_id}: raster not aligned with location grid")
            win = Window(c0 - round(dc), r0 - round(dr), c1 - c0, r1 - r0)
            if src.count < 3:
                raise IngestError(f"{rec.scene_id}: expected 3 or 4 bands, found {src.count}")
            rgb = src.read([1, 2, 3], window=win, boundless=True, fill_value=0,
                           out_dtype="float32")
            footprint = np.zeros((r1 - r0, c1 - c0), dtype=bool)
            rr0 = max(0, -int(win.row_off))
            rr1 = min(r1 - r0, src.height - int(win.row_off))
            cc0 = max(0, -int(win.col_off))
            cc1 = min(c1 - c0, src.width - int(win.col_off))
            if rr1 > rr0 and cc1 > cc0:
                footprint[rr0:rr1, cc0:cc1] = True
            has_mask = src.count >= 4
            if has_mask:
                m = src.read(4, window=win, boundless=True, fill_value=0) > 0
            else:
                m = np.ones((r1 - r0, c1 - c0), dtype=bool)
    except IngestError:
        raise
    except Exception as exc:
        raise IngestError(f"{rec.scene_id}: cannot read raster {rec.path}: {exc}") from exc

    pixels = np.moveaxis(rgb, 0, -1)
    finite = np.isfinite(pixels).all(-1) & (pixels >= 0).all(-1)
    mask = m & finite & footprint
    pixels = np.where(finite[..., None], pixels, 0.0).astype(np.float32)
    pixels[~mask] = 0.0
    poly_px = polygon_mask.sum()
    coverage = float((mask & polygon_mask).sum() / poly_px) if poly_px else 0.0
    quality = SceneQuality(rec.tile_clear_fraction, rec.tile_cloud_fraction,
                           rec.tile_shadow_fraction, rec.tile_haze_fraction,
                           coverage, rec.sun_elevation_deg)
    scene = Scene(rec.scene_id, pixels, mask, rec.timestamp, int(rec.utc_offset_minutes),
                  grid.offset(r0, c0), Generation(rec.generation), quality)
    return scene, has_mask


def _raster_bounds(path):
    import rasterio
    with rasterio.open(path) as src:
        return src.bounds, src.crs.to_string() if src.crs else None, src.transform


def load_location(manifest: Sequence[ManifestRecord], candidate: CandidateLocation,
                  crs: Optional[str] = None, max_tile_cloud: Optional[float] = None,
                  workers: int = 1) -> LocationDataset:
    """Read every manifest scene that intersects the candidate polygon.

    Scenes are cropped to the polygon's bounding box on the common pixel grid.
    Records carrying a ``location_id`` are matched on it instead of on their
    footprint. ``max_tile_cloud`` optionally drops cloudy tiles up front.
    """
    from shapely.geometry import box

    poly = candidate.polygon
    picked, grid, grid_crs = [], None, crs
    for rec in manifest:
        if rec.location_id is not None and rec.location_id != candidate.location_id:
            continue
        if max_tile_cloud is not None and rec.tile_cloud_fraction >= max_tile_cloud:
            continue
        try:
            bounds, rcrs, aff = _raster_bounds(rec.path)
        except Exception as exc:
            raise IngestError(f"{rec.scene_id}: cannot read raster {rec.path}: {exc}") from exc
        if grid_crs is not None and rcrs is not None and rcrs != grid_crs:
            raise IngestError(f"{rec.scene_id}: CRS {rcrs} differs from {grid_crs}")
        if rec.location_id is None and not box(*bounds).intersects(poly):
            continue
        if grid is None:
            grid = GeoTransform.from_affine(aff)
            grid_crs = grid_crs or rcrs
        picked.append(rec)
    if not picked:
        raise IngestError(f"{candidate.location_id}: no scenes intersect the candidate polygon")

    r0, r1, c0, c1 = _grid_window(grid, grid, poly.bounds)
    window_transform = grid.offset(r0, c0)
    polygon_mask = rasterize_polygon(poly, window_transform, r1 - r0, c1 - c0)

    def read(rec):
        return _read_scene(rec, grid, (r0, r1, c0, c1), grid_crs, polygon_mask)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            loaded = list(pool.map(read, picked))
    else:
        loaded = [read(rec) for rec in picked]
    warnings = [f"{s.scene_id}: no mask band, all pixels treated as usable"
                for s, has_mask in loaded if not has_mask]
    for w in warnings:
        log.warning(w)
    ds = LocationDataset(candidate, [s for s, _ in loaded], window_transform, grid_crs, warnings)
    ds._polygon_mask = polygon_mask
    return ds


@dataclass
class FilterReport:
    mode: str
    total: int
    kept: int
    dropped: List[tuple] = field(default_factory=list)   # (scene_id, reason)

    @property
    def counts(self) -> dict:
        out = {"coverage": 0, "clean": 0, "time": 0, "colour": 0}
        for _, reason in self.dropped:
            out[reason] += 1
        return out

    def to_dict(self) -> dict:
        return {"mode": self.mode, "total": self.total, "kept": self.kept,
                "counts": self.counts, "dropped": [list(d) for d in self.dropped]}


def local_minutes(scene: Scene) -> float:
    t = scene.local_time
    return t.hour * 60 + t.minute + t.second / 60.0


def band_means(scene: Scene, region: np.ndarray) -> np.ndarray:
    usable = scene.mask & region
    if not usable.any():
        return np.full(3, np.nan)
    return scene.pixels[usable].astype(np.float64).mean(0)


def _is_clean(q: SceneQuality) -> bool:
    tol = 1e-12
    return (q.tile_clear_fraction >= CLEAN_FRACTION - tol
            and 1.0 - q.tile_cloud_fraction >= CLEAN_FRACTION - tol
            and 1.0 - q.tile_shadow_fraction >= CLEAN_FRACTION - tol
            and 1.0 - q.tile_haze_fraction >= CLEAN_FRACTION - tol)


def quality_filter(dataset: LocationDataset, mode: Mode = Mode.DETECT,
                   market_area: Optional[np.ndarray] = None):
    """Drop scenes failing coverage, cleanliness, acquisition-time or colour checks.

    Reasons are assigned in that order, one per dropped scene. The reference
    statistics (median local acquisition time over the input stack, colour
    mean and SD over scenes passing the first three checks) are stored on the
    returned dataset and reused if it is filtered again in the same mode, so
    filtering is idempotent.
    """
    mode = Mode(mode)
    if len(dataset) == 0:
        raise InsufficientImagery(f"{dataset.location_id}: empty dataset")
    if mode is Mode.TRACK and market_area is None:
        raise ValueError("TRACK mode needs the detected market area")
    region = dataset.polygon_mask
    stats = dict(dataset.filter_stats.get(mode.value, {}))
    scenes = dataset.scenes

    if "median_minutes" not in stats:
        stats["median_minutes"] = float(np.median([local_minutes(s) for s in scenes]))
    dropped, survivors = [], []
    for s in scenes:
        if mode is Mode.DETECT:
            covered = s.quality.candidate_coverage_fraction >= DETECT_COVERAGE
        else:
            area_px = market_area.sum()
            covered = area_px > 0 and (s.mask & market_area).sum() / area_px >= TRACK_COVERAGE
        if not covered:
            dropped.append((s.scene_id, "coverage"))
        elif not _is_clean(s.quality):
            dropped.append((s.scene_id, "clean"))
        elif abs(local_minutes(s) - stats["median_minutes"]) > MAX_TIME_OFFSET_MIN:
            dropped.append((s.scene_id, "time"))
        else:
            survivors.append(s)

    means = np.array([band_means(s, region) for s in survivors]).reshape(-1, 3)
    if "colour_mean" not in stats:
        ok = np.isfinite(means).all(1)
        if ok.sum() >= 2:
            stats["colour_mean"] = means[ok].mean(0).tolist()
            stats["colour_sd"] = means[ok].std(0, ddof=1).tolist()
        else:
            stats["colour_mean"] = [np.nan] * 3
            stats["colour_sd"] = [np.nan] * 3
    mu = np.array(stats["colour_mean"])
    sd = np.array(stats["colour_sd"])
    kept = []
    for s, m in zip(survivors, means):
        with np.errstate(invalid="ignore"):
            bad = np.any(np.abs(m - mu) > COLOUR_SD * sd)
        if bad:
            dropped.append((s.scene_id, "colour"))
        else:
            kept.append(s)

    order = {s.scene_id: i for i, s in enumerate(scenes)}
    dropped.sort(key=lambda d: order[d[0]])
    report = FilterReport(mode.value, len(scenes), len(kept), dropped)
    if len(kept) < MIN_SCENES:
        raise InsufficientImagery(f"{dataset.location_id}: insufficient imagery "
                                  f"({len(kept)} scenes survive {mode.value} filtering)")
    out = dataset.subset(kept)
    out.filter_stats[mode.value] = stats
    return out, report


def read_candidates(path) -> List[CandidateLocation]:
    """Candidate polygons from a GeoJSON FeatureCollection.

    Each feature needs a ``location_id`` property; ``utc_offset_minutes`` is optional.
    """
    from shapely.geometry import shape

    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    out = []
    for f in doc.get("features", []):
        p = f.get("properties") or {}
        if "location_id" not in p:
            raise IngestError(f"{path}: candidate feature without location_id")
        out.append(CandidateLocation(str(p["location_id"]), shape(f["geometry"]),
                                     int(p.get("utc_offset_minutes", 0))))
    ids = [c.location_id for c in out]
    if len(set(ids)) != len(ids):
        raise IngestError(f"{path}: duplicate location_id")
    return out


def write_candidates(candidates: Sequence[CandidateLocation], path, crs: Optional[str] = None) -> None:
    doc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "geometry": c.polygon.__geo_interface__,
         "properties": {"location_id": c.location_id, "utc_offset_minutes": c.utc_offset_minutes}}
        for c in candidates]}
    if crs:
        doc["crs"] = {"type": "name", "properties": {"name": crs}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def candidates_crs(path) -> Optional[str]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return (doc.get("crs") or {}).get("properties", {}).get("name")
