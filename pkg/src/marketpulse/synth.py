"""
Deterministic synthetic locations with known market days.

A static background (a land-cover mosaic plus roofs) is re-photographed on every
acquisition date with per-scene illumination, pixel noise, rooftop glare,
occasional one-pixel misalignment, clouds, partial tile coverage and, before
the generation switch, an affine colour distortion. On market days a
spatially coherent fraction of the market footprint is covered by stalls,
which add a fixed colour offset to the ground.

Market strength
---------------
Occupied pixels change by delta = (d - c, d, d + c) with d the brightness and
c the colour delta. With ground colour b the combined measure at nominal
attendance is

    max_i |delta_i| * max(|theta1(b + delta) - theta1(b)|, |theta2(b + delta) - theta2(b)|)

(``MarketSpec.nominal_measure``); the defaults give about 3.2 on the default
soil colour, well above the 0.4096 cutoff.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, special
from shapely.geometry import Point, Polygon
from shapely import affinity

from .raster import (CandidateLocation, DayOfWeek, Generation, GeoTransform, LocationDataset,
                     Scene, SceneQuality, rasterize_polygon)

SOIL = (24.0, 20.0, 15.0)
VEGETATION = (9.0, 13.0, 8.0)
SAND = (44.0, 41.0, 36.0)
METAL = (38.0, 38.0, 40.0)
RUST = (30.0, 19.0, 13.0)
CLOUD = (62.0, 63.0, 66.0)


@dataclass(frozen=True)
class MarketSpec:
    dows: Tuple[int, ...] = (int(DayOfWeek.SAT),)
    center_frac: Tuple[float, float] = (0.5, 0.5)      # (row, col) as fractions of the raster
    radii_m: Tuple[float, float] = (24.0, 16.0)         # ellipse semi-axes (x, y)
    brightness_delta: float = 10.0
    colour_delta: float = 6.0
    occupancy: float = 0.7            # share of the footprint covered at nominal attendance
    seasonal_amplitude: float = 0.0   # attendance = 1 + A cos(2 pi (doy - peak) / 365.25)
    seasonal_peak_doy: int = 196
    dropout: float = 0.02             # probability that a market day is skipped
    blob_sigma_px: float = 1.5

    @property
    def delta(self) -> np.ndarray:
        d, c = self.brightness_delta, self.colour_delta
        return np.array([d - c, d, d + c])

    def nominal_measure(self, ground=SOIL) -> float:
        from .signal import polar_angles
        b = np.asarray(ground, dtype=np.float64)
        o = b + self.delta
        t_b = polar_angles(*b)
        t_o = polar_angles(*o)
        return float(np.abs(self.delta).max() * max(abs(t_o[0] - t_b[0]), abs(t_o[1] - t_b[1])))

    def attendance(self, day: date) -> float:
        doy = day.timetuple().tm_yday
        return 1.0 + self.seasonal_amplitude * math.cos(2 * math.pi * (doy - self.seasonal_peak_doy) / 365.25)


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.8
    illumination_sd: float = 0.03
    roof_sd: float = 0.06
    cloud_rate: float = 0.5            # mean number of cloud ellipses per scene
    cloud_radius_px: Tuple[float, float] = (4.0, 0.35)   # (min px, max as a share of the raster)
    jitter_prob: float = 0.1
    generation_switch: Optional[date] = None
    old_gain: Tuple[float, float, float] = (0.45, 0.5, 0.55)
    old_offset: Tuple[float, float, float] = (7.0, 6.5, 6.0)
    faulty_rate: float = 0.01
    partial_rate: float = 0.03
    late_rate: float = 0.02            # share of acquisitions far from the usual time of day

    @classmethod
    def none(cls) -> "NoiseSpec":
        return cls(pixel_sigma=0.0, illumination_sd=0.0, roof_sd=0.0, cloud_rate=0.0,
                   jitter_prob=0.0, faulty_rate=0.0, partial_rate=0.0, late_rate=0.0)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    location_id: str = "synth-000"
    height: int = 128
    width: int = 128
    pixel_size_m: float = 3.0
    origin: Tuple[float, float] = (500000.0, 1100000.0)
    crs: str = "EPSG:32637"
    start: date = date(2019, 1, 1)
    end: date = date(2019, 12, 31)
    cadence_days: float = 1.0
    cadence_jitter_days: float = 0.0
    utc_offset_minutes: int = 180
    local_time_minutes: float = 630.0
    local_time_sd: float = 6.0
    polygon_half_width: float = 0.38   # candidate octagon half-width as a share of the raster
    market: Optional[MarketSpec] = field(default_factory=MarketSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError("raster must be at least 16 x 16")
        if not self.pixel_size_m > 0:
            raise ValueError("pixel_size_m must be positive")
        span = (self.end - self.start).days + 1
        if span <= 0:
            raise ValueError("empty date range")
        if not 0 < self.cadence_days <= span:
            raise ValueError("revisit cadence must be positive and fit in the date range")
        if self.market is not None:
            if self.footprint().area < 50.0:
                raise ValueError("market footprint must cover at least 50 m2")
            if not 0 < self.market.occupancy <= 1:
                raise ValueError("occupancy must be in (0, 1]")

    @property
    def transform(self) -> GeoTransform:
        return GeoTransform(self.origin[0], self.origin[1], self.pixel_size_m)

    def candidate_polygon(self) -> Polygon:
        """Octagon centred on the raster."""
        px = self.pixel_size_m
        cx = self.origin[0] + self.width * px / 2
        cy = self.origin[1] - self.height * px / 2
        a = self.polygon_half_width * min(self.height, self.width) * px
        c = 0.5 * a
        pts = [(a - c, a), (a, a - c), (a, c - a), (a - c, -a),
               (c - a, -a), (-a, c - a), (-a, a - c), (c - a, a)]
        return Polygon([(cx + x, cy + y) for x, y in pts])

    def candidate(self) -> CandidateLocation:
        return CandidateLocation(self.location_id, self.candidate_polygon(), self.utc_offset_minutes)

    def footprint(self) -> Optional[Polygon]:
        if self.market is None:
            return None
        px = self.pixel_size_m
        r, c = self.market.center_frac
        x = self.origin[0] + c * self.width * px
        y = self.origin[1] - r * self.height * px
        return affinity.scale(Point(x, y).buffer(1.0, 64), *self.market.radii_m)

    def truth(self) -> Tuple[DayOfWeek, ...]:
        return () if self.market is None else tuple(sorted(DayOfWeek(d) for d in self.market.dows))

    def dates(self) -> List[date]:
        rng = np.random.default_rng([self.seed, 1])
        span = (self.end - self.start).days
        n = int(span // self.cadence_days) + 1
        offs = np.arange(n) * self.cadence_days
        if self.cadence_jitter_days > 0:
            offs = offs + rng.uniform(-self.cadence_jitter_days, self.cadence_jitter_days, n)
        days = np.unique(np.clip(np.round(offs), 0, span).astype(np.int64))
        return [self.start + timedelta(days=int(d)) for d in days]


def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / max(f.std(), 1e-12)


class SynthLocation:
    """Static scene content of one configured location, and its acquisitions."""

    def __init__(self, config: SynthConfig):
        self.config = config
        cfg = config
        H, W = cfg.height, cfg.width
        rng = np.random.default_rng([cfg.seed, 0])
        # canvas carries a one-pixel border so misaligned scenes can be cropped from it
        ch, cw = H + 2, W + 2
        canvas_tf = cfg.transform.offset(-1, -1)
        self.market_mask = np.zeros((ch, cw), dtype=bool)
        if cfg.market is not None:
            self.market_mask = rasterize_polygon(cfg.footprint(), canvas_tf, ch, cw)
        keepout = ndimage.binary_dilation(self.market_mask, iterations=3)
        # land cover runs continuously from vegetation through soil to sand, so
        # colour histograms have no gaps; markets sit on open soil
        cover = special.ndtr(_smooth_noise(rng, (ch, cw), 5.0))
        cover[keepout] = 0.5 + 0.03 * rng.standard_normal(int(keepout.sum()))
        soil = np.empty((ch, cw, 3))
        for b in range(3):
            soil[..., b] = np.interp(cover, (0.0, 0.5, 1.0), (VEGETATION[b], SOIL[b], SAND[b]))
        soil += 0.6 * rng.standard_normal((ch, cw, 3))
        roofs = np.zeros((ch, cw), dtype=bool)
        for _ in range(max(1, H * W // 400)):
            h, w = rng.integers(3, 9, 2)
            r0, c0 = rng.integers(0, ch - h), rng.integers(0, cw - w)
            if keepout[r0:r0 + h, c0:c0 + w].any():
                continue
            colour = np.asarray(METAL if rng.random() < 0.6 else RUST) * rng.uniform(0.55, 1.2)
            soil[r0:r0 + h, c0:c0 + w] = colour + 0.5 * rng.standard_normal((h, w, 3))
            roofs[r0:r0 + h, c0:c0 + w] = True
        self.canvas = np.maximum(soil, 0.0).astype(np.float32)
        self.roofs = roofs
        rr, cc = np.nonzero(self.market_mask)
        self._mk_box = None
        if rr.size:
            self._mk_box = (slice(rr.min(), rr.max() + 1), slice(cc.min(), cc.max() + 1))
        self.dates = cfg.dates()

    @property
    def background(self) -> np.ndarray:
        """Noise-free, aligned ground colour (H, W, 3)."""
        return self.canvas[1:-1, 1:-1]

    @property
    def market_pixels(self) -> np.ndarray:
        return self.market_mask[1:-1, 1:-1]

    def occupancy(self, rng, share: float) -> np.ndarray:
        """Canvas mask covering exactly round(share * n) footprint pixels in coherent blobs."""
        occ = np.zeros_like(self.market_mask)
        if self._mk_box is None or share <= 0:
            return occ
        box = self._mk_box
        sub = self.market_mask[box]
        n = int(sub.sum())
        k = int(round(min(share, 1.0) * n))
        if k == 0:
            return occ
        f = ndimage.gaussian_filter(rng.standard_normal(sub.shape), self.config.market.blob_sigma_px)
        vals = f[sub]
        chosen = np.zeros(n, dtype=bool)
        chosen[np.argsort(-vals, kind="stable")[:k]] = True
        o = np.zeros(sub.shape, dtype=bool)
        o[sub] = chosen
        occ[box] = o
        return occ

    def scene(self, k: int) -> Tuple[Scene, Tuple[int, int, int, int]]:
        """The k-th acquisition and the (row0, row1, col0, col1) extent of its tile."""
        cfg = self.config
        nz = cfg.noise
        H, W = cfg.height, cfg.width
        day = self.dates[k]
        rng = np.random.default_rng([cfg.seed, 2, k])

        minutes = cfg.local_time_minutes + cfg.local_time_sd * rng.standard_normal()
        if rng.random() < nz.late_rate:
            minutes += rng.choice([-1, 1]) * rng.uniform(40, 90)
        local = datetime(day.year, day.month, day.day, tzinfo=timezone.utc) + timedelta(
            seconds=round(60.0 * float(minutes)))
        acquired = local - timedelta(minutes=cfg.utc_offset_minutes)
        dow = local.weekday()

        img = self.canvas.astype(np.float32, copy=True)
        if nz.roof_sd > 0:
            img[self.roofs] *= np.float32(max(0.0, 1.0 + nz.roof_sd * rng.standard_normal()))
        m = cfg.market
        if m is not None and dow in m.dows and rng.random() >= m.dropout:
            occ = self.occupancy(rng, m.occupancy * m.attendance(day))
            img[occ] += m.delta.astype(np.float32)
        dy, dx = 0, 0
        if rng.random() < nz.jitter_prob:
            while dy == 0 and dx == 0:
                dy, dx = rng.integers(-1, 2, 2)
        img = img[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
        gain = 1.0 + nz.illumination_sd * rng.standard_normal()
        img = img * np.float32(gain)
        if nz.pixel_sigma > 0:
            img += np.float32(nz.pixel_sigma) * rng.standard_normal((H, W, 3), dtype=np.float32)
        generation = Generation.NEW
        if nz.generation_switch is not None and day < nz.generation_switch:
            generation = Generation.OLD
            img = img * np.asarray(nz.old_gain, np.float32) + np.asarray(nz.old_offset, np.float32)
        if rng.random() < nz.faulty_rate:
            img[..., 0] *= np.float32(2.5)

        cloud = np.zeros((H, W), dtype=bool)
        for _ in range(rng.poisson(nz.cloud_rate)):
            rmax = max(nz.cloud_radius_px[0] + 1, nz.cloud_radius_px[1] * min(H, W))
            ry, rx = rng.uniform(nz.cloud_radius_px[0], rmax, 2)
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            r0, r1 = max(0, int(cy - ry)), min(H, int(cy + ry) + 1)
            c0, c1 = max(0, int(cx - rx)), min(W, int(cx + rx) + 1)
            yy, xx = np.mgrid[r0:r1, c0:c1]
            cloud[r0:r1, c0:c1] |= ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
        img[cloud] = np.asarray(CLOUD, np.float32)

        ext = (0, H, 0, W)
        if rng.random() < nz.partial_rate:
            cut = int(rng.uniform(0.15, 0.7) * W)
            ext = (0, H, 0, cut) if rng.random() < 0.5 else (0, H, W - cut, W)
        inside = np.zeros((H, W), dtype=bool)
        inside[ext[0]:ext[1], ext[2]:ext[3]] = True
        img = np.maximum(img, 0.0)
        img[~inside] = 0.0
        mask = inside & ~cloud
        tile_px = (ext[1] - ext[0]) * (ext[3] - ext[2])
        cloud_share = float((cloud & inside).sum()) / tile_px

        doy = day.timetuple().tm_yday
        sun = 58.0 + 10.0 * math.cos(2 * math.pi * (doy - 172) / 365.25) + rng.standard_normal()
        if rng.random() < 0.01:
            sun -= 25.0
        poly_mask = self.polygon_mask
        coverage = float((mask & poly_mask).sum()) / max(1, int(poly_mask.sum()))
        q = SceneQuality(tile_clear_fraction=1.0 - cloud_share, tile_cloud_fraction=cloud_share,
                         tile_shadow_fraction=0.0, tile_haze_fraction=0.0,
                         candidate_coverage_fraction=coverage, sun_elevation_deg=float(sun))
        sid = f"{cfg.location_id}_{day:%Y%m%d}_{k:05d}"
        sc = Scene(sid, img.astype(np.float32), mask, acquired, cfg.utc_offset_minutes,
                   cfg.transform, generation, q)
        return sc, ext

    @property
    def polygon_mask(self) -> np.ndarray:
        if not hasattr(self, "_poly_mask"):
            cfg = self.config
            self._poly_mask = rasterize_polygon(cfg.candidate_polygon(), cfg.transform, cfg.height, cfg.width)
        return self._poly_mask

    def scenes(self) -> Iterator[Tuple[Scene, Tuple[int, int, int, int]]]:
        for k in range(len(self.dates)):
            yield self.scene(k)


def simulate(config: SynthConfig, crop: bool = True) -> LocationDataset:
    """In-memory dataset of a synthetic location (as load_location would return it).

    With ``crop`` scenes are cut to the candidate polygon's bounding box on
    the same pixel window load_location uses.
    """
    from .ingest import _grid_window

    loc = SynthLocation(config)
    pm = loc.polygon_mask
    rows, cols = slice(None), slice(None)
    tf = config.transform
    if crop:
        r0, r1, c0, c1 = _grid_window(tf, tf, config.candidate_polygon().bounds)
        rows = slice(max(r0, 0), min(r1, config.height))
        cols = slice(max(c0, 0), min(c1, config.width))
        tf = tf.offset(rows.start, cols.start)
    scenes = []
    for s, _ in loc.scenes():
        if crop:
            s = s.replace(pixels=s.pixels[rows, cols].copy(), mask=s.mask[rows, cols].copy(), transform=tf)
        scenes.append(s)
    ds = LocationDataset(config.candidate(), scenes, tf, config.crs)
    ds._polygon_mask = pm[rows, cols].copy()
    return ds


def location_configs(n: int, seed: int = 0, base: Optional[SynthConfig] = None,
                     strength: Tuple[float, float] = (0.5, 0.8)) -> List[SynthConfig]:
    """``n`` market locations with varied market day(s), placement, size and strength."""
    base = base or SynthConfig()
    rng = np.random.default_rng([seed, 7])
    out = []
    for i in range(n):
        ndays = 2 if rng.random() < 0.2 else 1
        first = int(rng.integers(0, 7))
        dows = (first,) if ndays == 1 else tuple(sorted({first, (first + 3) % 7}))
        s = rng.uniform(*strength)
        ang = rng.uniform(0, 2 * math.pi)
        rad = rng.uniform(0, 0.12)
        market = replace(base.market or MarketSpec(), dows=dows,
                         center_frac=(0.5 + rad * math.sin(ang), 0.5 + rad * math.cos(ang)),
                         radii_m=(float(rng.uniform(15, 27)), float(rng.uniform(12, 22))),
                         brightness_delta=(base.market or MarketSpec()).brightness_delta * s,
                         colour_delta=(base.market or MarketSpec()).colour_delta * s)
        out.append(replace(base, seed=int(rng.integers(2**31)), location_id=f"synth-{i:03d}",
                           origin=(base.origin[0] + 20000.0 * i, base.origin[1]), market=market))
    return out


@dataclass
class GeneratedRun:
    out_dir: Path
    manifest: Path
    candidates: Path
    truth: Path
    n_scenes: int


def write_scene(scene: Scene, ext, path: Path, crs: str) -> None:
    import rasterio

    r0, r1, c0, c1 = ext
    data = np.empty((4, r1 - r0, c1 - c0), dtype=np.float32)
    data[:3] = np.moveaxis(scene.pixels[r0:r1, c0:c1], -1, 0)
    data[3] = np.where(scene.mask[r0:r1, c0:c1], 255.0, 0.0)
    tf = scene.transform.offset(r0, c0)
    with rasterio.open(path, "w", driver="GTiff", height=r1 - r0, width=c1 - c0, count=4,
                       dtype="float32", crs=crs, transform=tf.to_affine()) as dst:
        dst.write(data)


def generate(configs: Sequence[SynthConfig], out_dir) -> GeneratedRun:
    """Write rasters, a JSON Lines manifest, candidate polygons and ground truth for ``configs``."""
    from .evaluate import write_truth
    from .ingest import ManifestRecord, format_timestamp, write_candidates, write_manifest

    if isinstance(configs, SynthConfig):
        configs = [configs]
    ids = [c.location_id for c in configs]
    if len(set(ids)) != len(ids):
        raise ValueError("location ids must be unique")
    out = Path(out_dir).resolve()
    rdir = out / "rasters"
    rdir.mkdir(parents=True, exist_ok=True)
    records, truth = [], {}
    for cfg in configs:
        loc = SynthLocation(cfg)
        for s, ext in loc.scenes():
            path = rdir / f"{s.scene_id}.tif"
            write_scene(s, ext, path, cfg.crs)
            q = s.quality
            records.append(ManifestRecord(
                s.scene_id, str(path), format_timestamp(s.acquired_utc), s.utc_offset_minutes,
                s.generation.value, q.tile_clear_fraction, q.tile_cloud_fraction,
                q.tile_shadow_fraction, q.tile_haze_fraction, q.sun_elevation_deg,
                q.candidate_coverage_fraction, cfg.location_id))
        if cfg.market is not None:
            truth[cfg.location_id] = cfg.truth()
    manifest = out / "manifest.jsonl"
    write_manifest(records, manifest, relative_to=out)
    candidates = out / "candidates.geojson"
    write_candidates([c.candidate() for c in configs], candidates, configs[0].crs)
    truth_path = out / "truth.json"
    write_truth(truth, truth_path)
    return GeneratedRun(out, manifest, candidates, truth_path, len(records))


def config_to_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)

    def conv(x):
        if isinstance(x, date):
            return x.isoformat()
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [conv(v) for v in x]
        return x

    return conv(d)


def config_from_dict(doc: dict) -> SynthConfig:
    doc = dict(doc)
    for k in ("start", "end"):
        if k in doc:
            doc[k] = date.fromisoformat(doc[k])
    for k in ("origin",):
        if k in doc:
            doc[k] = tuple(doc[k])
    if "market" in doc:
        m = doc["market"]
        doc["market"] = None if m is None else MarketSpec(**{k: tuple(v) if isinstance(v, list) else v
                                                             for k, v in m.items()})
    if "noise" in doc:
        n = dict(doc["noise"])
        if n.get("generation_switch"):
            n["generation_switch"] = date.fromisoformat(n["generation_switch"])
        doc["noise"] = NoiseSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in n.items()})
    return SynthConfig(**doc)
