"""
Difference signals: polar colour angles, per-image differences against the
reference composite, weekday aggregation and the cleaning steps that turn
them into one periodicity field per weekday.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from . import _kernels
from .composite import HI, LO, LANES, MIN_VALID, networks, sample_schedule
from .raster import DayOfWeek, LocationDataset, Scene

log = logging.getLogger(__name__)

NBANDS = 5
RGB = slice(0, 3)
ANGLES = slice(3, 5)


def polar_angles(r, g, b):
    """Colour angles (theta1, theta2) of non-negative reflectances.

    theta1 = atan(sqrt(r^2 + g^2) / b) and theta2 = atan(g / b), both in
    [0, pi/2]. A zero blue band gives pi/2 for a non-zero numerator and 0
    for 0/0.
    """
    r = np.asarray(r, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.arctan2(np.hypot(r, g), b), np.arctan2(g, b)


def scene_bands(pixels: np.ndarray) -> np.ndarray:
    """(..., 3) reflectance to (..., 5) float32 bands R, G, B, theta1, theta2."""
    px = np.asarray(pixels, dtype=np.float32)
    t1, t2 = polar_angles(px[..., 0], px[..., 1], px[..., 2])
    out = np.empty(px.shape[:-1] + (NBANDS,), dtype=np.float32)
    out[..., :3] = px
    out[..., 3] = t1
    out[..., 4] = t2
    return out


def band_stack(scenes: Sequence[Scene], rows: slice = slice(None), cols: slice = slice(None),
               maps: Optional[Mapping[str, tuple]] = None):
    """Stack a window of every scene as (T, 5, P) float32 plus (T, P) validity.

    ``maps`` optionally holds per-scene harmonisation maps (scene id to
    harmonize.SceneMap) applied to the window on the fly.
    """
    from .harmonize import apply_map

    first = scenes[0].mask[rows, cols]
    P = first.size
    stack = np.empty((len(scenes), NBANDS, P), dtype=np.float32)
    valid = np.empty((len(scenes), P), dtype=bool)
    for t, s in enumerate(scenes):
        px = s.pixels[rows, cols]
        m = s.mask[rows, cols]
        if maps is not None and s.scene_id in maps:
            px = apply_map(px, maps[s.scene_id], m)
        bands = scene_bands(px)
        stack[t] = bands.reshape(P, NBANDS).T
        valid[t] = m.ravel()
    return stack, valid


def difference_field(scene5: np.ndarray, composite5: np.ndarray,
                     scene_valid: Optional[np.ndarray] = None,
                     composite_valid: Optional[np.ndarray] = None):
    """Absolute per-band difference between a scene and its composite.

    Returns (diff (H, W, 5), valid (H, W)); invalid pixels hold NaN.
    """
    a = np.asarray(scene5, dtype=np.float64)
    c = np.asarray(composite5, dtype=np.float64)
    if a.shape != c.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {c.shape}")
    ok = np.isfinite(a).all(-1) & np.isfinite(c).all(-1)
    if scene_valid is not None:
        ok &= scene_valid
    if composite_valid is not None:
        ok &= composite_valid
    diff = np.abs(a - c)
    diff[~ok] = np.nan
    return diff, ok


@dataclass
class DowDifferenceField:
    """Per-weekday aggregated differences (bands R, G, B, theta1, theta2)."""

    bands: Dict[DayOfWeek, np.ndarray]          # (H, W, 5), NaN where undefined
    counts: Dict[DayOfWeek, np.ndarray] = field(default_factory=dict)  # (H, W)

    @property
    def present(self):
        return sorted(self.bands)


def dow_aggregate(differences: Mapping[DayOfWeek, Sequence[np.ndarray]],
                  lo: float = LO, hi: float = HI) -> DowDifferenceField:
    """Interval mean of each weekday's absolute difference images, per pixel and band.

    Weekdays without images are absent from the result.
    """
    bands, counts = {}, {}
    for dow, imgs in differences.items():
        imgs = [np.abs(np.asarray(im, dtype=np.float64)) for im in imgs]
        if not imgs:
            continue
        h, w, nb = imgs[0].shape
        stack = np.stack(imgs).reshape(len(imgs), h * w, nb).transpose(1, 0, 2)
        valid = np.isfinite(stack).all(-1)
        agg = _kernels.interval_mean_stack(np.ascontiguousarray(stack), valid, lo, hi)
        bands[DayOfWeek(dow)] = agg.reshape(h, w, nb)
        counts[DayOfWeek(dow)] = valid.sum(1).reshape(h, w)
    return DowDifferenceField(bands, counts)


def combined_measure(field5: np.ndarray) -> np.ndarray:
    """Largest colour-band difference times largest angle difference, per pixel."""
    f = np.asarray(field5, dtype=np.float64)
    return f[..., RGB].max(-1) * f[..., ANGLES].max(-1)


def median_filter(values: np.ndarray, size: int, valid: Optional[np.ndarray] = None):
    """Masked sliding median with the window shrunk at the raster edges.

    Returns (filtered, valid); pixels whose window has no valid value stay invalid.
    """
    if size % 2 != 1:
        raise ValueError("median window size must be odd")
    v = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(v) if valid is None else (np.asarray(valid, bool) & np.isfinite(v))
    return _kernels.masked_median_filter(v, ok, size // 2)


def clean_field(fields: Mapping[DayOfWeek, np.ndarray], kernel: int = 5) -> Dict[DayOfWeek, np.ndarray]:
    """Median-smooth each weekday field, then subtract the mean of the other weekdays.

    NaN marks invalid pixels. Negative results clamp to zero. With a single
    weekday present the subtraction is skipped.
    """
    smoothed = {}
    for dow, f in fields.items():
        out, ok = median_filter(f, kernel)
        out[~ok] = np.nan
        smoothed[DayOfWeek(dow)] = out
    days = sorted(smoothed)
    if len(days) < 2:
        log.warning("only one weekday present; skipping cross-weekday subtraction")
        return smoothed
    stack = np.stack([smoothed[d] for d in days])
    present = np.isfinite(stack)
    total = np.where(present, stack, 0.0).sum(0)
    n = present.sum(0)
    cleaned = {}
    for k, d in enumerate(days):
        others = n - present[k]
        other_sum = total - np.where(present[k], stack[k], 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_others = np.where(others > 0, other_sum / np.maximum(others, 1), 0.0)
        c = np.maximum(stack[k] - mean_others, 0.0)
        c[~present[k]] = np.nan
        cleaned[d] = c
    return cleaned


def dow_difference_fields(dataset: LocationDataset, active: Optional[np.ndarray] = None,
                          min_valid: int = MIN_VALID, block_pixels: int = 8192,
                          maps: Optional[Mapping[str, tuple]] = None) -> DowDifferenceField:
    """Aggregated weekday differences for a whole location.

    Builds every scene's reference composite and difference on the fly, pixel
    block by pixel block, restricted to ``active`` pixels (default: inside the
    candidate polygon). Equivalent to composing build_reference_composite,
    difference_field and dow_aggregate, without holding per-scene differences.
    ``maps`` applies harmonisation on the fly (see band_stack).
    """
    scenes = dataset.scenes
    h, w = dataset.shape
    if active is None:
        active = dataset.polygon_mask
    sched = sample_schedule(scenes)
    if len(sched.targets) < len(scenes):
        log.info("%s: %d scenes without reference imagery", dataset.location_id,
                 len(scenes) - len(sched.targets))
    dows = dataset.days_of_week
    na, nb, no = networks()
    out = np.full((7, NBANDS, h * w), np.nan)
    counts = np.zeros((7, h * w), dtype=np.int64)
    rows_per_block = max(1, block_pixels // w)
    for r0 in range(0, h, rows_per_block):
        rows = slice(r0, min(h, r0 + rows_per_block))
        act = active[rows].ravel()
        if not act.any():
            continue
        stack, valid = band_stack(scenes, rows, maps=maps)
        agg, cnt = _kernels.dow_difference_block(
            stack, valid, act, sched.targets, dows, sched.idx, sched.wts, sched.n,
            sched.exp_idx, sched.exp_n, na, nb, no, min_valid, LO, HI, LANES)
        p0 = r0 * w
        out[:, :, p0:p0 + agg.shape[2]] = agg
        counts[:, p0:p0 + agg.shape[2]] = cnt
    bands, cnts = {}, {}
    for d in range(7):
        if counts[d].any():
            bands[DayOfWeek(d)] = out[d].T.reshape(h, w, NBANDS)
            cnts[DayOfWeek(d)] = counts[d].reshape(h, w)
    return DowDifferenceField(bands, cnts)


def periodicity_fields(dowfield: DowDifferenceField, kernel: int = 5) -> Dict[DayOfWeek, np.ndarray]:
    """Combined measure per weekday followed by the cleaning steps."""
    combined = {d: combined_measure(b) for d, b in dowfield.bands.items()}
    return clean_field(combined, kernel)


def write_debug_fields(fields: Mapping[DayOfWeek, np.ndarray], dataset: LocationDataset, out_dir):
    """Dump each weekday field as a single-band float32 GeoTIFF."""
    import rasterio
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = dataset.shape
    paths = []
    for d, f in sorted(fields.items()):
        p = out_dir / f"{dataset.location_id}_{DayOfWeek(d).label.lower()}.tif"
        with rasterio.open(p, "w", driver="GTiff", height=h, width=w, count=1,
                           dtype="float32", crs=dataset.crs,
                           transform=dataset.transform.to_affine(), nodata=np.nan) as dst:
            dst.write(f.astype(np.float32), 1)
        paths.append(p)
    return paths
