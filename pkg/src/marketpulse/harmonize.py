"""
Cross-generation colour harmonisation by quantile matching.

Every scene, old or new generation, is mapped band by band onto the
distribution of a monthly composite built from new-generation scenes only.
Quantiles are taken over usable pixels inside the candidate polygon.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import _kernels
from .composite import HI, LO
from .raster import Generation, LocationDataset, Scene

log = logging.getLogger(__name__)

NQUANTILES = 256
MonthKey = Tuple[int, int]


class NoHarmonizationTarget(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TargetComposite:
    month: MonthKey
    composite: np.ndarray   # (H, W, 3), NaN where undefined
    quantiles: np.ndarray   # (3, 256) non-decreasing per band

    def quantiles_at(self, probs: np.ndarray) -> np.ndarray:
        grid = np.linspace(0.0, 1.0, self.quantiles.shape[1])
        return np.stack([np.interp(probs, grid, q) for q in self.quantiles])


def month_of(scene: Scene) -> MonthKey:
    t = scene.local_time
    return t.year, t.month


def _month_index(key: MonthKey) -> int:
    return key[0] * 12 + key[1] - 1


def sorted_quantiles(svals: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Linear-interpolation quantiles (numpy's default) of an already sorted sample."""
    n = svals.size
    h = (n - 1) * np.asarray(probs, dtype=np.float64)
    lo = np.floor(h).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = h - lo
    a = svals[lo].astype(np.float64)
    b = svals[hi].astype(np.float64)
    return a + frac * (b - a)


def band_quantiles(values: np.ndarray, n: int = NQUANTILES) -> np.ndarray:
    """n evenly spaced quantiles (0..1 inclusive) with linear interpolation between order statistics."""
    return sorted_quantiles(np.sort(np.asarray(values, dtype=np.float64)), np.linspace(0.0, 1.0, n))


def build_target_composites(dataset: LocationDataset) -> Dict[MonthKey, TargetComposite]:
    """Monthly interval-mean composites of the new-generation scenes.

    Every month spanned by the dataset gets an entry; months without new
    scenes reuse the closest month that has them (earlier month on ties).
    """
    new = [s for s in dataset.scenes if s.generation == Generation.NEW]
    if not new:
        raise NoHarmonizationTarget(f"{dataset.location_id}: no harmonization target "
                                    "(no new-generation scenes)")
    region = dataset.polygon_mask
    h, w = dataset.shape
    pix = np.flatnonzero(region.ravel())
    by_month: Dict[MonthKey, list] = {}
    for s in new:
        by_month.setdefault(month_of(s), []).append(s)

    built: Dict[MonthKey, TargetComposite] = {}
    for key, scenes in sorted(by_month.items()):
        stack = np.stack([s.pixels.reshape(-1, 3)[pix] for s in scenes], axis=1)
        valid = np.stack([s.mask.ravel()[pix] for s in scenes], axis=1)
        agg = _kernels.interval_mean_stack(np.ascontiguousarray(stack, dtype=np.float64),
                                           valid, LO, HI)
        comp = np.full((h * w, 3), np.nan)
        comp[pix] = agg
        ok = np.isfinite(agg).all(1)
        if not ok.any():
            continue
        q = np.stack([band_quantiles(agg[ok, b]) for b in range(3)])
        built[key] = TargetComposite(key, comp.reshape(h, w, 3), q)
    if not built:
        raise NoHarmonizationTarget(f"{dataset.location_id}: new-generation scenes have no usable pixels")

    months = sorted({month_of(s) for s in dataset.scenes} | set(built))
    have = sorted(built, key=_month_index)
    out = {}
    for key in months:
        if key in built:
            out[key] = built[key]
            continue
        m = _month_index(key)
        # min over (distance, month index) picks the earlier month on ties
        best = min(have, key=lambda k: (abs(_month_index(k) - m), _month_index(k)))
        out[key] = built[best]
    return out


def _monotone_map(src_q: np.ndarray, tgt_q: np.ndarray):
    """Collapse tied source quantiles so interpolation nodes strictly increase."""
    xs, inv = np.unique(src_q, return_inverse=True)
    ys = np.zeros(xs.size)
    np.add.at(ys, inv, tgt_q)
    ys /= np.bincount(inv, minlength=xs.size)
    return xs, ys


def _refine_map(svals: np.ndarray, probs: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Make the map affine across the order-statistic gap around each node.

    A source quantile that falls strictly between two order statistics is
    replaced by nodes at those two statistics, placed so that the same
    linear interpolation of the mapped sample lands on the target quantile.
    Without this the kink at the node leaks into the matched quantiles,
    which matters in sparse tails.
    """
    n = svals.size
    h = (n - 1) * probs
    lo = np.floor(h).astype(np.int64)
    frac = h - lo
    hi = np.minimum(lo + 1, n - 1)
    xl_all = svals[lo].astype(np.float64)
    xh_all = svals[hi].astype(np.float64)
    src = xl_all + frac * (xh_all - xl_all)
    # node index of each quantile; tied quantiles sit on an order statistic
    pos = np.searchsorted(xs, src)
    m = xs.size
    count = np.bincount(pos, minlength=m)
    first = np.full(m, -1)
    first[pos[::-1]] = np.arange(pos.size)[::-1]
    inside = (count[pos] == 1) & (frac > 0.0) & (xl_all < src) & (src < xh_all)
    ml_all = np.interp(xl_all, xs, ys)
    mh_all = np.interp(xh_all, xs, ys)
    return _kernels.refine_nodes(xs, ys, first, inside, frac, xl_all, xh_all, ml_all, mh_all)


BandMap = Optional[Tuple[np.ndarray, np.ndarray]]
SceneMap = Tuple[BandMap, BandMap, BandMap]


def scene_map(scene: Scene, target: TargetComposite, region: Optional[np.ndarray] = None,
              n: int = NQUANTILES) -> SceneMap:
    """Per-band (source nodes, target nodes) of the quantile match; None is the identity."""
    usable = scene.mask if region is None else (scene.mask & region)
    npx = int(usable.sum())
    if npx == 0:
        return (None, None, None)
    k = min(n, npx)
    probs = np.linspace(0.0, 1.0, k)
    tgt = target.quantiles if k == target.quantiles.shape[1] else target.quantiles_at(probs)
    maps = []
    for b in range(3):
        svals = np.sort(scene.pixels[..., b][usable])
        src_q = sorted_quantiles(svals, probs)
        if src_q[-1] == src_q[0]:
            maps.append(None)
        else:
            xs, ys = _monotone_map(src_q, tgt[b])
            maps.append(_refine_map(svals, probs, xs, ys))
    return tuple(maps)


def apply_map(pixels: np.ndarray, smap: SceneMap, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Mapped float32 copy of (..., 3) ``pixels``; pixels outside ``mask`` are copied unchanged."""
    out = np.array(pixels, dtype=np.float32, copy=True)
    for b, m in enumerate(smap):
        if m is None:
            continue
        band = np.ascontiguousarray(out[..., b])
        flat = band.reshape(-1)
        if mask is None:
            vals = flat
        else:
            sel = np.asarray(mask).reshape(-1)
            vals = flat[sel]
        mapped = _kernels.piecewise_linear(vals, m[0], m[1], np.empty(vals.size, np.float64))
        np.maximum(mapped, 0.0, out=mapped)
        if mask is None:
            flat[:] = mapped
        else:
            flat[sel] = mapped
        out[..., b] = band
    return out


def quantile_match(scene: Scene, target: TargetComposite,
                   region: Optional[np.ndarray] = None, n: int = NQUANTILES) -> Scene:
    """Map each band of ``scene`` onto the target's distribution.

    Source quantiles come from usable pixels inside ``region`` (whole raster
    if omitted). Pixels are mapped by piecewise-linear interpolation between
    matching quantiles, clamped at the ends and at zero. Masked pixels are
    left untouched; a constant band is returned unchanged.
    """
    smap = scene_map(scene, target, region, n)
    if all(m is None for m in smap):
        return scene
    return scene.replace(pixels=apply_map(scene.pixels, smap, scene.mask))


def _target_for(targets: Dict[MonthKey, TargetComposite], scene: Scene) -> TargetComposite:
    key = month_of(scene)
    if key not in targets:
        m = _month_index(key)
        key = min(targets, key=lambda k: (abs(_month_index(k) - m), _month_index(k)))
    return targets[key]


def harmonization_maps(dataset: LocationDataset,
                       targets: Optional[Dict[MonthKey, TargetComposite]] = None) -> Dict[str, SceneMap]:
    """Quantile maps of every scene, keyed by scene id, without materialising matched rasters."""
    if targets is None:
        targets = build_target_composites(dataset)
    region = dataset.polygon_mask
    return {s.scene_id: scene_map(s, _target_for(targets, s), region) for s in dataset.scenes}


def harmonize_dataset(dataset: LocationDataset,
                      targets: Optional[Dict[MonthKey, TargetComposite]] = None) -> LocationDataset:
    """Quantile-match every scene to the target composite of its month."""
    if targets is None:
        targets = build_target_composites(dataset)
    region = dataset.polygon_mask
    return dataset.subset([quantile_match(s, _target_for(targets, s), region) for s in dataset.scenes])
