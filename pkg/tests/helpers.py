"""Shared test builders and brute-force oracles.

The oracles are deliberately naive (pure Python loops, exact fractions where
ranks are involved) and share no code with the package.
"""

from __future__ import annotations

import math
from collections import deque
from datetime import datetime, timedelta, timezone
from fractions import Fraction

import numpy as np
from shapely.geometry import box

from marketpulse.raster import (CandidateLocation, GeoTransform, LocationDataset, Scene,
                                SceneQuality)

T0 = datetime(2019, 1, 7, 7, 0, tzinfo=timezone.utc)     # a Monday


def make_scene(k, pixels, mask=None, t=None, offset=0, generation="NEW", quality=None,
               transform=None, scene_id=None):
    pixels = np.asarray(pixels, dtype=np.float32)
    if mask is None:
        mask = np.ones(pixels.shape[:2], dtype=bool)
    if t is None:
        t = T0 + timedelta(days=k)
    return Scene(scene_id or f"s{k:04d}", pixels, mask, t, offset,
                 transform or GeoTransform(0.0, 0.0, 3.0), generation,
                 quality or SceneQuality())


def make_dataset(scenes, h=None, w=None, polygon=None, transform=None, location_id="loc"):
    transform = transform or GeoTransform(0.0, 0.0, 3.0)
    if h is None:
        h, w = scenes[0].shape
    if polygon is None:
        ps = transform.pixel_size_m
        polygon = box(transform.origin_x, transform.origin_y - h * ps,
                      transform.origin_x + w * ps, transform.origin_y)
    return LocationDataset(CandidateLocation(location_id, polygon), scenes, transform)


def daily_stack(n, h=6, w=6, seed=0, base=None, noise=0.5):
    """n daily scenes of a textured background with small per-scene noise."""
    rng = np.random.default_rng(seed)
    if base is None:
        base = 10 + 10 * rng.random((h, w, 3))
    return [make_scene(k, np.clip(base + noise * rng.standard_normal(base.shape), 0, None))
            for k in range(n)]


# interval mean -------------------------------------------------------------

def oracle_interval_mean(values, weights=None, lo=Fraction(2, 5), hi=Fraction(3, 5)):
    """Expand, sort, keep entries whose rank interval ((i-1)/n, i/n] lies in [lo, hi]."""
    if weights is None:
        weights = [1] * len(values)
    expanded = sorted(v for v, w in zip(values, weights) for _ in range(int(w)))
    n = len(expanded)
    lo, hi = Fraction(lo), Fraction(hi)
    kept = [expanded[i - 1] for i in range(1, n + 1)
            if Fraction(i - 1, n) >= lo and Fraction(i, n) <= hi]
    if not kept:
        i = next(i for i in range(1, n + 1) if Fraction(i - 1, n) < Fraction(1, 2) <= Fraction(i, n))
        kept = [expanded[i - 1]]
    return sum(kept) / len(kept)


# median filter -------------------------------------------------------------

def oracle_median_filter(field, valid, radius):
    h, w = field.shape
    out = np.full((h, w), np.nan)
    ok = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            vals = sorted(field[a, b]
                          for a in range(max(0, i - radius), min(h, i + radius + 1))
                          for b in range(max(0, j - radius), min(w, j + radius + 1))
                          if valid[a, b])
            if not vals:
                continue
            m = len(vals)
            out[i, j] = vals[m // 2] if m % 2 else (vals[m // 2 - 1] + vals[m // 2]) / 2
            ok[i, j] = True
    return out, ok


# reference sampling and composites -----------------------------------------

def oracle_sample(scenes, target_index, window_days=42):
    """[(scene index, weight)], [expansion indices] from the replication rule."""
    tgt = scenes[target_index]
    first, extra = [], []
    for d in range(7):
        if d == tgt.day_of_week:
            continue
        same = [i for i, s in enumerate(scenes) if s.day_of_week == d]
        same.sort(key=lambda i: (abs((scenes[i].acquired_utc - tgt.acquired_utc).total_seconds()),
                                 scenes[i].acquired_utc, scenes[i].scene_id))
        inside = [i for i in same
                  if abs((scenes[i].acquired_utc - tgt.acquired_utc).total_seconds()) <= window_days * 86400]
        inside = inside[:6]
        first += list(zip(inside, (3, 3, 2, 2, 1, 1)))
        extra += [i for i in same if i not in inside][:6]
    return first, extra


def oracle_composite_pixel(values, valid, first, extra, min_valid=36):
    """Composite value of one pixel and band; values/valid indexed by scene."""
    entries = [(values[i], w) for i, w in first if valid[i]]
    count = sum(w for _, w in entries)
    if count < min_valid:
        entries += [(values[i], 1) for i in extra if valid[i]]
        count = sum(w for _, w in entries)
    if count == 0:
        return math.nan, 0
    return oracle_interval_mean([v for v, _ in entries], [w for _, w in entries]), count


# connected components -------------------------------------------------------

def oracle_components(above):
    """8-connected components of a boolean raster by breadth-first flood fill."""
    h, w = above.shape
    seen = np.zeros_like(above, dtype=bool)
    comps = []
    for i in range(h):
        for j in range(w):
            if not above[i, j] or seen[i, j]:
                continue
            comp, q = set(), deque([(i, j)])
            seen[i, j] = True
            while q:
                a, b = q.popleft()
                comp.add((a, b))
                for da in (-1, 0, 1):
                    for db in (-1, 0, 1):
                        x, y = a + da, b + db
                        if 0 <= x < h and 0 <= y < w and above[x, y] and not seen[x, y]:
                            seen[x, y] = True
                            q.append((x, y))
            comps.append(frozenset(comp))
    return comps


# statistics -----------------------------------------------------------------

def quantile7(values, p):
    """Type-7 (linear interpolation) sample quantile."""
    s = sorted(values)
    h = (len(s) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


def median(values):
    s = sorted(values)
    m = len(s)
    return s[m // 2] if m % 2 else (s[m // 2 - 1] + s[m // 2]) / 2


def epanechnikov_oracle(days, values, day, half_width=45):
    num = den = 0.0
    for d, v in zip(days, values):
        u = (day - d) / half_width
        if abs(u) < 1:
            k = 0.75 * (1 - u * u)
            num += k * v
            den += k
    return num / den if den > 0 else math.nan
