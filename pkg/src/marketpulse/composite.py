"""
Reference composites: what a location looks like on days other than the
target's weekday.

Each target scene gets a weighted sample of nearby scenes from the six other
weekdays (3, 3, 2, 2, 1, 1 copies of the closest instances, at most 72
entries), aggregated per pixel and band with an interval mean over the 40th
to 60th percentile. Pixels left with fewer than 36 valid entries are
re-aggregated after adding the next six closest scenes per weekday.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .raster import LocationDataset, Scene

LO, HI = 0.40, 0.60
WINDOW_DAYS = 42
REPLICATION = (3, 3, 2, 2, 1, 1)
EXPANSION_PER_DOW = 6
MIN_VALID = 36
LANES = 128

_NETWORKS = None


def networks():
    global _NETWORKS
    if _NETWORKS is None:
        size = len(REPLICATION) * 6 + EXPANSION_PER_DOW * 6
        _NETWORKS = _kernels.sorting_networks(size)
    return _NETWORKS


class NoReferenceImagery(ValueError):
    pass


def interval_mean(values, weights=None, lo: float = LO, hi: float = HI) -> float:
    """Mean of the entries whose fractional ranks fall inside [lo, hi].

    Weights are integer replication counts. After expansion and sorting, entry
    i of n spans the fractional ranks ((i-1)/n, i/n]; entries lying wholly in
    [lo, hi] are averaged. If none does, the entry holding rank 0.5 is used.
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise ValueError("interval mean of an empty sample")
    if weights is None:
        wts = np.ones(vals.size, dtype=np.int64)
    else:
        wts = np.asarray(weights).ravel()
        if wts.shape != vals.shape:
            raise ValueError("values and weights differ in length")
        if np.any(wts != np.round(wts)) or np.any(wts < 0):
            raise ValueError("weights must be non-negative integers")
        wts = wts.astype(np.int64)
        keep = wts > 0
        vals, wts = vals[keep], wts[keep]
        if vals.size == 0:
            raise ValueError("interval mean of an empty sample")
    if not np.isfinite(vals).all():
        raise ValueError("interval mean needs finite values")
    return float(_kernels.weighted_interval_mean(vals.copy(), wts.copy(), vals.size, lo, hi))


@dataclass(frozen=True)
class ReferenceSample:
    target_id: str
    entries: tuple          # ((scene_id, weight), ...) in closeness order per weekday
    expansion: tuple = ()   # scene ids added for under-covered pixels

    @property
    def total_weight(self) -> int:
        return sum(w for _, w in self.entries)


@dataclass
class SampleSchedule:
    """Reference samples for many targets, as padded index arrays."""

    targets: np.ndarray     # (N,) scene index of each target
    idx: np.ndarray         # (N, 36) first-pass scene indices
    wts: np.ndarray         # (N, 36) replication weights
    n: np.ndarray           # (N,) used columns of idx
    exp_idx: np.ndarray     # (N, 36) expansion scene indices
    exp_n: np.ndarray       # (N,)

    def row(self, t: int):
        return (self.idx[t], self.wts[t], int(self.n[t]),
                self.exp_idx[t], int(self.exp_n[t]))


def _timeline(scenes: Sequence[Scene]):
    times = np.array([int(s.acquired_utc.timestamp()) for s in scenes], dtype=np.int64)
    dows = np.array([int(s.day_of_week) for s in scenes], dtype=np.int64)
    order = sorted(range(len(scenes)), key=lambda i: scenes[i].scene_id)
    id_rank = np.empty(len(scenes), dtype=np.int64)
    id_rank[order] = np.arange(len(scenes))
    return times, dows, id_rank


def sample_schedule(scenes: Sequence[Scene], targets: Optional[Sequence[int]] = None,
                    window_days: float = WINDOW_DAYS, strict: bool = False) -> SampleSchedule:
    """Reference samples for ``targets`` (indices into ``scenes``).

    Targets without any eligible first-pass scene raise NoReferenceImagery when
    ``strict``, otherwise they are dropped from the schedule.
    """
    times, dows, id_rank = _timeline(scenes)
    if targets is None:
        targets = range(len(scenes))
    ndow = len(REPLICATION)
    width = 6 * ndow
    window = window_days * 86400
    by_dow = [np.flatnonzero(dows == d) for d in range(7)]  # already time-sorted

    rows_t, rows_i, rows_w, rows_n, rows_e, rows_en = [], [], [], [], [], []
    repl = np.array(REPLICATION, dtype=np.int64)
    for ti in targets:
        t0 = times[ti]
        first_i, first_w, exp_i = [], [], []
        for d in range(7):
            if d == dows[ti]:
                continue
            cand = by_dow[d]
            if cand.size == 0:
                continue
            pos = np.searchsorted(times[cand], t0)
            span = ndow + EXPANSION_PER_DOW
            near = cand[max(0, pos - span):pos + span]
            dt = np.abs(times[near] - t0)
            near = near[np.lexsort((id_rank[near], times[near], dt))]
            dt = np.abs(times[near] - t0)
            k = int(min(ndow, np.count_nonzero(dt <= window)))
            # dt is sorted, so the in-window scenes are a prefix
            first_i.extend(near[:k])
            first_w.extend(repl[:k])
            exp_i.extend(near[k:k + EXPANSION_PER_DOW])
        if not first_i:
            if strict:
                raise NoReferenceImagery(f"no reference imagery for {scenes[ti].scene_id}")
            continue
        rows_t.append(ti)
        rows_i.append(first_i)
        rows_w.append(first_w)
        rows_n.append(len(first_i))
        rows_e.append(exp_i)
        rows_en.append(len(exp_i))

    N = len(rows_t)
    idx = np.zeros((N, width), dtype=np.int64)
    wts = np.zeros((N, width), dtype=np.int64)
    exp_idx = np.zeros((N, EXPANSION_PER_DOW * 6), dtype=np.int64)
    for r in range(N):
        idx[r, :rows_n[r]] = rows_i[r]
        wts[r, :rows_n[r]] = rows_w[r]
        exp_idx[r, :rows_en[r]] = rows_e[r]
    return SampleSchedule(np.array(rows_t, dtype=np.int64), idx, wts,
                          np.array(rows_n, dtype=np.int64), exp_idx,
                          np.array(rows_en, dtype=np.int64))


def _scene_index(dataset: LocationDataset, scene) -> int:
    sid = scene if isinstance(scene, str) else scene.scene_id
    for i, s in enumerate(dataset.scenes):
        if s.scene_id == sid:
            return i
    raise KeyError(f"{sid} is not part of {dataset.location_id}")


def select_reference_sample(target: Scene, dataset: LocationDataset) -> ReferenceSample:
    """Weighted reference sample of ``target`` drawn from ``dataset``."""
    ti = _scene_index(dataset, target)
    sched = sample_schedule(dataset.scenes, [ti], strict=True)
    ids = [s.scene_id for s in dataset.scenes]
    n, en = int(sched.n[0]), int(sched.exp_n[0])
    entries = tuple((ids[j], int(w)) for j, w in zip(sched.idx[0, :n], sched.wts[0, :n]))
    expansion = tuple(ids[j] for j in sched.exp_idx[0, :en])
    return ReferenceSample(ids[ti], entries, expansion)


@dataclass
class ReferenceComposite:
    values: np.ndarray       # (H, W, 5) R, G, B, theta1, theta2
    valid_count: np.ndarray  # (H, W) weighted count of valid entries aggregated
    mask: np.ndarray         # (H, W) True where the composite is defined
    expanded: np.ndarray     # (H, W) True where the second pass was used


def composite_from_stack(stack: np.ndarray, valid: np.ndarray, schedule: SampleSchedule,
                         row: int, min_valid: int = MIN_VALID):
    """Composite of schedule row ``row`` over a (T, B, P) stack.

    Returns (values (B, P), counts (P,), expanded (P,)).
    """
    na, nb, no = networks()
    idx, wts, n, exp_idx, exp_n = schedule.row(row)
    return _kernels.composite_block(stack, valid, idx, wts, n, exp_idx, exp_n,
                                    na, nb, no, min_valid, LO, HI, LANES)


def build_reference_composite(target: Scene, dataset: LocationDataset,
                              min_valid: int = MIN_VALID) -> ReferenceComposite:
    """Per-pixel reference composite of ``target`` over bands (R, G, B, theta1, theta2)."""
    from .signal import band_stack

    ti = _scene_index(dataset, target)
    sched = sample_schedule(dataset.scenes, [ti], strict=True)
    h, w = dataset.shape
    stack, valid = band_stack(dataset.scenes)
    vals, counts, expanded = composite_from_stack(stack, valid, sched, 0, min_valid)
    values = vals.T.reshape(h, w, -1)
    return ReferenceComposite(values, counts.reshape(h, w), counts.reshape(h, w) > 0,
                              expanded.reshape(h, w))
