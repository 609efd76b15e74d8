"""
From raw shape readings to an activity index.

Readings are kernel-interpolated into daily series (separately for market and
non-market days and per sensor generation), then each reading is expressed
relative to the mean non-market (0) and market (100) levels over a reference
window. Long panels spanning both sensor generations are bridged, and a
month-of-year index with clustered standard errors summarises seasonality.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .raster import Generation
from .track import ActivityReading, PANEL_COLUMNS

HALF_WIDTH_DAYS = 45
EPOCH = date(1970, 1, 1)


def day_number(d) -> int:
    """Days since 1970-01-01 of a date or (UTC) datetime."""
    if hasattr(d, "date") and callable(d.date):
        d = d.date()
    return (d - EPOCH).days


def from_day_number(n: int) -> date:
    return EPOCH + timedelta(days=int(n))


def epanechnikov(u):
    u = np.asarray(u, dtype=np.float64)
    return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)


@dataclass
class DailySeries:
    days: np.ndarray       # consecutive day numbers
    values: np.ndarray     # NaN where unsupported
    support: np.ndarray    # bool

    def at(self, day: int) -> float:
        i = int(day) - int(self.days[0]) if self.days.size else -1
        if 0 <= i < self.days.size and self.support[i]:
            return float(self.values[i])
        return math.nan

    def window_mean(self, lo: int, hi: int) -> Tuple[float, int]:
        """Mean over supported days in [lo, hi] and the number of such days."""
        if self.days.size == 0:
            return math.nan, 0
        sel = (self.days >= lo) & (self.days <= hi) & self.support
        n = int(sel.sum())
        return (float(self.values[sel].mean()) if n else math.nan), n


def epanechnikov_smooth(days: Sequence[int], values: Sequence[float],
                        half_width: float = HALF_WIDTH_DAYS,
                        span: Optional[Tuple[int, int]] = None) -> DailySeries:
    """Kernel-weighted daily average of readings with K(u) = 0.75 (1 - u^2), |u| < 1.

    Evaluated on every day of ``span`` (default: first reading - half_width
    to last reading + half_width). Days with zero total weight are unsupported.
    """
    d = np.asarray(days, dtype=np.int64)
    v = np.asarray(values, dtype=np.float64)
    if d.size == 0:
        return DailySeries(np.zeros(0, np.int64), np.zeros(0), np.zeros(0, bool))
    hw = int(math.ceil(half_width))
    lo, hi = span if span is not None else (int(d.min()) - hw, int(d.max()) + hw)
    grid = np.arange(lo, hi + 1, dtype=np.int64)
    num = np.zeros(grid.size)
    den = np.zeros(grid.size)
    # accumulate reading by reading over the days it reaches
    for di, vi in zip(d, v):
        a = max(lo, di - hw)
        b = min(hi, di + hw)
        if a > b:
            continue
        k = epanechnikov((np.arange(a, b + 1) - di) / half_width)
        num[a - lo:b - lo + 1] += k * vi
        den[a - lo:b - lo + 1] += k
    support = den > 0
    vals = np.full(grid.size, np.nan)
    vals[support] = num[support] / den[support]
    return DailySeries(grid, vals, support)


def normalize_reading(raw: float, m_nonmarket: float, m_market: float) -> float:
    """100 (raw - m_nonmarket) / (m_market - m_nonmarket); NaN for a degenerate reference."""
    if not m_market > m_nonmarket:
        return math.nan
    return 100.0 * (raw - m_nonmarket) / (m_market - m_nonmarket)


@dataclass(frozen=True)
class ReferenceWindow:
    kind: str                 # "centered182" | "trailing365" | "calendar"
    year: Optional[int] = None

    @classmethod
    def parse(cls, text: str) -> "ReferenceWindow":
        t = text.strip()
        if t == "centered182":
            return cls("centered182")
        if t == "trailing365":
            return cls("trailing365")
        if t.startswith("calendar:"):
            return cls("calendar", int(t.split(":", 1)[1]))
        raise ValueError(f"unknown reference window {text!r}")

    @property
    def id(self) -> str:
        return f"calendar:{self.year}" if self.kind == "calendar" else self.kind

    def bounds(self, day: int) -> Tuple[int, int]:
        """Inclusive day-number range of the window used for a reading on ``day``."""
        if self.kind == "centered182":
            return day - 182, day + 182
        if self.kind == "trailing365":
            return day - 365, day - 1
        return day_number(date(self.year, 1, 1)), day_number(date(self.year, 12, 31))


def parse_interval(text: str) -> Tuple[date, date]:
    a, b = text.split(":")
    lo, hi = date.fromisoformat(a.strip()), date.fromisoformat(b.strip())
    if hi < lo:
        raise ValueError(f"empty exclusion interval {text!r}")
    return lo, hi


@dataclass
class NormalizationConfig:
    window: ReferenceWindow = field(default_factory=lambda: ReferenceWindow("centered182"))
    exclusions: List[Tuple[date, date]] = field(default_factory=list)
    strict_quality: bool = False
    half_width_days: float = HALF_WIDTH_DAYS

    def __post_init__(self):
        if isinstance(self.window, str):
            self.window = ReferenceWindow.parse(self.window)
        self.exclusions = [parse_interval(e) if isinstance(e, str) else tuple(e)
                           for e in self.exclusions]
        if not self.half_width_days > 0:
            raise ValueError("half_width_days must be positive")

    def excluded(self, lo: int, hi: int) -> bool:
        return any(day_number(a) <= hi and day_number(b) >= lo for a, b in self.exclusions)

    @classmethod
    def from_json(cls, path) -> "NormalizationConfig":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(window=doc.get("window", "centered182"),
                   exclusions=[f"{a}:{b}" for a, b in doc.get("exclusions", [])],
                   strict_quality=bool(doc.get("strict_quality", False)),
                   half_width_days=float(doc.get("half_width_days", HALF_WIDTH_DAYS)))


@dataclass
class NormalizedReading:
    reading: ActivityReading
    normalized_value: float
    window_id: str
    flags: str = ""


def _group_key(r: ActivityReading):
    return (r.location_id, int(r.shape_dow), Generation(r.generation).value)


def smooth_groups(readings: Sequence[ActivityReading], half_width: float = HALF_WIDTH_DAYS):
    """Daily series per (location, shape weekday, generation) and market flag."""
    groups: Dict[tuple, Dict[bool, list]] = {}
    for r in readings:
        groups.setdefault(_group_key(r), {True: [], False: []})[bool(r.is_market_day)].append(r)
    out = {}
    for key, sides in groups.items():
        out[key] = {}
        for flag, rs in sides.items():
            out[key][flag] = epanechnikov_smooth([day_number(r.acquired_utc) for r in rs],
                                                 [r.raw_value for r in rs], half_width)
    return out


def normalize_panel(readings: Sequence[ActivityReading],
                    config: Optional[NormalizationConfig] = None) -> List[NormalizedReading]:
    """Index every reading against its reference window; see NormalizedReading.flags for drops."""
    config = config or NormalizationConfig()
    series = smooth_groups(readings, config.half_width_days)
    out = []
    wid = config.window.id
    for r in readings:
        day = day_number(r.acquired_utc)
        lo, hi = config.window.bounds(day)
        if config.excluded(lo, hi):
            out.append(NormalizedReading(r, math.nan, wid, "excluded"))
            continue
        s = series[_group_key(r)]
        m_mkt, n_mkt = s[True].window_mean(lo, hi)
        m_nm, n_nm = s[False].window_mean(lo, hi)
        if n_mkt == 0 or n_nm == 0:
            out.append(NormalizedReading(r, math.nan, wid, "no-reference"))
            continue
        if not m_mkt > m_nm:
            out.append(NormalizedReading(r, math.nan, wid, "degenerate-reference"))
            continue
        out.append(NormalizedReading(r, normalize_reading(r.raw_value, m_nm, m_mkt), wid))
    return out


def index_series(series_market: DailySeries, series_nonmarket: DailySeries,
                 lo: int, hi: int) -> Tuple[np.ndarray, np.ndarray]:
    """Both interpolated series over [lo, hi] expressed on the window's 0/100 scale."""
    m_mkt, _ = series_market.window_mean(lo, hi)
    m_nm, _ = series_nonmarket.window_mean(lo, hi)
    scale = 100.0 / (m_mkt - m_nm)

    def part(s):
        sel = (s.days >= lo) & (s.days <= hi) & s.support
        return (s.values[sel] - m_nm) * scale

    return part(series_market), part(series_nonmarket)


NORMALIZED_COLUMNS = PANEL_COLUMNS + ("normalized_value", "reference_window_id", "flags")


def write_normalized(rows: Sequence[NormalizedReading], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=NORMALIZED_COLUMNS, lineterminator="\n")
        w.writeheader()
        for n in rows:
            row = n.reading.row()
            row["normalized_value"] = "" if math.isnan(n.normalized_value) else repr(n.normalized_value)
            row["reference_window_id"] = n.window_id
            row["flags"] = n.flags
            w.writerow(row)


class BridgeError(ValueError):
    pass


def bridge_generations(values: Sequence[float], generations: Sequence, days: Sequence[int],
                       markets: Sequence[str], groups: Optional[Sequence[str]] = None,
                       overlap: Tuple[date, date] = (date(2020, 11, 1), date(2021, 5, 31)),
                       base_period: Optional[Tuple[date, date]] = None):
    """Put OLD and NEW generation values on one scale.

    OLD values are optionally indexed to 100 times their per-market mean over
    ``base_period``. NEW values are then multiplied by one factor per group so
    that group means of both generations agree over ``overlap``.
    Returns (bridged values, {group: factor}).
    """
    v = np.asarray(values, dtype=np.float64).copy()
    gen = np.array([Generation(g).value for g in generations])
    d = np.asarray(days, dtype=np.int64)
    mk = np.asarray(markets, dtype=object)
    grp = mk if groups is None else np.asarray(groups, dtype=object)
    old = gen == Generation.OLD.value
    new = gen == Generation.NEW.value
    if base_period is not None:
        b0, b1 = day_number(base_period[0]), day_number(base_period[1])
        for m in np.unique(mk[old]):
            sel = old & (mk == m)
            base = sel & (d >= b0) & (d <= b1)
            if not base.any():
                raise BridgeError(f"cannot bridge: market {m} has no OLD readings in the base period")
            v[sel] = 100.0 * v[sel] / v[base].mean()
    o0, o1 = day_number(overlap[0]), day_number(overlap[1])
    inside = (d >= o0) & (d <= o1)
    factors = {}
    for g in sorted(np.unique(grp[new]), key=str):
        sel_old = old & inside & (grp == g)
        sel_new = new & inside & (grp == g)
        if not sel_old.any() or not sel_new.any():
            raise BridgeError(f"cannot bridge: group {g} lacks overlapping readings of both generations")
        f = v[sel_old].mean() / v[sel_new].mean()
        factors[g] = float(f)
        v[new & (grp == g)] *= f
    return v, factors


@dataclass
class SeasonalEstimate:
    month: int
    estimate: float
    se: float
    n: int


def seasonal_index(values: Sequence[float], months: Sequence[int],
                   clusters: Sequence) -> List[SeasonalEstimate]:
    """Month-of-year means with one-way cluster-robust standard errors.

    Equivalent to regressing values on a full set of month dummies (no
    intercept) with CR1 standard errors, using the small-sample factor
    G/(G-1) * (N-1)/(N-K).
    """
    y = np.asarray(values, dtype=np.float64)
    m = np.asarray(months, dtype=np.int64)
    keep = np.isfinite(y)
    y, m = y[keep], m[keep]
    cl = np.asarray([str(c) for c in np.asarray(clusters, dtype=object)[keep]])
    if y.size == 0:
        return []
    ucl, cid = np.unique(cl, return_inverse=True)
    G = ucl.size
    if G < 2:
        raise ValueError("seasonal_index needs at least two clusters")
    present = np.unique(m)
    K, N = present.size, y.size
    col = np.searchsorted(present, m)
    n = np.bincount(col, minlength=K)
    beta = np.bincount(col, weights=y, minlength=K) / n
    u = y - beta[col]
    S = np.zeros((G, K))
    np.add.at(S, (cid, col), u)
    meat = S.T @ S
    c = G / (G - 1) * (N - 1) / max(N - K, 1)
    var = c * np.diag(meat) / n.astype(np.float64) ** 2
    return [SeasonalEstimate(int(mo), float(b), float(np.sqrt(max(vv, 0.0))), int(k))
            for mo, b, vv, k in zip(present, beta, var, n)]


def read_normalized(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
