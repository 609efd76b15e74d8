"""Report figures written next to the CSV/JSON outputs (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .raster import DayOfWeek  # noqa: E402

# fixed metadata keeps PNG bytes reproducible across runs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=90, metadata=_META)
    plt.close(fig)
    return path


def plot_detection(fields: Mapping[DayOfWeek, np.ndarray], detection, path) -> Path:
    """Cleaned weekday fields with the retained shapes at the cutoff outlined."""
    days = sorted(fields)
    fig, axes = plt.subplots(1, len(days), figsize=(2.2 * len(days), 2.6), squeeze=False)
    vmax = max(float(np.nanmax(f)) if np.isfinite(f).any() else 0.0 for f in fields.values())
    vmax = max(vmax, detection.cutoff)
    for ax, d in zip(axes[0], days):
        ax.imshow(np.nan_to_num(fields[d]), vmin=0, vmax=vmax, cmap="magma", interpolation="nearest")
        area = detection.market_area(d)
        if area.any():
            ax.contour(area.astype(float), levels=[0.5], colors="cyan", linewidths=0.8)
        mark = " *" if d in detection.market_days else ""
        ax.set_title(f"{DayOfWeek(d).label[:3]}{mark}", fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"{detection.location_id}: cleaned periodicity fields", fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def plot_panel(readings: Sequence, path) -> Path:
    """Raw readings over time, market days against other days."""
    fig, ax = plt.subplots(figsize=(7, 3))
    for flag, colour, label in ((False, "0.6", "non-market day"), (True, "tab:red", "market day")):
        rs = [r for r in readings if r.is_market_day == flag]
        if rs:
            ax.plot([r.acquired_utc for r in rs], [r.raw_value for r in rs], ".", ms=3,
                    color=colour, label=label)
    ax.set_ylabel("raw reading")
    if readings:
        ax.set_title(readings[0].location_id, fontsize=10)
        ax.legend(fontsize=8)
    fig.autofmt_xdate()
    fig.tight_layout()
    return _save(fig, path)


def plot_seasonal(estimates: Mapping[str, Sequence], path) -> Path:
    """Month-of-year index with +-1.96 SE bars, one series per label."""
    fig, ax = plt.subplots(figsize=(6, 3))
    for label, est in estimates.items():
        if not est:
            continue
        m = [e.month for e in est]
        ax.errorbar(m, [e.estimate for e in est], yerr=[1.96 * e.se for e in est],
                    fmt="o-", ms=3, capsize=2, label=label)
    ax.set_xticks(range(1, 13))
    ax.set_xlabel("month")
    ax.set_ylabel("activity index")
    ax.axhline(0, color="0.7", lw=0.5)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_metrics(rows: Sequence, path) -> Path:
    """Precision, recall and false-positive rate across the cutoff sweep."""
    fig, ax = plt.subplots(figsize=(6, 3))
    c = [r.cutoff for r in rows]
    nan = lambda v: np.nan if v is None else v
    ax.plot(c, [nan(r.precision) for r in rows], "o-", ms=3, label="precision")
    ax.plot(c, [r.recall for r in rows], "s-", ms=3, label="recall")
    ax.plot(c, [nan(r.false_positive_rate) for r in rows], "^-", ms=3, label="false positive rate")
    ax.set_xscale("log")
    ax.set_xlabel("cutoff")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
