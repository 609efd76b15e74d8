from datetime import date

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from marketpulse.pipeline import run_location
from marketpulse.raster import DayOfWeek, SceneQuality
from marketpulse.signal import ANGLES, RGB
from marketpulse.synth import MarketSpec, NoiseSpec, SynthConfig, simulate
from marketpulse.track import (ActivityReading, build_rings, read_panel, select_fringe, shape_reading,
                               strict_quality_mask, tracking_difference, write_panel)

from helpers import T0, make_scene, oracle_median_filter


def _prefix_masks(sizes, shape=(30, 30)):
    """Nested masks holding the first n pixels in raster order, core first."""
    out = []
    for n in sizes:
        m = np.zeros(shape[0] * shape[1], dtype=bool)
        m[:n] = True
        out.append(m.reshape(shape))
    return out


def _nested(sizes):
    return [(1.0 / (k + 1), m) for k, m in enumerate(_prefix_masks(sizes))]


def test_rings_merge_at_70_percent():
    rs = build_rings(_nested([100, 120, 400]))
    assert rs.core.sum() == 120
    assert [r.sum() for r in rs.rings] == [280]
    assert rs.thresholds == [0.5, 1 / 3]
    rs = build_rings(_nested([100, 200]))
    assert rs.core.sum() == 100 and [r.sum() for r in rs.rings] == [100]
    rs = build_rings(_nested([100, 140]))          # exactly 70% merges
    assert rs.core.sum() == 140 and rs.rings == []
    rs = build_rings(_nested([64]))
    assert rs.core.sum() == 64 and rs.rings == [] and rs.outer.sum() == 64
    with pytest.raises(ValueError):
        build_rings([])


@given(st.lists(st.integers(1, 60), min_size=1, max_size=8),
       arrays(np.float64, (30, 30), elements=st.floats(0, 100)))
def test_rings_partition_outer(steps, values):
    sizes = np.cumsum(steps).tolist()
    rs = build_rings(_nested(sizes))
    parts = [rs.core] + rs.rings
    total = sum(p.astype(int) for p in parts)
    assert total.max() <= 1
    assert np.array_equal(total.astype(bool), rs.outer)
    assert rs.outer.sum() == sizes[-1]
    whole = shape_reading(values, rs.outer)[0]
    pieces = sum(shape_reading(values, p)[0] for p in parts)
    assert pieces == pytest.approx(whole, rel=1e-12, abs=1e-9)


def test_select_fringe():
    hi, lo = [5.0] * 8, [1.0] * 8
    assert select_fringe([]) == 0
    assert select_fringe([(hi, lo), (hi, lo), (lo, lo)]) == 2
    assert select_fringe([(hi, lo), (lo, lo), (hi, lo)]) == 1
    assert select_fringe([(hi, lo), (lo, lo), (hi, lo)], monotone=False) == 3
    assert select_fringe([(hi[:7], lo), (hi, lo)]) == 0          # too few market readings
    assert select_fringe([(hi, lo[:7])], monotone=False) == 0
    # the market median must beat the 75th percentile, not the median
    nm = [0, 0, 0, 0, 0, 10, 10, 10]        # median 0, type-7 p75 = 10
    assert select_fringe([([5.0] * 8, nm)]) == 0
    assert select_fringe([([10.5] * 8, nm)]) == 1


def test_shape_reading():
    v = np.arange(16.0).reshape(4, 4)
    area = np.zeros((4, 4), bool)
    area[:2, :2] = True
    assert shape_reading(v, area) == (0 + 1 + 4 + 5, 1.0)
    valid = np.ones((4, 4), bool)
    valid[0, 0] = False
    raw, frac = shape_reading(v, area, valid)
    assert frac == 0.75 and raw == pytest.approx(10 * 4 / 3)
    v2 = v.copy()
    v2[0, 1] = np.nan
    assert shape_reading(v2, area, valid)[0] == pytest.approx(9 * 2)
    big = np.ones((10, 10), bool)
    ok = np.zeros((10, 10), bool)
    ok[0, :9] = True
    assert shape_reading(np.ones((10, 10)), big, ok) is None
    ok[0, 9] = True
    assert shape_reading(np.ones((10, 10)), big, ok) == (100.0, 0.1)
    assert shape_reading(v, np.zeros((4, 4), bool)) is None


@given(arrays(np.float64, (7, 6, 5), elements=st.floats(0, 50)),
       arrays(np.float64, (7, 6, 5), elements=st.floats(0, 50)),
       arrays(bool, (7, 6)))
def test_tracking_difference_oracle(a, c, valid):
    got, ok = tracking_difference(a, c, valid)
    assert np.array_equal(ok, valid)
    d = np.abs(a - c)
    filt = np.stack([oracle_median_filter(d[..., b], valid, 1)[0] for b in range(5)], -1)
    want = filt[..., RGB].max(-1) * filt[..., ANGLES].max(-1)
    assert np.allclose(got[valid], want[valid], rtol=1e-12, atol=0)
    assert np.isnan(got[~valid]).all()


def test_strict_quality_boundaries():
    def sc(k, sun, clear):
        return make_scene(k, np.ones((2, 2, 3)),
                          quality=SceneQuality(tile_clear_fraction=clear, sun_elevation_deg=sun))
    scenes = [sc(0, 50, 1.0), sc(1, 50, 1.0), sc(2, 64.0, 1.0), sc(3, 64.5, 1.0),
              sc(4, 50, 0.9), sc(5, 50, 0.8999)]
    assert strict_quality_mask(scenes).tolist() == [True, True, True, False, True, False]
    assert strict_quality_mask([]).size == 0


def test_panel_round_trip(tmp_path):
    rows = [ActivityReading("a", DayOfWeek.SAT, "s1", T0, True, 12.5, 1.0, "NEW"),
            ActivityReading("a", DayOfWeek.SAT, "s2", T0, False, 0.1 + 0.2, 0.25, "OLD")]
    write_panel(rows, tmp_path / "p.csv")
    text = (tmp_path / "p.csv").read_text()
    assert text.splitlines()[0] == ("location_id,shape_dow,scene_id,acquired_utc,is_market_day,"
                                    "raw_value,valid_fraction,generation")
    back = read_panel(tmp_path / "p.csv")
    assert back == rows


def test_track_synthetic_market():
    cfg = SynthConfig(seed=3, height=64, width=64, end=date(2019, 6, 30),
                      market=MarketSpec(dows=(int(DayOfWeek.THU),), radii_m=(18.0, 14.0)),
                      noise=NoiseSpec(cloud_rate=0.2, faulty_rate=0.0, late_rate=0.0))
    run = run_location(simulate(cfg))
    det, tr = run.detect.detection, run.track
    assert det.market_days == (DayOfWeek.THU,)
    assert tr is not None and tr.market_days == (DayOfWeek.THU,)
    area = tr.areas[DayOfWeek.THU]
    assert area.any()
    assert not (area & ~det.market_area(DayOfWeek.THU, min(t for t, _ in det.nested(DayOfWeek.THU)))).any()
    mk = [r.raw_value for r in tr.panel if r.is_market_day]
    nm = [r.raw_value for r in tr.panel if not r.is_market_day]
    assert len(mk) > 10 and len(nm) > 60
    assert np.median(mk) > 3 * np.median(nm)
    for r in tr.panel:
        assert r.is_market_day == (r.acquired_utc.weekday() == int(DayOfWeek.THU))
        assert 0.1 <= r.valid_fraction <= 1.0
    assert [(r.shape_dow, r.acquired_utc) for r in tr.panel] == sorted(
        (r.shape_dow, r.acquired_utc) for r in tr.panel)
