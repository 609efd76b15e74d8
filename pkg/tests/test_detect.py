import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from marketpulse.detect import (CUTOFF, THRESHOLDS, DetectionResult, MarketShape, decide_market_days,
                                detect_from_fields, extract_shapes, peak_filter, read_geojson,
                                shapes_for_fields, summarize_detections, threshold_grid, write_geojson)
from marketpulse.raster import DayOfWeek, GeoTransform

from helpers import oracle_components

TF = GeoTransform(500.0, 900.0, 3.0)


def test_threshold_grid():
    g = threshold_grid()
    assert len(g) == 26
    assert g[16 - 9] == 0.4096 == CUTOFF
    assert g[20 - 9] == 1.0
    assert g[0] == 0.04100625
    for t, v in zip(range(9, 35), g):
        assert abs(v - (t / 20) ** 4) <= 1e-12
    assert all(a < b for a, b in zip(g, g[1:]))
    assert g == THRESHOLDS


def _blob(n, h=12, w=12, at=(2, 2)):
    f = np.zeros((h, w))
    coords = [(at[0] + i // 3, at[1] + i % 3) for i in range(n)]
    for r, c in coords:
        f[r, c] = 1.0
    return f


def test_area_rule_at_3_1_m():
    assert len(extract_shapes(_blob(6), 0.5, 3.1)) == 1
    assert extract_shapes(_blob(6), 0.5, 3.1)[0].area_m2 == pytest.approx(57.66)
    assert extract_shapes(_blob(5), 0.5, 3.1) == []
    assert extract_shapes(np.zeros((5, 5)), 0.1, 3.0) == []
    with pytest.raises(ValueError):
        extract_shapes(np.zeros((5, 5)), 0.0, 3.0)


def test_diagonal_pixels_connect():
    f = np.zeros((8, 8))
    for i in range(6):
        f[i, i] = 1
    shapes = extract_shapes(f, 0.5, 3.0)
    assert len(shapes) == 1 and shapes[0].pixel_count == 6


@given(arrays(np.float64, (14, 11), elements=st.floats(0, 1)), st.sampled_from(THRESHOLDS[:12]))
def test_extract_matches_flood_fill(field, tau):
    got = {frozenset(zip(s.rows.tolist(), s.cols.tolist())) for s in extract_shapes(field, tau, 3.0)}
    want = {c for c in oracle_components(field >= tau) if len(c) * 9.0 >= 50}
    assert got == want


@given(arrays(np.float64, (12, 12), elements=st.floats(0, 2)))
def test_shapes_nest(field):
    fields = {DayOfWeek.SAT: field}
    shapes = shapes_for_fields(fields, 3.0)
    by_t = {}
    for s in shapes:
        by_t.setdefault(s.threshold, []).append(set(zip(s.rows.tolist(), s.cols.tolist())))
    levels = sorted(by_t)
    for lo, hi in zip(levels, levels[1:]):
        for inner in by_t[hi]:
            assert sum(inner <= outer for outer in by_t[lo]) == 1


def _shape(dow, t, pixels, sid=0):
    rr, cc = zip(*pixels)
    return MarketShape("x", DayOfWeek(dow), t, np.array(rr), np.array(cc), 3.0, sid)


def test_peak_filter_two_clusters():
    f = np.zeros((30, 30))
    f[3:9, 3:9] = 0.3
    f[4:8, 4:8] = 0.7
    f[20:26, 20:26] = 0.1
    shapes = shapes_for_fields({DayOfWeek.SUN: f}, 3.0)
    pf = peak_filter(shapes)
    assert pf.peak.threshold == max(s.threshold for s in shapes)
    assert pf.peak in pf.retained
    assert all(s.rows.max() < 10 for s in pf.retained)
    assert any(s.rows.min() >= 20 for s in shapes)
    assert pf.encompassing.threshold == THRESHOLDS[0]


def test_peak_filter_single_cluster_keeps_all():
    f = np.zeros((20, 20))
    f[5:15, 5:15] = 0.2
    f[7:13, 7:13] = 0.6
    shapes = shapes_for_fields({DayOfWeek.MON: f, DayOfWeek.TUE: f * 0.5}, 3.0)
    assert len(peak_filter(shapes).retained) == len(shapes)


def test_peak_tie_breaks():
    a = _shape(3, 0.5, [(0, c) for c in range(8)])
    b = _shape(1, 0.5, [(5, c) for c in range(6)])
    assert peak_filter([a, b]).peak is a                  # larger area
    c = _shape(1, 0.5, [(5, c) for c in range(8)])
    assert peak_filter([a, c]).peak is c                  # earlier weekday
    d = _shape(3, 0.5, [(9, c + 1) for c in range(8)])
    assert peak_filter([d, a]).peak is a                  # smaller centroid x


def test_decide_market_days():
    s = [_shape(6, CUTOFF, [(0, 0)]), _shape(2, 0.3, [(0, 0)])]
    assert decide_market_days(s) == (DayOfWeek.SUN,)
    assert decide_market_days([_shape(d, 0.3, [(0, 0)]) for d in range(7)]) == ()
    s = [_shape(0, 0.6, [(0, 0)]), _shape(3, 0.5, [(0, 0)])]
    assert decide_market_days(s) == (DayOfWeek.MON, DayOfWeek.THU)


@given(st.lists(st.tuples(st.integers(0, 6), st.sampled_from(THRESHOLDS)), max_size=20),
       st.sampled_from(THRESHOLDS), st.sampled_from(THRESHOLDS))
def test_market_days_monotone_in_cutoff(items, c1, c2):
    shapes = [_shape(d, t, [(0, 0)]) for d, t in items]
    lo, hi = sorted((c1, c2))
    assert set(decide_market_days(shapes, hi)) <= set(decide_market_days(shapes, lo))


def _result(days, dist_px=0, location="l"):
    shapes = []
    for k, d in enumerate(days):
        off = k * dist_px
        shapes.append(_shape(d, 0.5, [(r, c + off) for r in range(3) for c in range(3)]))
    return DetectionResult(location, shapes, shapes, shapes[0] if shapes else None, None,
                           GeoTransform(0, 0, 10.0), (10, 40))


def test_summarize_detections():
    res = [_result([6]), _result([0, 3], dist_px=3), _result([1]), _result([])]
    s = summarize_detections(res)
    assert s["market_day_counts"] == {1: 2, 2: 1}
    assert s["two_day_spacing"] == {3: 1}
    assert s["centroid_distance_median_m"] == pytest.approx(30.0)
    assert s["centroid_distance_mean_m"] == pytest.approx(30.0)
    assert summarize_detections([_result([0, 6])])["two_day_spacing"] == {1: 1}


def test_detect_from_fields_and_geojson(tmp_path):
    f = {DayOfWeek(d): np.zeros((25, 25)) for d in range(7)}
    f[DayOfWeek.WED][5:15, 6:14] = 0.5
    f[DayOfWeek.WED][8:12, 8:12] = 1.5
    f[DayOfWeek.SAT][5:15, 6:14] = 0.45
    region = np.ones((25, 25), bool)
    region[:, :7] = False
    det = detect_from_fields(f, TF, region, "loc-1", crs="EPSG:32637")
    assert det.market_days == (DayOfWeek.WED, DayOfWeek.SAT)
    assert det.peak.day_of_week == DayOfWeek.WED
    assert det.peak.threshold == max(t for t in THRESHOLDS if t <= 1.5)
    assert all(region[s.rows, s.cols].all() for s in det.shapes)
    nested = det.nested(DayOfWeek.WED)
    assert [t for t, _ in nested] == sorted({s.threshold for s in det.retained
                                             if s.day_of_week == DayOfWeek.WED}, reverse=True)
    for (t1, m1), (t2, m2) in zip(nested, nested[1:]):
        assert t1 > t2 and not (m1 & ~m2).any()
    p = write_geojson(det, tmp_path / "d.geojson")
    doc = json.loads(p.read_text())
    props = doc["features"][0]["properties"]
    assert set(props) == {"location_id", "dow", "threshold", "area_m2"}
    assert doc["market_days"] == ["Wednesday", "Saturday"]
    back = read_geojson(p)
    assert back.market_days == det.market_days
    assert back.transform == det.transform and back.grid_shape == det.grid_shape
    assert back.crs == "EPSG:32637"
    for a, b in zip(det.retained, back.retained):
        assert np.array_equal(a.mask(det.grid_shape), b.mask(det.grid_shape))
    assert back.peak.day_of_week == det.peak.day_of_week
    assert np.array_equal(back.market_area(DayOfWeek.WED), det.market_area(DayOfWeek.WED))
