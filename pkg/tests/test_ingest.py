from dataclasses import replace
from datetime import timedelta

import numpy as np
import pytest
import rasterio
from hypothesis import given, strategies as st
from shapely.geometry import box

from marketpulse.ingest import (FilterReport, IngestError, InsufficientImagery, ManifestRecord, Mode,
                                load_location, quality_filter, read_candidates, read_manifest,
                                write_candidates, write_manifest)
from marketpulse.raster import CandidateLocation, GeoTransform, SceneQuality

from helpers import T0, make_dataset, make_scene

CRS = "EPSG:32637"


def _stack(n=20, seed=0, jitter=False, **quality):
    """Scenes with identical band means unless ``jitter``, so the colour rule stays quiet."""
    rng = np.random.default_rng(seed)
    base = 20 + rng.standard_normal((5, 5, 3))
    out = []
    for k in range(n):
        px = base + rng.standard_normal((5, 5, 3)) if jitter else base
        out.append(make_scene(k, px, quality=SceneQuality(**quality)))
    return out


def _replace_quality(scene, **kw):
    return scene.replace(quality=replace(scene.quality, **kw))


def test_coverage_boundary_detect():
    scenes = _stack()
    scenes[3] = _replace_quality(scenes[3], candidate_coverage_fraction=0.19)
    scenes[4] = _replace_quality(scenes[4], candidate_coverage_fraction=0.20)
    ds, rep = quality_filter(make_dataset(scenes), Mode.DETECT)
    assert rep.dropped == [("s0003", "coverage")]
    assert "s0004" in {s.scene_id for s in ds.scenes}


def test_clean_fraction_rules():
    scenes = _stack()
    scenes[1] = _replace_quality(scenes[1], tile_clear_fraction=0.79)
    scenes[2] = _replace_quality(scenes[2], tile_haze_fraction=0.21)
    scenes[3] = _replace_quality(scenes[3], tile_shadow_fraction=0.2)
    _, rep = quality_filter(make_dataset(scenes), Mode.DETECT)
    assert rep.dropped == [("s0001", "clean"), ("s0002", "clean")]


def test_time_boundary():
    scenes = _stack()
    scenes[5] = make_scene(5, scenes[5].pixels, t=scenes[5].acquired_utc + timedelta(minutes=31))
    scenes[6] = make_scene(6, scenes[6].pixels, t=scenes[6].acquired_utc + timedelta(minutes=30))
    ds, rep = quality_filter(make_dataset(scenes), Mode.DETECT)
    assert rep.dropped == [("s0005", "time")]


def test_faulty_colour_five_sd():
    scenes = _stack(30, seed=4, jitter=True)
    means = np.array([s.pixels.reshape(-1, 3).mean(0) for s in scenes])
    sd = means[:, 0].std(ddof=1)
    px = np.array(scenes[7].pixels)
    px[..., 0] += 5 * sd * 6       # large enough to stay beyond 2 SD after inflating the SD
    scenes[7] = make_scene(7, px)
    m = np.array([s.pixels.reshape(-1, 3).mean(0) for s in scenes])
    z = np.abs(m - m.mean(0)) / m.std(0, ddof=1)
    expected = {f"s{k:04d}" for k in np.flatnonzero((z > 2).any(1))}
    _, rep = quality_filter(make_dataset(scenes), Mode.DETECT)
    assert {d for d, r in rep.dropped if r == "colour"} == expected
    assert "s0007" in expected


def test_report_partition_and_order():
    scenes = _stack(30, seed=1, jitter=True)
    scenes[2] = _replace_quality(scenes[2], candidate_coverage_fraction=0.1, tile_clear_fraction=0.1)
    scenes[9] = _replace_quality(scenes[9], tile_clear_fraction=0.1)
    ds, rep = quality_filter(make_dataset(scenes), Mode.DETECT)
    assert rep.kept + len(rep.dropped) == rep.total == 30
    assert dict(rep.dropped)["s0002"] == "coverage"
    assert rep.counts["coverage"] == 1 and rep.counts["clean"] == 1
    assert isinstance(rep, FilterReport) and rep.to_dict()["kept"] == len(ds)


def test_insufficient_imagery():
    with pytest.raises(InsufficientImagery, match="insufficient imagery"):
        quality_filter(make_dataset(_stack(7)), Mode.DETECT)


def test_track_mode_uses_market_area():
    scenes = _stack()
    area = np.zeros((5, 5), bool)
    area[:2, :2] = True
    m = np.ones((5, 5), bool)
    m[:2, :2] = False
    scenes[0] = make_scene(0, scenes[0].pixels, mask=m,
                           quality=SceneQuality(candidate_coverage_fraction=0.05))
    _, rep = quality_filter(make_dataset(scenes), Mode.TRACK, market_area=area)
    assert ("s0000", "coverage") in rep.dropped
    with pytest.raises(ValueError):
        quality_filter(make_dataset(scenes), Mode.TRACK)


@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(0.6, 1.0), st.integers(-60, 60),
                          st.floats(-3, 3)), min_size=12, max_size=25))
def test_filter_idempotent(rows):
    scenes = []
    for k, (cov, clear, dt, shift) in enumerate(rows):
        px = np.full((3, 3, 3), 20.0 + shift, dtype=np.float32)
        scenes.append(make_scene(k, px, t=T0 + timedelta(days=k, minutes=dt),
                                 quality=SceneQuality(tile_clear_fraction=clear,
                                                      candidate_coverage_fraction=cov)))
    try:
        once, r1 = quality_filter(make_dataset(scenes), Mode.DETECT)
    except InsufficientImagery:
        return
    twice, r2 = quality_filter(once, Mode.DETECT)
    assert [s.scene_id for s in twice.scenes] == [s.scene_id for s in once.scenes]
    assert r2.dropped == []
    reasons = [r for _, r in r1.dropped]
    assert set(reasons) <= {"coverage", "clean", "time", "colour"}
    assert len({d for d, _ in r1.dropped}) == len(r1.dropped)


# manifest and rasters ---------------------------------------------------------

def _write_tif(path, data, tf, crs=CRS):
    with rasterio.open(path, "w", driver="GTiff", height=data.shape[1], width=data.shape[2],
                       count=data.shape[0], dtype="float32", crs=crs, transform=tf.to_affine()) as dst:
        dst.write(data.astype(np.float32))


def _record(k, path, **kw):
    return ManifestRecord(f"sc{k}", str(path), (T0 + timedelta(days=k)).strftime("%Y-%m-%dT%H:%M:%SZ"),
                          180, "NEW", 1.0, **kw)


def test_manifest_round_trip(tmp_path):
    recs = [_record(k, tmp_path / f"r{k}.tif", location_id="a") for k in range(3)]
    write_manifest(recs, tmp_path / "m.jsonl")
    back = read_manifest(tmp_path / "m.jsonl")
    assert [r.scene_id for r in back] == ["sc0", "sc1", "sc2"]
    assert back[0].path == str(tmp_path / "r0.tif")
    assert "r0.tif" in (tmp_path / "m.jsonl").read_text().splitlines()[0]


def test_manifest_duplicates_and_bad_lines(tmp_path):
    p = tmp_path / "m.jsonl"
    write_manifest([_record(0, "a.tif"), _record(0, "b.tif")], p)
    with pytest.raises(IngestError, match="duplicate"):
        read_manifest(p)
    p.write_text('{"scene_id": "x"}\n')
    with pytest.raises(IngestError):
        read_manifest(p)


def test_load_location(tmp_path):
    tf = GeoTransform(1000.0, 2000.0, 3.0)
    rng = np.random.default_rng(0)
    recs = []
    for k in (2, 0, 1):
        data = np.concatenate([10 + rng.random((3, 12, 12)), np.full((1, 12, 12), 255.0)])
        data[3, :3, :] = 0                # top rows unusable
        if k == 1:
            data = data[:3]               # no mask band
        _write_tif(tmp_path / f"r{k}.tif", data, tf)
        recs.append(_record(k, tmp_path / f"r{k}.tif"))
    poly = box(1003, 2000 - 30, 1030, 2000 - 3)
    ds = load_location(recs, CandidateLocation("a", poly), CRS)
    assert [s.scene_id for s in ds.scenes] == ["sc0", "sc1", "sc2"]
    assert ds.shape == (9, 9)
    assert ds.transform == GeoTransform(1003.0, 1997.0, 3.0)
    assert len(ds.warnings) == 1 and "sc1" in ds.warnings[0]
    assert ds.scenes[1].mask.all()
    # rows 1-2 of the window come from masked file rows 1-2
    expected = float((ds.scenes[0].mask & ds.polygon_mask).sum() / ds.polygon_mask.sum())
    assert ds.scenes[0].quality.candidate_coverage_fraction == pytest.approx(expected)
    assert expected < 1.0
    assert ds.scenes[1].quality.candidate_coverage_fraction == 1.0


def test_load_location_errors(tmp_path):
    tf = GeoTransform(0.0, 30.0, 3.0)
    _write_tif(tmp_path / "a.tif", np.ones((4, 10, 10)), tf)
    _write_tif(tmp_path / "b.tif", np.ones((4, 10, 10)), tf, crs="EPSG:4326")
    cand = CandidateLocation("a", box(3, 3, 27, 27))
    with pytest.raises(IngestError, match="sc9"):
        load_location([_record(9, tmp_path / "missing.tif")], cand, CRS)
    with pytest.raises(IngestError, match="CRS"):
        load_location([_record(0, tmp_path / "a.tif"), _record(1, tmp_path / "b.tif")], cand, CRS)


def test_zero_coverage_scene_kept(tmp_path):
    tf = GeoTransform(0.0, 30.0, 3.0)
    data = np.ones((4, 10, 10))
    data[3] = 0
    _write_tif(tmp_path / "a.tif", data, tf)
    ds = load_location([_record(0, tmp_path / "a.tif")], CandidateLocation("a", box(3, 3, 27, 27)), CRS)
    assert len(ds) == 1 and ds.scenes[0].quality.candidate_coverage_fraction == 0.0


def test_candidates_round_trip(tmp_path):
    c = [CandidateLocation("b", box(0, 0, 10, 10), 120), CandidateLocation("a", box(5, 5, 9, 9))]
    write_candidates(c, tmp_path / "c.geojson", CRS)
    back = read_candidates(tmp_path / "c.geojson")
    assert [(x.location_id, x.utc_offset_minutes) for x in back] == [("b", 120), ("a", 0)]
    assert back[0].polygon.equals(c[0].polygon)
