from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, strategies as st

from marketpulse.harmonize import (NoHarmonizationTarget, TargetComposite, band_quantiles,
                                   build_target_composites, harmonization_maps, harmonize_dataset,
                                   quantile_match, apply_map)
from marketpulse.signal import band_stack

from helpers import make_dataset, make_scene, quantile7


def _at(y, m, d):
    return datetime(y, m, d, 7, tzinfo=timezone.utc)


def _target_from(values):
    """Target composite whose quantile table is that of ``values`` (H, W, 3)."""
    q = np.stack([band_quantiles(values[..., b].ravel()) for b in range(3)])
    return TargetComposite((2020, 1), values, q)


def test_band_quantiles_type7():
    v = np.random.default_rng(0).random(1000)
    q = band_quantiles(v, 256)
    probs = np.linspace(0, 1, 256)
    assert np.allclose(q, [quantile7(v, p) for p in probs], rtol=0, atol=1e-15)
    assert np.all(np.diff(q) >= 0)


def test_single_and_identical_new_scenes():
    rng = np.random.default_rng(1)
    px = rng.random((5, 5, 3))
    mask = rng.random((5, 5)) > 0.2
    ds = make_dataset([make_scene(0, px, mask, t=_at(2020, 1, 5))])
    comp = build_target_composites(ds)[(2020, 1)].composite
    assert np.allclose(comp[mask], px[mask].astype(np.float32), atol=1e-7)
    assert np.isnan(comp[~mask]).all()
    ds = make_dataset([make_scene(k, px, t=_at(2020, 1, 5 + k)) for k in range(2)])
    assert np.allclose(build_target_composites(ds)[(2020, 1)].composite, px.astype(np.float32), atol=1e-7)


def test_month_borrowing():
    px = np.ones((3, 3, 3))
    scenes = [make_scene(0, px * 1, t=_at(2020, 1, 10)),
              make_scene(1, px * 2, t=_at(2020, 2, 10), generation="OLD"),
              make_scene(2, px * 3, t=_at(2020, 3, 10)),
              make_scene(3, px * 4, t=_at(2020, 4, 10), generation="OLD"),
              make_scene(4, px * 4, t=_at(2020, 5, 10), generation="OLD"),
              make_scene(5, px * 6, t=_at(2020, 6, 10))]
    t = build_target_composites(make_dataset(scenes))
    assert sorted(t) == [(2020, m) for m in range(1, 7)]
    assert t[(2020, 2)] is t[(2020, 1)]          # tie: earlier month
    assert t[(2020, 4)] is t[(2020, 3)]
    assert t[(2020, 5)] is t[(2020, 6)]


def test_no_target():
    ds = make_dataset([make_scene(0, np.ones((2, 2, 3)), generation="OLD")])
    with pytest.raises(NoHarmonizationTarget, match="no harmonization target"):
        build_target_composites(ds)


def test_identity_when_distributions_match():
    rng = np.random.default_rng(2)
    px = rng.random((20, 20, 3)).astype(np.float32)
    out = quantile_match(make_scene(0, px), _target_from(px.astype(np.float64)))
    assert np.abs(out.pixels - px).max() <= 1e-9


def test_shift_is_removed():
    rng = np.random.default_rng(3)
    tgt = rng.gamma(3, 0.1, (30, 30, 3)).astype(np.float32)
    src = tgt + np.float32(0.1)
    out = quantile_match(make_scene(0, src), _target_from(tgt.astype(np.float64)))
    for b in range(3):
        got = band_quantiles(out.pixels[..., b].ravel())
        want = band_quantiles(tgt[..., b].ravel())
        assert np.abs(got - want).max() <= 1e-6


def test_constant_band_unchanged():
    px = np.random.default_rng(4).random((10, 10, 3)).astype(np.float32)
    px[..., 1] = 0.3
    out = quantile_match(make_scene(0, px), _target_from(np.random.default_rng(5).random((10, 10, 3))))
    assert np.array_equal(out.pixels[..., 1], px[..., 1])


def test_masked_pixels_untouched_and_small_samples():
    rng = np.random.default_rng(6)
    px = (rng.random((10, 10, 3)) * 5).astype(np.float32)
    mask = rng.random((10, 10)) > 0.5
    out = quantile_match(make_scene(0, px, mask), _target_from(rng.random((30, 30, 3))))
    assert np.array_equal(out.pixels[~mask], px[~mask])
    assert not np.array_equal(out.pixels[mask], px[mask])
    assert (out.pixels >= 0).all()


@given(st.integers(0, 10_000), st.floats(0.2, 5.0), st.floats(-0.5, 0.5))
def test_rank_preserving(seed, gain, offset):
    rng = np.random.default_rng(seed)
    tgt = rng.gamma(2.0, 0.1, (16, 16, 3))
    src = np.clip(gain * rng.gamma(2.0, 0.1, (16, 16, 3)) + offset, 0, None).astype(np.float32)
    out = quantile_match(make_scene(0, src), _target_from(tgt)).pixels
    for b in range(3):
        order = np.argsort(src[..., b].ravel(), kind="stable")
        assert np.all(np.diff(out[..., b].ravel()[order]) >= 0)


@given(st.integers(0, 10_000), st.floats(0.2, 5.0), st.floats(0.0, 0.5), st.sampled_from([16, 24, 32, 48, 64]))
def test_matched_quantiles_close_to_target(seed, gain, offset, n):
    # continuous source (no atoms); from 256 pixels up the match is exact up to rounding
    rng = np.random.default_rng(seed)
    tgt = rng.gamma(2.0, 0.1, (n, n, 3))
    src = (gain * rng.gamma(2.0, 0.1, (n, n, 3)) + offset).astype(np.float32)
    out = quantile_match(make_scene(0, src), _target_from(tgt)).pixels
    for b in range(3):
        got = band_quantiles(out[..., b].ravel())
        want = band_quantiles(tgt[..., b].ravel())
        assert np.abs(got - want).max() <= max(1e-6, 0.01 * (want[-1] - want[0]))


def test_lazy_maps_equal_materialised_dataset():
    rng = np.random.default_rng(8)
    scenes = []
    for k in range(40):
        gen = "OLD" if k < 20 else "NEW"
        px = rng.random((6, 6, 3)) * (0.5 if gen == "OLD" else 1.0) + (0.3 if gen == "OLD" else 0)
        scenes.append(make_scene(k * 3, px, rng.random((6, 6)) > 0.1, generation=gen))
    ds = make_dataset(scenes)
    eager = harmonize_dataset(ds)
    maps = harmonization_maps(ds)
    a, va = band_stack(eager.scenes)
    b, vb = band_stack(ds.scenes, maps=maps)
    assert np.array_equal(va, vb)
    assert np.array_equal(a, b)
    for s in ds.scenes:
        assert np.array_equal(apply_map(s.pixels, maps[s.scene_id], s.mask)[~s.mask], s.pixels[~s.mask])
