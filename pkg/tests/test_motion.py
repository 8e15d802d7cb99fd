import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from conftest import gray
from mmdistill.motion import MotionDetector, VibeParams, dilate, vibe_init, vibe_segment_update


def static_video(n, shape=(96, 96), sigma=1 / 255, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.8, shape)
    base = ndimage.uniform_filter(base, 5)  # smooth texture, like a lawn
    for k in range(n):
        yield gray(np.clip(base + rng.normal(0, sigma, shape), 0, 1), k / 12)


def test_constant_frame_initialises_bank_to_that_value():
    model = vibe_init(gray(np.full((8, 9), 100 / 255)), VibeParams(), 0)
    assert model.bank.shape == (8, 9, 20)
    assert np.all(model.bank == 100)


def test_init_is_seeded():
    f = gray(np.random.default_rng(3).random((16, 16)))
    a = vibe_init(f, VibeParams(), 42)
    b = vibe_init(f, VibeParams(), 42)
    assert np.array_equal(a.bank, b.bank)


def test_tiny_frame_rejected():
    with pytest.raises(ValueError):
        vibe_init(gray(np.zeros((2, 2))), VibeParams(), 0)


def test_bad_params_rejected():
    with pytest.raises(ValueError):
        VibeParams(n=1, min_matches=2)
    with pytest.raises(ValueError):
        VibeParams(phi=0)


def test_static_video_has_almost_no_foreground():
    frames = list(static_video(80))
    det = MotionDetector(seed=1)
    densities = [det(f).raw.mean() for f in frames]
    assert np.mean(densities[50:]) < 1e-3


def test_inserted_square_is_detected():
    frames = list(static_video(60, seed=4))
    det = MotionDetector(seed=2)
    for f in frames:
        det(f)
    img = frames[-1].data.copy()
    # brighter than every background value by more than the match radius (20/255)
    img[30:50, 40:60] = np.clip(img[30:50, 40:60] + 0.3, 0, 1)
    jump = np.abs(np.rint(img * 255) - np.rint(frames[-1].data * 255))[30:50, 40:60]
    assert np.all(jump > 20)
    raw = det(gray(img, 99.0)).raw
    assert raw[30:50, 40:60].mean() >= 0.95


def test_repeated_identical_frame_goes_quiet():
    f = next(static_video(1, shape=(32, 32), sigma=0.0, seed=5))
    det = MotionDetector(seed=0)
    masks = [det(f).raw for _ in range(5)]
    assert not masks[-1].any()


def test_segment_rejects_shape_change():
    model = vibe_init(gray(np.zeros((8, 8))), VibeParams(), 0)
    with pytest.raises(ValueError):
        vibe_segment_update(model, gray(np.zeros((9, 8))), 0)


def test_dilate_single_pixel_interior_and_corner():
    m = np.zeros((40, 40), bool)
    m[20, 20] = True
    assert dilate(m, 11).sum() == 121
    c = np.zeros((40, 40), bool)
    c[0, 0] = True
    out = dilate(c, 11)
    # window clamped at the border: rows 0..5 and cols 0..5
    assert out.sum() == 36 and out[:6, :6].all()
    assert not dilate(np.zeros((5, 5), bool)).any()


def test_dilate_rejects_even_kernel():
    with pytest.raises(ValueError):
        dilate(np.zeros((5, 5), bool), 4)


masks = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).random((24, 31)) < 0.05)


@given(masks, st.sampled_from([1, 3, 5, 11]))
def test_dilate_matches_max_filter_and_is_extensive(m, k):
    out = dilate(m, k)
    ref = ndimage.maximum_filter(m.astype(np.uint8), size=k, mode="constant", cval=0).astype(bool)
    assert np.array_equal(out, ref)
    assert np.all(out[m])


@given(masks, masks)
def test_dilate_is_monotone(a, b):
    union = a | b
    assert np.all(dilate(union)[dilate(a)])


def test_raw_is_inside_dilated():
    det = MotionDetector(seed=0)
    rng = np.random.default_rng(0)
    for k in range(5):
        m = det(gray(rng.random((40, 40)), k))
        assert np.all(m.dilated[m.raw])


def test_detector_is_deterministic():
    frames = list(static_video(10, seed=8))
    a = [MotionDetector(seed=3)(f).raw for f in frames[:1]]
    da, db = MotionDetector(seed=3), MotionDetector(seed=3)
    for f in frames:
        assert np.array_equal(da(f).raw, db(f).raw)
    assert a


@pytest.mark.slow
def test_full_resolution_throughput():
    rng = np.random.default_rng(0)
    frames = [gray(rng.random((1280, 1280))) for _ in range(3)]
    det = MotionDetector(seed=0)
    det(frames[0])
    t = time.perf_counter()
    for _ in range(4):
        for f in frames:
            det(f)
    per_frame = (time.perf_counter() - t) / 12
    assert per_frame < 1 / 12
