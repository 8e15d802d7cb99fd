import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import gray
from mmdistill.augment import (
    AugmentConfig, Crop, PlacementError, _cluster, augment_frame, extract_crops, poisson_region, scale_factor,
    seamless_blend, transform_boxes, transform_crop,
)
from mmdistill.core import Box, PolarCoord, RegionPartition, enclosing_axis_aligned

CFG = AugmentConfig()


def components_oracle(boxes, inflate):
    # brute force: grow groups until no inflated extents intersect across groups
    def touch(a, b):
        ax0, ax1 = a.cx - inflate * a.w / 2, a.cx + inflate * a.w / 2
        ay0, ay1 = a.cy - inflate * a.h / 2, a.cy + inflate * a.h / 2
        bx0, bx1 = b.cx - inflate * b.w / 2, b.cx + inflate * b.w / 2
        by0, by1 = b.cy - inflate * b.h / 2, b.cy + inflate * b.h / 2
        return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1

    n = len(boxes)
    adj = [[touch(boxes[i], boxes[j]) for j in range(n)] for i in range(n)]
    seen, groups = set(), []
    for s in range(n):
        if s in seen:
            continue
        stack, comp = [s], []
        seen.add(s)
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in range(n):
                if adj[i][j] and j not in seen:
                    seen.add(j)
                    stack.append(j)
        groups.append(sorted(comp))
    return sorted(groups)


def test_scale_factor_values():
    assert scale_factor(100, 100, CFG) == 1.0
    assert scale_factor(0, math.log(2) / 0.004, CFG) == pytest.approx(0.75, abs=1e-12)
    assert scale_factor(0, 1e6, CFG) == pytest.approx(0.5)


def test_scale_factor_is_strictly_decreasing():
    d = np.linspace(-300, 900, 1000)
    s = np.array([scale_factor(0.0, x, CFG) for x in d])
    assert np.all(np.diff(s) < 0)
    assert np.all(s[d >= 0] > CFG.gamma) and np.all(s[d >= 0] <= CFG.alpha + CFG.gamma)


def test_single_box_crop():
    frame = gray(np.random.default_rng(0).random((100, 100)))
    crops = extract_crops(frame, [Box(50, 40, 6, 10)], CFG, 0)
    assert len(crops) == 1
    c = crops[0]
    assert c.patch.shape == (10 + 4, 6 + 4)
    assert c.boxes == [Box(5, 7, 6, 10)]
    assert c.origin == (45, 33)


def test_overlapping_boxes_share_a_crop():
    frame = gray(np.zeros((100, 100)))
    crops = extract_crops(frame, [Box(50, 50, 6, 10), Box(53, 52, 6, 10)], CFG, 0)
    assert len(crops) == 1 and len(crops[0].boxes) == 2


def test_cluster_count_matches_oracle_case():
    boxes = [Box(20, 20, 6, 10), Box(27, 20, 6, 10), Box(80, 80, 6, 10)]
    assert _cluster(boxes, 1.5) == components_oracle(boxes, 1.5)
    assert len(_cluster(boxes, 1.5)) == 2


@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(1, 15), st.floats(1, 15)), max_size=9))
def test_cluster_matches_union_find_oracle(rows):
    boxes = [Box(*r) for r in rows]
    assert _cluster(boxes, 1.5) == components_oracle(boxes, 1.5)


def crop_of(w, h, boxes, rho=0.0, theta=0.0):
    return Crop(np.full((h, w), 0.5), boxes, PolarCoord(rho, theta))


def test_identity_transform_translates_boxes():
    crop = crop_of(10, 20, [Box(5, 10, 4, 8)])
    paste = transform_crop(crop, (100.0, 60.0), CFG, (0, 0), scale=1.0, angle=0.0)
    assert paste.boxes[0].as_tuple() == pytest.approx((100, 60, 4, 8, 1.0))


def test_quarter_turn_swaps_extents():
    crop = crop_of(10, 20, [Box(5, 10, 4, 8)])
    b = transform_crop(crop, (100.0, 60.0), CFG, (0, 0), scale=1.0, angle=math.pi / 2).boxes[0]
    assert (b.w, b.h) == pytest.approx((8, 4), abs=1e-9)


def test_scaled_rotated_box_matches_corner_oracle():
    pivot, anchor = np.array([3.0, 4.0]), np.array([50.0, 70.0])
    b = Box(3.5, 4.5, 1, 1)
    s, a = 0.75, math.radians(30)
    r = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    corners = np.array([[b.x0, b.y0], [b.x1, b.y0], [b.x1, b.y1], [b.x0, b.y1]])
    oracle = enclosing_axis_aligned(np.array([anchor + s * r @ (c - pivot) for c in corners]))
    got = transform_boxes([b], pivot, anchor, s, a)[0]
    assert got.as_tuple() == pytest.approx(oracle.as_tuple(), abs=1e-9)


@given(st.sampled_from([0.0, math.pi / 2, math.pi, -math.pi / 2]), st.floats(0.5, 2.0))
def test_inverse_transform_recovers_boxes(angle, scale):
    pivot, anchor = np.array([6.0, 9.0]), np.array([120.0, 80.0])
    b = Box(4.0, 7.0, 3.0, 5.0)
    fwd = transform_boxes([b], pivot, anchor, scale, angle)[0]
    back = transform_boxes([fwd], anchor, pivot, 1 / scale, -angle)[0]
    assert back.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-9)


def test_default_scale_and_angle_follow_the_anchor():
    crop = crop_of(10, 10, [Box(5, 5, 4, 4)], rho=50.0, theta=0.0)
    center = (200.0, 200.0)
    anchor = (200.0, 200.0 + 50.0 + math.log(2) / 0.004)  # straight below, further out
    paste = transform_crop(crop, anchor, CFG, center)
    b = paste.boxes[0]
    # quarter turn in the y-down frame, 0.75 scale
    assert (b.w, b.h) == pytest.approx((3.0, 3.0), abs=1e-9)


def test_placement_outside_frame_raises():
    crop = crop_of(10, 10, [Box(5, 5, 4, 4)])
    with pytest.raises(PlacementError):
        transform_crop(crop, (2.0, 2.0), CFG, (0, 0), frame_size=(50, 50), scale=1.0, angle=0.0)


def test_blend_identical_patch_is_a_no_op():
    img = np.random.default_rng(1).random((40, 50))
    res = seamless_blend(gray(img), img[10:25, 5:30], (5, 10))
    assert np.abs(res.frame.data - img.astype(np.float32)).max() < 1e-6


def dense_poisson(background, patch_value, n):
    # unknowns are the n x n interior; boundary ring and guidance come from a constant patch
    size = n * n
    a = np.zeros((size, size))
    rhs = np.zeros(size)
    for i in range(n):
        for j in range(n):
            k = i * n + j
            a[k, k] = 4
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < n and 0 <= jj < n:
                    a[k, ii * n + jj] = -1
                else:
                    rhs[k] += background
    return np.linalg.solve(a, rhs).reshape(n, n)


def test_constant_patch_matches_dense_solve():
    bg = 0.3
    img = np.full((30, 30), bg)
    patch = np.full((7, 7), 0.9)  # interior of a 7x7 support: 25 unknowns
    assert poisson_region(np.ones((7, 7), bool)).sum() == 25
    res = seamless_blend(gray(img), patch, (10, 12), tol=1e-9, max_iter=5000)
    oracle = dense_poisson(bg, 0.9, 5)
    got = res.frame.data[13:18, 11:16]
    assert np.abs(got - oracle).max() < 1e-3
    assert np.abs(got - bg).max() < 1e-3


def test_residual_never_increases():
    rng = np.random.default_rng(3)
    img = rng.random((60, 60))
    patch = rng.random((20, 24))
    res = seamless_blend(gray(img), patch, (20, 15), tol=1e-7, max_iter=3000)
    r = np.array(res.residuals)
    assert res.converged and len(r) > 5
    assert np.all(np.diff(r) <= 1e-12)


def test_blend_changes_only_the_paste_region():
    rng = np.random.default_rng(4)
    img = rng.random((50, 50))
    res = seamless_blend(gray(img), rng.random((10, 12)), (30, 20))
    diff = res.frame.data != img.astype(np.float32)
    outside = np.ones_like(diff)
    outside[21:29, 31:41] = False  # the 8x10 interior is all that may change
    assert not diff[outside].any()


def test_blend_iteration_cap_warns():
    img = np.zeros((40, 40))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = seamless_blend(gray(img), np.random.default_rng(0).random((20, 20)), (10, 10), tol=1e-14, max_iter=3)
    assert not res.converged
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


def scene(shape=(160, 160)):
    overlap = np.zeros(shape, bool)
    overlap[:, :50] = True
    return RegionPartition(overlap)


def test_augment_without_crops_is_identity():
    f = gray(np.random.default_rng(0).random((160, 160)))
    res = augment_frame(f, [Box(20, 20, 6, 10)], scene(), AugmentConfig(crops_per_frame=0), 0)
    assert res.frame is f and res.boxes == []


def test_single_crop_lands_in_anchor_region():
    part = scene()
    f = gray(np.random.default_rng(0).random((160, 160)))
    cfg = AugmentConfig(crops_per_frame=1, anchor_region=part.outside)
    res = augment_frame(f, [Box(20, 80, 6, 10)], part, cfg, 5)
    assert len(res.boxes) == 1
    b = res.boxes[0]
    assert part.outside[int(b.cy), int(b.cx)]


def test_augment_is_deterministic_per_seed():
    part = scene()
    f = gray(np.random.default_rng(0).random((160, 160)))
    boxes = [Box(20, 80, 6, 10), Box(30, 30, 5, 9)]
    a = augment_frame(f, boxes, part, AugmentConfig(), 11)
    b = augment_frame(f, boxes, part, AugmentConfig(), 11)
    assert np.array_equal(a.frame.data, b.frame.data)
    assert a.boxes == b.boxes


def test_augment_carries_motion_with_the_crop():
    part = scene()
    f = gray(np.random.default_rng(0).random((160, 160)))
    motion = np.zeros((160, 160), bool)
    motion[76:84, 18:22] = True
    res = augment_frame(f, [Box(20, 80, 6, 10)], part, AugmentConfig(crops_per_frame=1), 2, motion)
    assert res.motion.sum() > motion.sum()
    assert np.all(res.motion[motion])
