import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmdistill.core import (
    Box, DegenerateBoxError, Frame, CameraId, PolarCoord, box_center_in_mask, box_iou, boxes_to_array,
    array_to_boxes, enclosing_axis_aligned, from_polar, iou_matrix, to_polar,
)

coords = st.floats(-500, 500, allow_nan=False)
sizes = st.floats(0.5, 200, allow_nan=False)
boxes = st.builds(Box, coords, coords, sizes, sizes)


def raster_iou(a: Box, b: Box, step=0.01):
    # count sample points of a fine grid that fall in each box
    xs = np.arange(min(a.x0, b.x0), max(a.x1, b.x1), step) + step / 2
    ys = np.arange(min(a.y0, b.y0), max(a.y1, b.y1), step) + step / 2
    X, Y = np.meshgrid(xs, ys)
    ina = (X >= a.x0) & (X < a.x1) & (Y >= a.y0) & (Y < a.y1)
    inb = (X >= b.x0) & (X < b.x1) & (Y >= b.y0) & (Y < b.y1)
    return (ina & inb).sum() / (ina | inb).sum()


def test_to_polar_axis_offset():
    pc = to_polar((650, 640), (640, 640))
    assert pc.rho == pytest.approx(10)
    assert pc.theta == pytest.approx(0)


def test_to_polar_origin():
    assert to_polar((640, 640), (640, 640)) == PolarCoord(0.0, 0.0)


def test_to_polar_y_down_matches_atan2():
    pc = to_polar((640, 630), (640, 640))
    assert pc.rho == pytest.approx(10)
    # image rows grow downward, so a point above the centre has dy = -10
    assert pc.theta == pytest.approx(math.atan2(-10, 0))
    assert pc.theta == pytest.approx(-math.pi / 2)


@given(coords, coords, coords, coords)
def test_polar_round_trip(px, py, cx, cy):
    x, y = from_polar(to_polar((px, py), (cx, cy)), (cx, cy))
    assert abs(x - px) < 1e-9 and abs(y - py) < 1e-9


def test_iou_identical_and_disjoint():
    a = Box(5, 5, 4, 4)
    assert box_iou(a, a) == 1.0
    assert box_iou(a, Box(50, 50, 4, 4)) == 0.0


def test_iou_half_shift_matches_raster():
    a, b = Box(0.5, 0.5, 1, 1), Box(1.0, 0.5, 1, 1)
    oracle = raster_iou(a, b, 0.001)
    assert oracle == pytest.approx(1 / 3, abs=1e-3)
    assert box_iou(a, b) == pytest.approx(1 / 3, abs=1e-12)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = box_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(box_iou(b, a), abs=1e-12)
    assert box_iou(a, a) == pytest.approx(1.0)


@given(st.lists(boxes, max_size=6), st.lists(boxes, max_size=6))
def test_iou_matrix_agrees_with_pairwise(a, b):
    m = iou_matrix(boxes_to_array(a), boxes_to_array(b))
    assert m.shape == (len(a), len(b))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            assert m[i, j] == pytest.approx(box_iou(x, y), abs=1e-12)


def test_enclosing_axis_aligned_rectangle():
    b = Box(10, 20, 6, 4)
    assert enclosing_axis_aligned(b.corners()) == b


def test_enclosing_rotated_unit_square():
    c = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])
    r = np.array([[math.cos(math.pi / 4), -math.sin(math.pi / 4)], [math.sin(math.pi / 4), math.cos(math.pi / 4)]])
    b = enclosing_axis_aligned(c @ r.T)
    assert b.w == pytest.approx(math.sqrt(2), abs=1e-12)
    assert b.h == pytest.approx(math.sqrt(2), abs=1e-12)
    assert (b.cx, b.cy) == pytest.approx((0, 0), abs=1e-12)


def test_enclosing_degenerate():
    with pytest.raises(DegenerateBoxError):
        enclosing_axis_aligned(np.ones((4, 2)))


@given(boxes)
def test_enclosing_idempotent(b):
    once = enclosing_axis_aligned(b.corners())
    twice = enclosing_axis_aligned(once.corners())
    assert once.as_tuple() == pytest.approx(twice.as_tuple(), abs=1e-9)


def test_box_rejects_bad_values():
    with pytest.raises(ValueError):
        Box(0, 0, -1, 2)
    with pytest.raises(ValueError):
        Box(0, 0, 1, 2, score=1.5)
    with pytest.raises(ValueError):
        Box(float("nan"), 0, 1, 1)


def test_array_round_trip():
    bs = [Box(1, 2, 3, 4, 0.5), Box(5, 6, 7, 8, 0.25)]
    assert array_to_boxes(boxes_to_array(bs)) == bs
    assert boxes_to_array([]).shape == (0, 5)


def test_center_in_mask_uses_floor():
    mask = np.zeros((10, 10), bool)
    mask[3, 4] = True
    arr = boxes_to_array([Box(4.9, 3.1, 2, 2), Box(5.0, 3.1, 2, 2), Box(-1, 3, 1, 1)])
    assert box_center_in_mask(arr, mask).tolist() == [True, False, False]


def test_frame_is_read_only():
    f = Frame(np.zeros((4, 4), np.float32), 0.0, CameraId.STUDENT)
    with pytest.raises(ValueError):
        f.data[0, 0] = 1.0
    assert f.width == 4 and f.height == 4 and f.channels == 1
