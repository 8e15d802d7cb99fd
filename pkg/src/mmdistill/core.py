"""Shared value types and small geometry helpers.

Pixel convention: origin at the top-left corner, x to the right, y down.
Pixel ``(i, j)`` covers ``[j, j+1) x [i, i+1)``, so a box spanning columns
``x0..x1`` inclusive has ``cx = (x0 + x1 + 1) / 2`` and ``w = x1 - x0 + 1``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class CameraId(enum.Enum):
    STUDENT = "student"
    TEACHER = "teacher"


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    """Single- or three-channel image with intensities in [0, 1]."""

    data: np.ndarray
    timestamp: float = 0.0
    camera_id: CameraId = CameraId.STUDENT

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[2] != 3):
            raise ValueError(f"frame data must be HxW or HxWx3, got {data.shape}")
        if data.shape[0] == 0 or data.shape[1] == 0:
            raise ValueError("frame must be non-empty")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("frame intensities must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    def luma(self) -> np.ndarray:
        if self.channels == 1:
            return self.data
        return self.data @ np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise ValueError(f"box centre must be finite, got ({self.cx}, {self.cy})")
        if not (self.w > 0 and self.h > 0 and math.isfinite(self.w) and math.isfinite(self.h)):
            raise ValueError(f"box extents must be positive, got w={self.w} h={self.h}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    def corners(self) -> np.ndarray:
        return np.array(
            [[self.x0, self.y0], [self.x1, self.y0], [self.x1, self.y1], [self.x0, self.y1]]
        )

    def with_score(self, score: float) -> "Box":
        return Box(self.cx, self.cy, self.w, self.h, score)

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h, self.score)


@dataclass(frozen=True)
class PolarCoord:
    rho: float
    theta: float


@dataclass(frozen=True)
class RegionPartition:
    """Student-frame labeling; ``overlap`` is True where the teacher also sees."""

    overlap: np.ndarray = field(repr=False)

    def __post_init__(self):
        overlap = np.asarray(self.overlap, dtype=bool)
        overlap.setflags(write=False)
        object.__setattr__(self, "overlap", overlap)

    @property
    def outside(self) -> np.ndarray:
        return ~self.overlap

    @property
    def shape(self) -> tuple[int, int]:
        return self.overlap.shape

    def overlap_fraction(self) -> float:
        return float(self.overlap.mean())


@dataclass(frozen=True)
class MotionMasks:
    raw: np.ndarray = field(repr=False)
    dilated: np.ndarray = field(repr=False)


def boxes_to_array(boxes) -> np.ndarray:
    """Stack boxes into an ``(n, 5)`` array of ``cx, cy, w, h, score``."""
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 5).astype(np.float64)
    if len(boxes) == 0:
        return np.zeros((0, 5))
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(float(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in arr]


def to_polar(p, frame_center) -> PolarCoord:
    # theta is atan2 of the y-down offset: a point straight above the center has theta = -pi/2
    dx = float(p[0]) - float(frame_center[0])
    dy = float(p[1]) - float(frame_center[1])
    rho = math.hypot(dx, dy)
    if rho == 0.0:
        return PolarCoord(0.0, 0.0)
    return PolarCoord(rho, math.atan2(dy, dx))


def from_polar(pc: PolarCoord, frame_center) -> tuple[float, float]:
    return (
        float(frame_center[0]) + pc.rho * math.cos(pc.theta),
        float(frame_center[1]) + pc.rho * math.sin(pc.theta),
    )


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(inter / (a.w * a.h + b.w * b.h - inter), 1.0)  # rounding can push identical boxes past 1


def _rows(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 5))
    return np.atleast_2d(arr)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, >=4)`` and ``(m, >=4)`` center-size arrays."""
    a = _rows(a)
    b = _rows(b)
    ax0, ax1 = a[:, 0] - a[:, 2] / 2, a[:, 0] + a[:, 2] / 2
    ay0, ay1 = a[:, 1] - a[:, 3] / 2, a[:, 1] + a[:, 3] / 2
    bx0, bx1 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    by0, by1 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ax1[:, None], bx1[None]) - np.maximum(ax0[:, None], bx0[None])
    ih = np.minimum(ay1[:, None], by1[None]) - np.maximum(ay0[:, None], by0[None])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.minimum(out, 1.0)


def enclosing_axis_aligned(corners, score: float = 1.0) -> Box:
    pts = np.asarray(corners, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise DegenerateBoxError("no points to enclose")
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    if not (x1 - x0 > 0 and y1 - y0 > 0):
        raise DegenerateBoxError("points span zero extent")
    return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, score)


def box_center_in_mask(boxes: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """True where the pixel holding each box center is set; centers off-frame give False."""
    boxes = _rows(boxes)
    h, w = mask.shape
    out = np.zeros(len(boxes), dtype=bool)
    finite = np.isfinite(boxes[:, 0]) & np.isfinite(boxes[:, 1])
    xi = np.floor(np.where(finite, boxes[:, 0], -1)).astype(np.int64)
    yi = np.floor(np.where(finite, boxes[:, 1], -1)).astype(np.int64)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out[inside] = mask[yi[inside], xi[inside]]
    return out
