"""Homography estimation, box projection and the equidistant fisheye model."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Box, RegionPartition, enclosing_axis_aligned


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Homography:
    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) <= 1e-12:
            raise GeometryError("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def to_json(self) -> str:
        return json.dumps([float(v) for v in self.m.ravel()])

    @classmethod
    def from_json(cls, text: str) -> "Homography":
        values = json.loads(text)
        if len(values) != 9:
            raise GeometryError("homography JSON must hold 9 numbers")
        return cls(np.array(values, dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Homography":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class FisheyeModel:
    """Equidistant fisheye: a ray ``theta`` off-axis lands at radius ``focal * theta``.

    The matching undistorted plane is the pinhole image with the same focal
    length and center, so ``r_undistorted = focal * tan(theta)``.
    """

    focal: float
    center: tuple[float, float]
    max_theta: float = math.pi / 2

    def __post_init__(self):
        if not self.focal > 0:
            raise GeometryError("fisheye focal length must be positive")

    def distort(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        c = np.asarray(self.center, dtype=np.float64)
        d = pts - c
        r_u = np.hypot(d[:, 0], d[:, 1])
        theta = np.arctan(r_u / self.focal)
        with np.errstate(invalid="ignore", divide="ignore"):
            k = np.where(r_u > 0, self.focal * theta / r_u, 1.0)
        return c + d * k[:, None]

    def undistort(self, pts: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`distort`; rays at or past 90 degrees give NaN."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        c = np.asarray(self.center, dtype=np.float64)
        d = pts - c
        r_d = np.hypot(d[:, 0], d[:, 1])
        theta = r_d / self.focal
        valid = theta < min(self.max_theta, math.pi / 2 - 1e-9)
        with np.errstate(invalid="ignore", divide="ignore"):
            k = np.where(r_d > 0, self.focal * np.tan(theta) / r_d, 1.0)
        out = c + d * k[:, None]
        out[~valid] = np.nan
        return out


def fisheye_project(model: FisheyeModel, theta: float, phi: float) -> tuple[float, float]:
    if theta < 0 or theta > model.max_theta:
        raise GeometryError(f"ray at {theta:.4f} rad lies outside the fisheye image")
    r = model.focal * theta
    return (model.center[0] + r * math.cos(phi), model.center[1] + r * math.sin(phi))


def _normalizer(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    mean_dist = np.mean(np.hypot(*(pts - centroid).T))
    if mean_dist < 1e-12:
        raise GeometryError("correspondences are coincident")
    s = math.sqrt(2) / mean_dist
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1]])


def _collinear(a, b, c, tol=1e-9) -> bool:
    area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    scale = max(np.ptp([a[0], b[0], c[0]]), np.ptp([a[1], b[1], c[1]]), 1e-300)
    return abs(area) <= tol * scale * scale


def estimate_homography(correspondences) -> tuple[Homography, float]:
    """Normalized DLT fit mapping teacher points onto student points.

    ``correspondences`` is a sequence of ``((tx, ty), (sx, sy))`` pairs or an
    ``(n, 4)`` array. Returns the homography and the mean reprojection error
    in student pixels.
    """
    arr = np.asarray(correspondences, dtype=np.float64).reshape(-1, 4)
    if len(arr) < 4:
        raise GeometryError(f"need at least 4 correspondences, got {len(arr)}")
    src, dst = arr[:, :2], arr[:, 2:]
    if len(arr) == 4:
        for pts in (src, dst):
            for i, j, k in itertools.combinations(range(4), 3):
                if _collinear(pts[i], pts[j], pts[k]):
                    raise GeometryError("three of the four correspondences are collinear")

    t_src, t_dst = _normalizer(src), _normalizer(dst)
    ps = (t_src @ np.c_[src, np.ones(len(src))].T).T
    pd = (t_dst @ np.c_[dst, np.ones(len(dst))].T).T

    n = len(arr)
    a = np.zeros((2 * n, 9))
    u, v = pd[:, 0], pd[:, 1]
    a[0::2, 0:3] = ps
    a[0::2, 6:9] = -u[:, None] * ps
    a[1::2, 3:6] = ps
    a[1::2, 6:9] = -v[:, None] * ps
    _, s, vt = np.linalg.svd(a)
    if s[7] <= 1e-10 * s[0]:
        raise GeometryError("correspondence system is rank deficient (collinear or coincident points)")
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ hn @ t_src
    h = Homography(m)
    err = np.hypot(*(project_points(h, src) - dst).T)
    return h, float(err.mean())


def project_points(h: Homography, pts, distortion: FisheyeModel | None = None) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hp = np.c_[pts, np.ones(len(pts))] @ h.m.T
    w = hp[:, 2]
    scale = np.max(np.abs(hp[:, :2]), axis=1, initial=1.0)
    if np.any(np.abs(w) <= 1e-12 * np.maximum(scale, 1.0)):
        raise GeometryError("point maps to infinity")
    out = hp[:, :2] / w[:, None]
    if distortion is not None:
        out = distortion.distort(out)
    return out


def project_point(h: Homography, p, distortion: FisheyeModel | None = None) -> tuple[float, float]:
    x, y = project_points(h, p, distortion)[0]
    return (float(x), float(y))


def project_box(h: Homography, b: Box, distortion: FisheyeModel | None = None) -> Box:
    return enclosing_axis_aligned(project_points(h, b.corners(), distortion), b.score)


def build_region_partition(
    h: Homography,
    teacher_size: tuple[int, int],
    student_size: tuple[int, int],
    distortion: FisheyeModel | None = None,
) -> RegionPartition:
    """Mark student pixels whose center pulls back inside the teacher frame.

    Sizes are ``(width, height)``. With ``distortion`` the student frame is
    the fisheye image and ``h`` maps into its undistorted plane.
    """
    tw, th = teacher_size
    sw, sh = student_size
    ys, xs = np.mgrid[0:sh, 0:sw]
    pts = np.c_[xs.ravel() + 0.5, ys.ravel() + 0.5]
    if distortion is not None:
        pts = distortion.undistort(pts)
    valid = np.all(np.isfinite(pts), axis=1)
    pts = np.where(valid[:, None], pts, 0.0)

    # points behind either camera come back with the opposite homogeneous sign
    ref_w = (h.m @ np.array([tw / 2, th / 2, 1.0]))[2]
    hp = np.c_[pts, np.ones(len(pts))] @ np.linalg.inv(h.m).T
    w = hp[:, 2]
    good = valid & (np.sign(w) == np.sign(ref_w)) & (np.abs(w) > 1e-12)
    with np.errstate(invalid="ignore", divide="ignore"):
        tx = hp[:, 0] / w
        ty = hp[:, 1] / w
    inside = good & (tx >= 0) & (tx < tw) & (ty >= 0) & (ty < th)
    overlap = inside.reshape(sh, sw)
    if not overlap.any():
        raise GeometryError("teacher view does not intersect the student frame")
    return RegionPartition(overlap)


def read_correspondences(path) -> np.ndarray:
    """Rows of ``tx ty sx sy`` separated by whitespace or commas; ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 4:
            raise GeometryError(f"{path}:{lineno}: expected 4 values, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            # tolerate a header row
            if rows or lineno > 1:
                raise GeometryError(f"{path}:{lineno}: non-numeric value") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 4)
