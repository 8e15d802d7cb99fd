"""Artificial players for the student-only region.

Crops around teacher-projected boxes are rescaled by a radius-dependent
factor, rotated by the polar-angle difference between their source and the
anchor, and pasted with a Poisson (gradient-domain) blend.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage

from .core import Box, Frame, PolarCoord, RegionPartition, enclosing_axis_aligned, to_polar


class PlacementError(ValueError):
    """A transformed crop does not fit inside the frame."""


@dataclass
class AugmentConfig:
    alpha: float = 0.5
    beta: float = -0.004  # per pixel of radius
    gamma: float = 0.5
    crops_per_frame: int = 4
    anchor_region: np.ndarray | None = field(default=None, repr=False)
    rng_seed: int | None = None
    margin: int = 2
    inflate: float = 1.5
    max_retries: int = 10
    blend_tol: float = 1e-4
    blend_max_iter: int = 2000
    blend_omega: float = 1.0

    def __post_init__(self):
        if not self.alpha + self.gamma > 0:
            raise ValueError("alpha + gamma must be positive")


@dataclass
class Crop:
    patch: np.ndarray
    boxes: list[Box]
    source_center_polar: PolarCoord
    origin: tuple[int, int] = (0, 0)
    motion: np.ndarray | None = None


@dataclass
class Paste:
    """A warped crop ready to blend: pixels, validity, frame placement and boxes."""

    patch: np.ndarray
    support: np.ndarray
    origin: tuple[int, int]
    boxes: list[Box]
    motion: np.ndarray | None = None


@dataclass
class BlendResult:
    frame: Frame
    converged: bool
    iterations: int
    residuals: list[float]


@dataclass
class AugmentResult:
    frame: Frame
    boxes: list[Box]
    motion: np.ndarray | None = None


def _cluster(boxes: list[Box], inflate: float) -> list[list[int]]:
    parent = list(range(len(boxes)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, a in enumerate(boxes):
        for j in range(i + 1, len(boxes)):
            b = boxes[j]
            if (abs(a.cx - b.cx) * 2 < inflate * (a.w + b.w)) and (abs(a.cy - b.cy) * 2 < inflate * (a.h + b.h)):
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(len(boxes)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def extract_crops(frame: Frame, overlap_boxes: list[Box], cfg: AugmentConfig, rng=None, motion=None) -> list[Crop]:
    """One crop per cluster of adjacent boxes, in random order."""
    if not overlap_boxes:
        return []
    rng = np.random.default_rng(rng)
    h, w = frame.height, frame.width
    center = (w / 2, h / 2)
    crops = []
    for group in _cluster(overlap_boxes, cfg.inflate):
        members = [overlap_boxes[i] for i in group]
        x0 = max(0, math.floor(min(b.x0 for b in members)) - cfg.margin)
        y0 = max(0, math.floor(min(b.y0 for b in members)) - cfg.margin)
        x1 = min(w, math.ceil(max(b.x1 for b in members)) + cfg.margin)
        y1 = min(h, math.ceil(max(b.y1 for b in members)) + cfg.margin)
        if x1 - x0 < 2 or y1 - y0 < 2:
            continue
        local = []
        for b in members:
            bx0, bx1 = max(b.x0, x0), min(b.x1, x1)
            by0, by1 = max(b.y0, y0), min(b.y1, y1)
            if bx1 > bx0 and by1 > by0:
                local.append(Box((bx0 + bx1) / 2 - x0, (by0 + by1) / 2 - y0, bx1 - bx0, by1 - by0, b.score))
        if not local:
            continue
        crops.append(
            Crop(
                patch=np.array(frame.data[y0:y1, x0:x1]),
                boxes=local,
                source_center_polar=to_polar(((x0 + x1) / 2, (y0 + y1) / 2), center),
                origin=(x0, y0),
                motion=None if motion is None else np.array(motion[y0:y1, x0:x1]),
            )
        )
    order = rng.permutation(len(crops))
    return [crops[i] for i in order]


def scale_factor(rho_i: float, rho_f: float, cfg: AugmentConfig) -> float:
    return cfg.alpha * math.exp(cfg.beta * (rho_f - rho_i)) + cfg.gamma


def _similarity(scale: float, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return scale * np.array([[c, -s], [s, c]])


def transform_boxes(boxes: list[Box], pivot, anchor, scale: float, angle: float) -> list[Box]:
    """Map each box's corners by ``anchor + A (p - pivot)`` and re-enclose them."""
    a = _similarity(scale, angle)
    pivot = np.asarray(pivot, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    out = []
    for b in boxes:
        pts = (b.corners() - pivot) @ a.T + anchor
        out.append(enclosing_axis_aligned(pts, b.score))
    return out


def transform_crop(
    crop: Crop,
    anchor,
    cfg: AugmentConfig,
    frame_center,
    frame_size: tuple[int, int] | None = None,
    scale: float | None = None,
    angle: float | None = None,
) -> Paste:
    """Rescale and rotate ``crop`` about its center so the center lands on ``anchor``.

    ``scale``/``angle`` default to the radius rule and the polar-angle
    difference. Raises :class:`PlacementError` when ``frame_size`` is given
    and the warped patch does not fit.
    """
    target = to_polar(anchor, frame_center)
    if scale is None:
        scale = scale_factor(crop.source_center_polar.rho, target.rho, cfg)
    if angle is None:
        angle = target.theta - crop.source_center_polar.theta
    ph, pw = crop.patch.shape[:2]
    pivot = np.array([pw / 2, ph / 2])
    ax, ay = float(anchor[0]), float(anchor[1])

    c, s = abs(math.cos(angle)), abs(math.sin(angle))
    ex = scale * (c * pw + s * ph) / 2
    ey = scale * (s * pw + c * ph) / 2
    ox, oy = math.floor(ax - ex), math.floor(ay - ey)
    ow, oh = math.ceil(ax + ex) - ox, math.ceil(ay + ey) - oy
    if frame_size is not None:
        fw, fh = frame_size
        if ox < 1 or oy < 1 or ox + ow > fw - 1 or oy + oh > fh - 1:
            raise PlacementError("transformed crop leaves the frame")

    # output pixel centers back into the source patch
    ainv = np.linalg.inv(_similarity(scale, angle))
    vs, us = np.mgrid[0:oh, 0:ow]
    q = np.stack([ox + us + 0.5 - ax, oy + vs + 0.5 - ay], axis=-1) @ ainv.T + pivot
    col, row = q[..., 0] - 0.5, q[..., 1] - 0.5
    support = (col >= 0) & (col <= pw - 1) & (row >= 0) & (row <= ph - 1)
    coords = np.stack([row, col])
    if crop.patch.ndim == 2:
        warped = ndimage.map_coordinates(crop.patch.astype(np.float64), coords, order=1, mode="nearest")
    else:
        warped = np.stack(
            [ndimage.map_coordinates(crop.patch[..., k].astype(np.float64), coords, order=1, mode="nearest")
             for k in range(crop.patch.shape[2])],
            axis=-1,
        )
    motion = None
    if crop.motion is not None:
        motion = ndimage.map_coordinates(crop.motion.astype(np.uint8), coords, order=0, mode="nearest") > 0
        motion &= support
    boxes = transform_boxes(crop.boxes, pivot, (ax, ay), scale, angle)
    return Paste(np.clip(warped, 0.0, 1.0), support, (ox, oy), boxes, motion)


@numba.njit(cache=True)
def _poisson_sweeps(f, omega_mask, b, tol, max_iter, omega, residuals):
    h, w = f.shape
    it = 0
    for it in range(1, max_iter + 1):
        for i in range(h):
            for j in range(w):
                if omega_mask[i, j]:
                    gs = (f[i - 1, j] + f[i + 1, j] + f[i, j - 1] + f[i, j + 1] + b[i, j]) / 4.0
                    f[i, j] += omega * (gs - f[i, j])
        rmax = 0.0
        r2 = 0.0
        for i in range(h):
            for j in range(w):
                if omega_mask[i, j]:
                    r = b[i, j] - (4.0 * f[i, j] - f[i - 1, j] - f[i + 1, j] - f[i, j - 1] - f[i, j + 1])
                    r2 += r * r
                    if abs(r) > rmax:
                        rmax = abs(r)
        residuals[it - 1] = np.sqrt(r2)
        if rmax < tol:
            return it, True
    return it, False


def poisson_region(support: np.ndarray) -> np.ndarray:
    """Pixels of ``support`` whose four neighbours are also in ``support``."""
    return ndimage.binary_erosion(support, structure=ndimage.generate_binary_structure(2, 1), border_value=0)


def seamless_blend(
    target: Frame,
    patch: np.ndarray,
    origin,
    support: np.ndarray | None = None,
    tol: float = 1e-4,
    max_iter: int = 2000,
    omega: float = 1.0,
) -> BlendResult:
    """Gradient-domain paste of ``patch`` with its top-left pixel at ``origin``.

    The unknowns are the support pixels whose 4-neighbours are all in the
    support; the outer ring acts as Dirichlet boundary taken from the target.
    ``omega=1`` is plain Gauss-Seidel.
    """
    patch = np.asarray(patch, dtype=np.float64)
    ph, pw = patch.shape[:2]
    ox, oy = int(origin[0]), int(origin[1])
    if ox < 0 or oy < 0 or ox + pw > target.width or oy + ph > target.height:
        raise PlacementError("patch does not fit inside the target frame")
    if support is None:
        support = np.ones((ph, pw), dtype=bool)
    region = poisson_region(support)
    if target.channels == 1 and patch.ndim == 3:
        patch = patch @ np.array([0.299, 0.587, 0.114])
    elif target.channels == 3 and patch.ndim == 2:
        patch = np.repeat(patch[..., None], 3, axis=2)

    out = np.array(target.data, dtype=np.float64)
    chans = [out] if out.ndim == 2 else [out[..., k] for k in range(out.shape[2])]
    pchans = [patch] if patch.ndim == 2 else [patch[..., k] for k in range(patch.shape[2])]
    converged, iterations, history = True, 0, []
    if region.any():
        ring = support & ~region
        for dst, src in zip(chans, pchans):
            view = dst[oy:oy + ph, ox:ox + pw]
            lap = np.zeros_like(src)
            lap[1:-1, 1:-1] = 4 * src[1:-1, 1:-1] - src[:-2, 1:-1] - src[2:, 1:-1] - src[1:-1, :-2] - src[1:-1, 2:]
            shift = (view[ring] - src[ring]).mean() if ring.any() else 0.0
            view[region] = src[region] + shift
            # pad by one so every region pixel has in-bounds neighbours
            y0, x0 = max(oy - 1, 0), max(ox - 1, 0)
            sub = dst[y0:oy + ph + 1, x0:ox + pw + 1].copy()
            m = np.zeros(sub.shape, dtype=np.bool_)
            bb = np.zeros(sub.shape)
            m[oy - y0:oy - y0 + ph, ox - x0:ox - x0 + pw] = region
            bb[oy - y0:oy - y0 + ph, ox - x0:ox - x0 + pw] = lap
            res = np.zeros(max_iter)
            it, ok = _poisson_sweeps(sub, m, bb, tol, max_iter, omega, res)
            dst[y0:oy + ph + 1, x0:ox + pw + 1][m] = sub[m]
            iterations = max(iterations, it)
            converged &= bool(ok)
            history = list(res[:it])
    if not converged:
        warnings.warn("Poisson blend hit the iteration cap before reaching tolerance", RuntimeWarning)
    return BlendResult(Frame(np.clip(out, 0.0, 1.0), target.timestamp, target.camera_id), converged, iterations, history)


def _sample_anchor(region_idx: np.ndarray, width: int, rng) -> tuple[float, float]:
    k = region_idx[rng.integers(len(region_idx))]
    return (float(k % width) + 0.5, float(k // width) + 0.5)


def augment_frame(
    frame: Frame,
    overlap_boxes: list[Box],
    partition: RegionPartition,
    cfg: AugmentConfig,
    rng=None,
    motion: np.ndarray | None = None,
) -> AugmentResult:
    """Paste ``cfg.crops_per_frame`` transformed crops at anchors in the anchor region.

    When ``motion`` (a raw motion mask) is given, the crops' motion pixels
    travel with them and the composited mask is returned alongside.
    """
    rng = np.random.default_rng(cfg.rng_seed if rng is None else rng)
    if cfg.crops_per_frame <= 0 or not overlap_boxes:
        return AugmentResult(frame, [], motion)
    crops = extract_crops(frame, overlap_boxes, cfg, rng, motion)
    if not crops:
        return AugmentResult(frame, [], motion)
    region = cfg.anchor_region if cfg.anchor_region is not None else partition.outside
    region = np.asarray(region, dtype=bool)
    region_idx = np.flatnonzero(region)
    if len(region_idx) == 0:
        return AugmentResult(frame, [], motion)

    out_motion = None if motion is None else np.array(motion, dtype=bool)
    center = (frame.width / 2, frame.height / 2)
    current = frame
    boxes: list[Box] = []
    for _ in range(cfg.crops_per_frame):
        crop = crops[rng.integers(len(crops))]
        for _attempt in range(cfg.max_retries):
            anchor = _sample_anchor(region_idx, frame.width, rng)
            try:
                paste = transform_crop(crop, anchor, cfg, center, (frame.width, frame.height))
            except PlacementError:
                continue
            centers = np.array([[b.cx, b.cy] for b in paste.boxes])
            ci = np.floor(centers).astype(int)
            if not np.all(region[ci[:, 1], ci[:, 0]]):
                continue
            break
        else:
            continue
        blended = seamless_blend(
            current, paste.patch, paste.origin, paste.support,
            tol=cfg.blend_tol, max_iter=cfg.blend_max_iter, omega=cfg.blend_omega,
        )
        current = blended.frame
        boxes.extend(b.with_score(1.0) for b in paste.boxes)
        if out_motion is not None and paste.motion is not None:
            ox, oy = paste.origin
            ph, pw = paste.support.shape
            inner = poisson_region(paste.support)
            view = out_motion[oy:oy + ph, ox:ox + pw]
            view[inner] = paste.motion[inner]
    return AugmentResult(current, boxes, out_motion)
