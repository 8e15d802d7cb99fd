"""Synthetic dual-camera football field.

Players walk between random waypoints on a planar field. A downward-looking
equidistant fisheye (student) and a tilted pinhole camera (teacher) share a
pole at the side of the field. Both views are rendered with exact boxes, and
the ground-plane homography between the teacher image and the undistorted
student plane is returned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Box, CameraId, Frame
from .geometry import FisheyeModel, Homography


@dataclass
class WorldConfig:
    field_length: float = 100.0
    field_width: float = 60.0
    n_players: int = 20
    speed_range: tuple[float, float] = (0.8, 3.0)
    pause_range: tuple[float, float] = (0.0, 1.0)
    player_height: float = 1.8
    player_width: float = 0.7
    pole_offset: float = 5.5  # metres behind the near touchline
    student_height: float = 9.8
    student_size: int = 640
    teacher_height: float = 9.5
    teacher_size: tuple[int, int] = (640, 480)
    teacher_hfov_deg: float = 57.0
    teacher_aim: tuple[float, float] = (50.0, 77.0)
    noise_sigma: float = 1.0 / 255.0
    seed: int = 0

    def __post_init__(self):
        self.speed_range = tuple(self.speed_range)
        self.pause_range = tuple(self.pause_range)
        self.teacher_size = tuple(self.teacher_size)
        self.teacher_aim = tuple(self.teacher_aim)
        if self.n_players < 0 or self.field_length <= 0 or self.field_width <= 0:
            raise ValueError("invalid field configuration")
        if self.student_height <= self.player_height or self.teacher_height <= self.player_height:
            raise ValueError("cameras must be mounted above the players")


@dataclass
class TeacherNoise:
    center_sigma: float = 1.0
    size_sigma: float = 0.05
    drop_prob: float = 0.02


@dataclass
class GroundTruth:
    """Per-frame player state; boxes are ``(n_frames, n_players, 5)`` arrays."""

    timestamps: np.ndarray
    positions: np.ndarray
    moving: np.ndarray
    student_boxes: np.ndarray
    student_visible: np.ndarray
    teacher_boxes: np.ndarray
    teacher_visible: np.ndarray
    fps: float

    def index(self, t: float) -> int:
        i = int(round(t * self.fps))
        if not 0 <= i < len(self.timestamps):
            raise IndexError(f"t={t} is outside the simulated duration")
        return i

    def student(self, i: int) -> np.ndarray:
        return self.student_boxes[i][self.student_visible[i]]

    def teacher(self, i: int) -> np.ndarray:
        return self.teacher_boxes[i][self.teacher_visible[i]]


def _look_at(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


class World:
    """Cameras, background and player trajectories for one configuration."""

    def __init__(self, cfg: WorldConfig, duration: float, fps: float):
        self.cfg = cfg
        self.duration = duration
        self.fps = fps
        self.n_frames = int(round(duration * fps))
        s = cfg.student_size
        self.fisheye = FisheyeModel(focal=(s / 2) / (math.pi / 2), center=(s / 2, s / 2), max_theta=math.pi / 2)
        base = np.array([cfg.field_length / 2, -cfg.pole_offset])
        self.c_s = np.array([base[0], base[1], cfg.student_height])
        self.r_s = np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, -1.0]])
        self.c_t = np.array([base[0], base[1], cfg.teacher_height])
        self.r_t = _look_at(self.c_t, np.array([cfg.teacher_aim[0], cfg.teacher_aim[1], 0.0]))
        tw, th = cfg.teacher_size
        ft = (tw / 2) / math.tan(math.radians(cfg.teacher_hfov_deg) / 2)
        self.k_t = np.array([[ft, 0, tw / 2], [0, ft, th / 2], [0, 0, 1.0]])
        fs = self.fisheye.focal
        self.k_s = np.array([[fs, 0, s / 2], [0, fs, s / 2], [0, 0, 1.0]])
        self._check_coverage()
        self.homography = Homography(self._ground_h(self.k_s, self.r_s, self.c_s) @ np.linalg.inv(
            self._ground_h(self.k_t, self.r_t, self.c_t)))
        rng = np.random.default_rng([cfg.seed, 1])
        self.background = self._render_background()
        self.teacher_background = self._render_teacher_background()
        self._noise_bank = rng.normal(0.0, cfg.noise_sigma, size=(8, s, s)).astype(np.float32)
        self.positions, self.moving = self._trajectories(rng)
        pr = np.random.default_rng([cfg.seed, 2])
        n = cfg.n_players
        bright = pr.random(n) < 0.5
        self.jersey = np.where(bright, pr.uniform(0.7, 0.95, n), pr.uniform(0.02, 0.1, n))
        self.shorts = np.where(bright, pr.uniform(0.02, 0.1, n), pr.uniform(0.7, 0.95, n))
        self._gt: GroundTruth | None = None

    # ---- cameras --------------------------------------------------------
    @staticmethod
    def _ground_h(k, r, c):
        return k @ r @ np.array([[1.0, 0, -c[0]], [0, 1.0, -c[1]], [0, 0, -c[2]]])

    def _check_coverage(self):
        fl, fw = self.cfg.field_length, self.cfg.field_width
        corners = np.array([[0, 0, 0], [fl, 0, 0], [fl, fw, 0], [0, fw, 0]], dtype=float)
        px = self.project_student(corners)
        s = self.cfg.student_size
        if not np.all(np.isfinite(px)) or np.any(px < 0) or np.any(px >= s):
            raise ValueError("student view does not cover the whole field")

    def project_student(self, pts: np.ndarray) -> np.ndarray:
        cam = (np.asarray(pts, dtype=float) - self.c_s) @ self.r_s.T
        theta = np.arctan2(np.hypot(cam[..., 0], cam[..., 1]), cam[..., 2])
        phi = np.arctan2(cam[..., 1], cam[..., 0])
        r = self.fisheye.focal * theta
        out = np.stack([self.fisheye.center[0] + r * np.cos(phi), self.fisheye.center[1] + r * np.sin(phi)], -1)
        out[theta > self.fisheye.max_theta] = np.nan
        return out

    def project_teacher(self, pts: np.ndarray) -> np.ndarray:
        cam = (np.asarray(pts, dtype=float) - self.c_t) @ self.r_t.T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = cam[..., :2] / cam[..., 2:3]
        out = uv * self.k_t[0, 0] + self.k_t[:2, 2]
        out[cam[..., 2] <= 1e-6] = np.nan
        return out

    def student_rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        du = u - self.fisheye.center[0]
        dv = v - self.fisheye.center[1]
        theta = np.hypot(du, dv) / self.fisheye.focal
        phi = np.arctan2(dv, du)
        cam = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], -1)
        return cam @ self.r_s

    def teacher_rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        f = self.k_t[0, 0]
        cam = np.stack([(u - self.k_t[0, 2]) / f, (v - self.k_t[1, 2]) / f, np.ones_like(u)], -1)
        return cam @ self.r_t

    # ---- background -----------------------------------------------------
    def _ground_intensity(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        fl, fw = self.cfg.field_length, self.cfg.field_width
        on_field = (x >= 0) & (x <= fl) & (y >= 0) & (y <= fw)
        stripe = (np.floor(x / 10.0).astype(int) % 2) * 0.04
        grass = 0.32 + stripe + 0.01 * np.sin(0.7 * x + 0.3 * y)
        return np.where(on_field, grass, 0.2 + 0.01 * np.sin(0.2 * x))

    def _render_ground(self, rays: np.ndarray, origin: np.ndarray) -> np.ndarray:
        down = rays[..., 2] < -1e-9
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(down, -origin[2] / rays[..., 2], 0.0)
        x = origin[0] + t * rays[..., 0]
        y = origin[1] + t * rays[..., 1]
        return np.where(down, self._ground_intensity(x, y), 0.55)

    def _render_background(self) -> np.ndarray:
        s = self.cfg.student_size
        v, u = np.mgrid[0:s, 0:s] + 0.5
        inside = np.hypot(u - s / 2, v - s / 2) / self.fisheye.focal < math.pi / 2
        img = self._render_ground(self.student_rays(u, v), self.c_s)
        return np.where(inside, img, 0.0).astype(np.float32)

    def _render_teacher_background(self) -> np.ndarray:
        tw, th = self.cfg.teacher_size
        v, u = np.mgrid[0:th, 0:tw] + 0.5
        return self._render_ground(self.teacher_rays(u, v), self.c_t).astype(np.float32)

    def field_mask(self) -> np.ndarray:
        """Student pixels that image the playing field."""
        s = self.cfg.student_size
        v, u = np.mgrid[0:s, 0:s] + 0.5
        rays = self.student_rays(u, v)
        down = rays[..., 2] < -1e-9
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(down, -self.c_s[2] / rays[..., 2], 0.0)
        x = self.c_s[0] + t * rays[..., 0]
        y = self.c_s[1] + t * rays[..., 1]
        inside = np.hypot(u - s / 2, v - s / 2) / self.fisheye.focal < math.pi / 2
        return inside & down & (x >= 0) & (x <= self.cfg.field_length) & (y >= 0) & (y <= self.cfg.field_width)

    def field_polygon(self, n_per_side: int = 16) -> list[tuple[float, float]]:
        """Field outline in student pixels, densely sampled along each touchline."""
        fl, fw = self.cfg.field_length, self.cfg.field_width
        t = np.linspace(0, 1, n_per_side, endpoint=False)
        pts = np.concatenate([
            np.c_[t * fl, np.zeros_like(t)], np.c_[np.full_like(t, fl), t * fw],
            np.c_[fl - t * fl, np.full_like(t, fw)], np.c_[np.zeros_like(t), fw - t * fw],
        ])
        px = self.project_student(np.c_[pts, np.zeros(len(pts))])
        return [(float(x), float(y)) for x, y in px]

    # ---- players --------------------------------------------------------
    def _trajectories(self, rng):
        cfg = self.cfg
        n, nf = cfg.n_players, max(self.n_frames, 1)
        dt = 1.0 / self.fps
        lo = np.array([1.0, 1.0])
        hi = np.array([cfg.field_length - 1.0, cfg.field_width - 1.0])
        pos = rng.uniform(lo, hi, size=(n, 2))
        goal = rng.uniform(lo, hi, size=(n, 2))
        speed = rng.uniform(*cfg.speed_range, size=n)
        pause = np.zeros(n)
        out = np.empty((nf, n, 2))
        moving = np.empty((nf, n), dtype=bool)
        for k in range(nf):
            out[k] = pos
            step = goal - pos
            dist = np.hypot(step[:, 0], step[:, 1])
            active = pause <= 0
            moving[k] = active
            arrive = active & (dist <= speed * dt)
            go = active & ~arrive
            pos = pos.copy()
            pos[go] += step[go] / dist[go, None] * (speed[go] * dt)[:, None]
            pos[arrive] = goal[arrive]
            m = int(arrive.sum())
            if m:
                # mostly local moves, sometimes a long run across the pitch
                local = np.clip(goal[arrive] + rng.normal(0, 12.0, size=(m, 2)), lo, hi)
                far = rng.uniform(lo, hi, size=(m, 2))
                goal[arrive] = np.where((rng.random(m) < 0.3)[:, None], far, local)
                speed[arrive] = rng.uniform(*cfg.speed_range, size=m)
                pause[arrive] = rng.uniform(*cfg.pause_range, size=m)
            pause[~active] -= dt
        return out, moving

    def _billboards(self, pos: np.ndarray):
        """Per-player billboard frames facing the pole: origin, horizontal axis."""
        to_cam = self.c_s[:2] - pos
        nrm = to_cam / np.linalg.norm(to_cam, axis=1, keepdims=True)
        side = np.c_[-nrm[:, 1], nrm[:, 0]]
        return nrm, side

    def _outline(self, pos: np.ndarray) -> np.ndarray:
        """``(n, 24, 3)`` points on each player's painted silhouette (an ellipse on the billboard)."""
        cfg = self.cfg
        _, side = self._billboards(pos)
        a = np.linspace(0.0, 2 * np.pi, 24, endpoint=False)
        s = 0.5 * cfg.player_width * np.cos(a)
        z = 0.5 * cfg.player_height * (1.0 + np.sin(a))
        pts = np.empty((len(pos), len(a), 3))
        pts[..., 0] = pos[:, None, 0] + s[None] * side[:, None, 0]
        pts[..., 1] = pos[:, None, 1] + s[None] * side[:, None, 1]
        pts[..., 2] = z[None]
        return pts

    @staticmethod
    def _enclose(px: np.ndarray) -> np.ndarray:
        x0, y0 = np.min(px, axis=1).T
        x1, y1 = np.max(px, axis=1).T
        return np.c_[(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, np.ones(len(px))]

    def boxes_at(self, k: int):
        pos = self.positions[k]
        outline = self._outline(pos)
        sb = self._enclose(self.project_student(outline))
        tp = self.project_teacher(outline)
        tb = self._enclose(tp)
        s = self.cfg.student_size
        tw, th = self.cfg.teacher_size
        s_vis = np.all(np.isfinite(sb), axis=1) & (sb[:, 0] >= 0) & (sb[:, 0] < s) & (sb[:, 1] >= 0) & (sb[:, 1] < s)
        t_vis = np.all(np.isfinite(tb), axis=1) & (tb[:, 0] >= 0) & (tb[:, 0] < tw) & (tb[:, 1] >= 0) & (tb[:, 1] < th)
        # clip teacher boxes to the image
        tb = np.nan_to_num(tb)
        x0 = np.clip(tb[:, 0] - tb[:, 2] / 2, 0, tw)
        x1 = np.clip(tb[:, 0] + tb[:, 2] / 2, 0, tw)
        y0 = np.clip(tb[:, 1] - tb[:, 3] / 2, 0, th)
        y1 = np.clip(tb[:, 1] + tb[:, 3] / 2, 0, th)
        t_vis &= (x1 - x0 > 0.5) & (y1 - y0 > 0.5)
        tb = np.c_[(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, np.ones(len(tb))]
        return np.nan_to_num(sb), s_vis, tb, t_vis

    @property
    def ground_truth(self) -> GroundTruth:
        if self._gt is None:
            n, nf = self.cfg.n_players, self.n_frames
            sb = np.zeros((nf, n, 5))
            tb = np.zeros((nf, n, 5))
            sv = np.zeros((nf, n), dtype=bool)
            tv = np.zeros((nf, n), dtype=bool)
            for k in range(nf):
                sb[k], sv[k], tb[k], tv[k] = self.boxes_at(k)
            self._gt = GroundTruth(np.arange(nf) / self.fps, self.positions[:nf], self.moving[:nf],
                                   sb, sv, tb, tv, self.fps)
        return self._gt

    # ---- rendering ------------------------------------------------------
    def _paint(self, img, pos, rays_fn, origin, boxes, vis):
        cfg = self.cfg
        nrm, side = self._billboards(pos)
        order = np.argsort(-np.hypot(*(pos - origin[:2]).T))
        h, w = img.shape
        for p in order:
            if not vis[p]:
                continue
            cx, cy, bw, bh = boxes[p, :4]
            x0, x1 = max(int(math.floor(cx - bw / 2)), 0), min(int(math.ceil(cx + bw / 2)), w)
            y0, y1 = max(int(math.floor(cy - bh / 2)), 0), min(int(math.ceil(cy + bh / 2)), h)
            if x1 <= x0 or y1 <= y0:
                continue
            v, u = np.mgrid[y0:y1, x0:x1] + 0.5
            d = rays_fn(u, v)
            plane_n = np.array([nrm[p, 0], nrm[p, 1], 0.0])
            base = np.array([pos[p, 0], pos[p, 1], 0.0])
            denom = d @ plane_n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((base - origin) @ plane_n) / denom
            hit = origin + t[..., None] * d
            s = (hit[..., 0] - base[0]) * side[p, 0] + (hit[..., 1] - base[1]) * side[p, 1]
            z = hit[..., 2]
            a, b = cfg.player_width / 2, cfg.player_height / 2
            inside = (t > 0) & (((s / a) ** 2 + ((z - b) / b) ** 2) <= 1.0)
            shade = np.where(z > 0.5 * cfg.player_height, self.jersey[p], self.shorts[p])
            shade = np.where(z > 0.88 * cfg.player_height, 0.62, shade)
            shade = shade + 0.03 * np.sign(np.sin(12.0 * s))
            region = img[y0:y1, x0:x1]
            region[inside] = shade[inside]

    def student_frame(self, k: int) -> Frame:
        img = self.background.copy()
        sb, sv, _, _ = self.boxes_at(k) if self._gt is None else (
            self._gt.student_boxes[k], self._gt.student_visible[k], None, None)
        self._paint(img, self.positions[k], self.student_rays, self.c_s, sb, sv)
        rng = np.random.default_rng([self.cfg.seed, 3, k])
        noise = self._noise_bank[rng.integers(len(self._noise_bank))]
        shift = rng.integers(0, self.cfg.student_size, size=2)
        img += np.roll(noise, tuple(shift), axis=(0, 1))
        inside = self.background > 0
        img = np.where(inside | (img > 0.05), img, 0.0)
        return Frame(np.clip(img, 0.0, 1.0), k / self.fps, CameraId.STUDENT)

    def teacher_frame(self, k: int) -> Frame:
        img = self.teacher_background.copy()
        _, _, tb, tv = self.boxes_at(k)
        self._paint(img, self.positions[k], self.teacher_rays, self.c_t, tb, tv)
        rng = np.random.default_rng([self.cfg.seed, 4, k])
        img += rng.normal(0, self.cfg.noise_sigma, img.shape).astype(np.float32)
        return Frame(np.clip(img, 0.0, 1.0), k / self.fps, CameraId.TEACHER)


@dataclass
class Simulation:
    world: World
    ground_truth: GroundTruth
    homography: Homography
    fisheye: FisheyeModel

    def student_frames(self):
        for k in range(self.world.n_frames):
            yield self.world.student_frame(k)

    def teacher_frames(self):
        for k in range(self.world.n_frames):
            yield self.world.teacher_frame(k)


def simulate(cfg: WorldConfig, duration: float, fps: float = 12.0) -> Simulation:
    """Build the world; frames are rendered lazily from the returned streams."""
    world = World(cfg, duration, fps)
    return Simulation(world, world.ground_truth, world.homography, world.fisheye)


def teacher_oracle(gt: GroundTruth, t: float, noise: TeacherNoise | None = None, rng=None) -> list[Box]:
    """Teacher-view boxes at time ``t`` with centre/size jitter and random drops."""
    noise = noise or TeacherNoise(0.0, 0.0, 0.0)
    rng = np.random.default_rng(rng)
    boxes = gt.teacher(gt.index(t))
    n = len(boxes)
    keep = rng.random(n) >= noise.drop_prob
    offs = rng.normal(0.0, 1.0, size=(n, 2)) * noise.center_sigma
    scale = np.maximum(1.0 + rng.normal(0.0, 1.0, size=(n, 2)) * noise.size_sigma, 0.1)
    out = []
    for b, k, o, sc in zip(boxes, keep, offs, scale):
        if k:
            out.append(Box(b[0] + o[0], b[1] + o[1], b[2] * sc[0], b[3] * sc[1], 1.0))
    return out
