"""On-disk recordings: student frames, teacher boxes, ground truth and geometry.

Layout of a recording directory::

    scene.json        sizes, fps, fisheye model, field outline, world settings
    homography.json   teacher -> undistorted student plane, 9 floats
    teacher.jsonl     {t, boxes} per supervised frame, teacher pixels
    gt.jsonl          {t, boxes} per student frame, student pixels
    student/NNNNNN.png  (optional; re-rendered from the world settings if absent)
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import Box, Frame
from .distill import box_records, read_box_stream
from .geometry import FisheyeModel, Homography, build_region_partition
from .imageio import load_frame, save_frame
from .sim import TeacherNoise, World, WorldConfig, simulate, teacher_oracle


class StreamError(RuntimeError):
    """Streams that should share timestamps do not."""


@dataclass
class Recording:
    root: Path
    fps: float
    n_frames: int
    student_size: tuple[int, int]
    teacher_size: tuple[int, int]
    fisheye: FisheyeModel | None
    field_polygon: list | None
    world: dict | None
    homography: Homography

    def frame_index(self, t: float) -> int:
        k = t * self.fps
        i = int(round(k))
        if abs(k - i) > 1e-6 or not 0 <= i < self.n_frames:
            raise StreamError(f"t={t} does not fall on a student frame")
        return i

    def _world(self) -> World:
        if self.world is None:
            raise StreamError(f"{self.root}: no student frames and no world settings to render them")
        cfg = WorldConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.world.items()})
        return World(cfg, self.n_frames / self.fps, self.fps)

    def student_frames(self) -> Iterator[Frame]:
        folder = self.root / "student"
        if folder.is_dir():
            for k in range(self.n_frames):
                path = folder / f"{k:06d}.png"
                if not path.exists():
                    raise StreamError(f"missing student frame {path}")
                yield load_frame(path, k / self.fps)
        else:
            world = self._world()
            for k in range(self.n_frames):
                yield world.student_frame(k)

    def teacher_boxes(self) -> dict[int, list[Box]]:
        out = {}
        for t, arr in read_box_stream(self.root / "teacher.jsonl"):
            out[self.frame_index(t)] = [Box(*row) for row in arr]
        return out

    def ground_truth(self) -> list[tuple[float, np.ndarray]]:
        return read_box_stream(self.root / "gt.jsonl")

    def partition(self):
        return build_region_partition(self.homography, self.teacher_size, self.student_size, self.fisheye)


def write_recording(cfg_sim, out, fps: float, teacher_noise: TeacherNoise, teacher_period: float = 1.0,
                    seed: int = 0, frames: bool = True) -> Recording:
    """Simulate ``cfg_sim.duration`` seconds and store everything a run needs."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    world_cfg = WorldConfig(**{f.name: getattr(cfg_sim, f.name) for f in dataclasses.fields(WorldConfig)})
    sim = simulate(world_cfg, cfg_sim.duration, fps)
    gt = sim.ground_truth
    w = sim.world
    n = w.n_frames
    scene = {
        "fps": fps,
        "n_frames": n,
        "student_size": [w.cfg.student_size, w.cfg.student_size],
        "teacher_size": list(w.cfg.teacher_size),
        "fisheye": {"focal": sim.fisheye.focal, "center": list(sim.fisheye.center),
                    "max_theta": sim.fisheye.max_theta},
        "field_polygon": [list(p) for p in w.field_polygon()],
        "world": json.loads(json.dumps(dataclasses.asdict(world_cfg))),
    }
    (out / "scene.json").write_text(json.dumps(scene, indent=2))
    sim.homography.save(out / "homography.json")
    step = max(1, int(round(teacher_period * fps)))
    with open(out / "gt.jsonl", "w") as fh:
        for k in range(n):
            fh.write(json.dumps({"t": round(k / fps, 6), "boxes": box_records(gt.student(k), False)}) + "\n")
    with open(out / "teacher.jsonl", "w") as fh:
        for k in range(0, n, step):
            boxes = teacher_oracle(gt, k / fps, teacher_noise, np.random.default_rng([seed, 7, k]))
            rows = np.array([b.as_tuple() for b in boxes]).reshape(-1, 5)
            fh.write(json.dumps({"t": round(k / fps, 6), "boxes": box_records(rows)}) + "\n")
    if frames:
        (out / "student").mkdir(exist_ok=True)
        for k in range(n):
            save_frame(w.student_frame(k), out / "student" / f"{k:06d}.png")
    return read_recording(out)


def read_recording(root, homography: Homography | None = None) -> Recording:
    root = Path(root)
    scene_path = root / "scene.json"
    if not scene_path.exists():
        raise FileNotFoundError(f"not a recording directory (no scene.json): {root}")
    scene = json.loads(scene_path.read_text())
    fe = scene.get("fisheye")
    fisheye = None if fe is None else FisheyeModel(fe["focal"], tuple(fe["center"]), fe.get("max_theta", math.pi / 2))
    if homography is None:
        homography = Homography.load(root / "homography.json")
    return Recording(
        root, float(scene["fps"]), int(scene["n_frames"]), tuple(scene["student_size"]),
        tuple(scene["teacher_size"]), fisheye, scene.get("field_polygon"), scene.get("world"), homography,
    )
