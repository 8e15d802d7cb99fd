"""Wire a RunConfig to the simulator, the online loop and the evaluator."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .augment import AugmentConfig
from .config import RunConfig
from .core import Box
from .distill import OnlineConfig, OnlineDataset, OnlineLoop, OnlineResult, Scene, SwapRecord, Trainer, TrainerConfig, \
    infer_frame, run_online
from .evaluation import AnnotatedFrame, EvalConfig, average_precision, counting_series, region_restricted_eval, \
    restrict_to_region, rolling_window_ap, tiou_sweep
from .geometry import Homography, build_region_partition
from .motion import MotionDetector, VibeParams
from .sim import GroundTruth, Simulation, TeacherNoise, simulate, teacher_oracle
from .student import Detector, blob_detect, make_detector
from .supervise import assemble_target

log = logging.getLogger(__name__)


def polygon_mask(polygon, shape: tuple[int, int]) -> np.ndarray:
    """Rasterize a pixel-coordinate polygon into a boolean ``(h, w)`` mask."""
    h, w = shape
    img = Image.new("1", (w, h), 0)
    ImageDraw.Draw(img).polygon([tuple(map(float, p)) for p in polygon], fill=1)
    return np.array(img, dtype=bool)


def scene_from_simulation(sim: Simulation, cfg: RunConfig) -> Scene:
    w = sim.world.cfg
    student_size = (w.student_size, w.student_size)
    teacher_size = tuple(w.teacher_size)
    h = sim.homography
    if cfg.geometry.homography:
        h = Homography.load(cfg.geometry.homography)
    partition = build_region_partition(h, teacher_size, student_size, sim.fisheye)
    field_area = (polygon_mask(cfg.augment.field_polygon, partition.shape) if cfg.augment.field_polygon
                  else sim.world.field_mask())
    return Scene(h, partition, sim.fisheye, partition.outside & field_area, student_size, teacher_size)


def augment_config(cfg: RunConfig, scene: Scene) -> AugmentConfig | None:
    a = cfg.augment
    if not a.enabled:
        return None
    return AugmentConfig(
        alpha=a.alpha, beta=a.beta, gamma=a.gamma, crops_per_frame=a.crops_per_frame,
        anchor_region=scene.anchor_region, margin=a.margin, inflate=a.inflate, max_retries=a.max_retries,
        blend_tol=a.blend_tol, blend_max_iter=a.blend_max_iter, blend_omega=a.blend_omega,
    )


def online_config(cfg: RunConfig) -> OnlineConfig:
    d, s = cfg.distill, cfg.student
    return OnlineConfig(
        fps=d.fps, teacher_period=d.teacher_period, memory_window=d.memory_window, min_entries=d.min_entries,
        clock=d.clock, replay_sample_cost=d.replay_sample_cost, postprocess=s.postprocess, nms_iou=s.nms_iou,
    )


def build_detector(cfg: RunConfig, frame_size: tuple[int, int]) -> Detector:
    s = cfg.student
    if s.kind == "blob":
        return make_detector("blob", frame_size, min_area=s.blob_min_area, max_area=s.blob_max_area)
    return make_detector("grid", frame_size, grid=s.grid, emission_threshold=s.emission_threshold,
                         local_box_rate=s.local_box_rate)


def build_loop(cfg: RunConfig, scene: Scene, probe=None, seed_offset: int = 0) -> OnlineLoop:
    detector = build_detector(cfg, scene.frame_size)
    trainer = None
    if cfg.distill.trainer_enabled and cfg.student.kind == "grid":
        tcfg = TrainerConfig(lr=cfg.student.lr, batch_size=cfg.student.batch_size, match_iou=cfg.loss.match_iou,
                             gate_mode=cfg.gate.mode, augment=augment_config(cfg, scene))
        trainer = Trainer(build_detector(cfg, scene.frame_size), scene, tcfg, seed=[cfg.seed, 11, seed_offset])
    return OnlineLoop(detector, trainer, scene, online_config(cfg), cfg.gate.mode, probe)


def motion_detector(cfg: RunConfig) -> MotionDetector:
    v = cfg.vibe
    return MotionDetector(VibeParams(v.n, v.radius, v.min_matches, v.phi), cfg.dilate.kernel, seed=[cfg.seed, 3])


class OracleTeacher:
    """Jittered simulator boxes in the teacher view, reproducible per frame."""

    def __init__(self, gt: GroundTruth, noise: TeacherNoise, seed: int = 0):
        self.gt = gt
        self.noise = noise
        self.seed = seed

    def __call__(self, t: float) -> list[Box]:
        i = self.gt.index(t)
        return teacher_oracle(self.gt, t, self.noise, np.random.default_rng([self.seed, 7, i]))


class BlobTeacher:
    """Motion blobs on the teacher stream; ViBe is advanced through every teacher frame."""

    def __init__(self, sim: Simulation, cfg: RunConfig, min_area: int = 30):
        self.sim = sim
        self.motion = motion_detector(cfg)
        self.min_area = min_area
        self._next = 0

    def __call__(self, t: float) -> list[Box]:
        k = self.sim.ground_truth.index(t)
        masks = None
        while self._next <= k:
            masks = self.motion(self.sim.world.teacher_frame(self._next))
            self._next += 1
        if masks is None:
            return []
        return [Box(*row) for row in blob_detect(masks, self.min_area)]


def make_teacher(sim: Simulation, cfg: RunConfig):
    t = cfg.teacher
    if t.kind == "blob":
        return BlobTeacher(sim, cfg)
    return OracleTeacher(sim.ground_truth, TeacherNoise(t.center_sigma, t.size_sigma, t.drop_prob), cfg.seed)


def annotation_probe(period: float, fps: float):
    def probe(t: float) -> bool:
        k = round(t * fps)
        step = max(1, round(period * fps))
        return k % step == 0
    return probe


@dataclass
class RunRecord:
    """Everything one online run produced, plus the geometry needed to score it."""

    name: str
    cfg: RunConfig
    result: OnlineResult
    scene: Scene
    gt: GroundTruth
    wall_seconds: float = 0.0
    detector: Detector | None = None

    def annotated(self, raw: bool = False, region: str | None = None) -> list[AnnotatedFrame]:
        out = []
        for o in self.result.outputs:
            if o.raw is None:
                continue
            preds = o.raw if raw else o.boxes
            out.append(AnnotatedFrame(o.t, preds, self.gt.student(self.gt.index(o.t))))
        return out

    def region_mask(self, region: str | None) -> np.ndarray | None:
        if region is None or region == "overall":
            return None
        if region == "overlap":
            return self.scene.partition.overlap
        if region == "outside":
            return self.scene.partition.outside
        raise ValueError(f"unknown region {region!r}")

    def ap(self, t_from: float = -math.inf, t_to: float = math.inf, region: str | None = None,
           raw: bool = False, tiou: float | None = None) -> float:
        tiou = self.cfg.eval.tiou if tiou is None else tiou
        frames = [(f.preds, f.gts) for f in self.annotated(raw) if t_from - 1e-9 <= f.t < t_to - 1e-9]
        mask = self.region_mask(region)
        return average_precision(frames, tiou) if mask is None else region_restricted_eval(frames, mask, tiou)

    def rolling(self, region: str | None = None, raw: bool = False, cfg: EvalConfig | None = None):
        cfg = cfg or eval_config(self.cfg)
        duration = len(self.result.outputs) / self.cfg.distill.fps
        return rolling_window_ap(self.annotated(raw), cfg, self.region_mask(region), duration)

    def sweep(self, t_from: float = -math.inf, region: str | None = None):
        mask = self.region_mask(region)
        frames = []
        for f in self.annotated():
            if f.t >= t_from - 1e-9:
                p, g = f.preds, f.gts
                if mask is not None:
                    p, g = restrict_to_region(p, mask), restrict_to_region(g, mask)
                frames.append((p, g))
        return tiou_sweep(frames)

    def counting(self, t_range=None):
        det = [(o.t, len(o.boxes)) for o in self.result.outputs]
        ann = annotation_probe(self.cfg.eval.annotation_period, self.cfg.distill.fps)
        gts = [(o.t, len(self.gt.student(self.gt.index(o.t)))) for o in self.result.outputs if ann(o.t)]
        return counting_series(det, eval_config(self.cfg), gts, t_range)

    def count_in(self, region: str, raw: bool = True, t_from: float = -math.inf) -> tuple[int, int]:
        """Total predictions and gt boxes whose centres lie in ``region`` over annotated frames."""
        mask = self.region_mask(region)
        n_pred = n_gt = 0
        for f in self.annotated(raw):
            if f.t >= t_from - 1e-9:
                n_pred += len(restrict_to_region(f.preds, mask))
                n_gt += len(restrict_to_region(f.gts, mask))
        return n_pred, n_gt


def ablation_configs(base: RunConfig) -> dict[str, RunConfig]:
    """The six augmentation x gating cells, named ``aug-<on|off>/gate-<mode>``."""
    out = {}
    for aug in (True, False):
        for mode in ("motion", "all", "none"):
            name = f"aug-{'on' if aug else 'off'}/gate-{mode}"
            out[name] = base.with_overrides(augment__enabled=aug, gate__mode=mode)
    return out


def eval_config(cfg: RunConfig) -> EvalConfig:
    e = cfg.eval
    return EvalConfig(e.tiou, e.window, e.annotation_period, e.count_window)


def run_simulated(cfgs: dict[str, RunConfig], sim: Simulation | None = None, progress=None) -> dict[str, RunRecord]:
    """Run several configurations in lock-step over one simulated stream.

    The cells share the rendered frames, the motion masks and the teacher
    output, so they differ only in how the student is supervised. World,
    vibe, dilation, teacher and distill timing settings are taken from the
    first configuration.
    """
    names = list(cfgs)
    base = cfgs[names[0]]
    if sim is None:
        sim = simulate(base.sim, base.sim.duration, base.distill.fps)
    scene = scene_from_simulation(sim, base)
    probe = annotation_probe(base.eval.annotation_period, base.distill.fps)
    loops = {n: build_loop(c, scene, probe, seed_offset=i) for i, (n, c) in enumerate(cfgs.items())}
    motion = motion_detector(base)
    teacher = make_teacher(sim, base)
    t_start = time.perf_counter()
    n = sim.world.n_frames
    for k in range(n):
        frame = sim.world.student_frame(k)
        masks = motion(frame)
        t = frame.timestamp
        boxes = teacher(t) if any(lp.wants_teacher(t) for lp in loops.values()) else None
        for lp in loops.values():
            lp.step(frame, masks, boxes)
        if progress is not None and (k + 1) % max(1, n // 20) == 0:
            progress(k + 1, n, time.perf_counter() - t_start)
    wall = time.perf_counter() - t_start
    return {name: RunRecord(name, cfgs[name], lp.result, scene, sim.ground_truth, wall, lp.detector) for name, lp in loops.items()}


def scene_from_recording(rec, cfg: RunConfig) -> Scene:
    partition = rec.partition()
    polygon = cfg.augment.field_polygon or rec.field_polygon
    field_area = polygon_mask(polygon, partition.shape) if polygon else np.ones(partition.shape, dtype=bool)
    return Scene(rec.homography, partition, rec.fisheye, partition.outside & field_area,
                 tuple(rec.student_size), tuple(rec.teacher_size))


def run_recording(cfg: RunConfig, rec, mode: str = "online", dump_dir=None) -> tuple[OnlineResult, Detector]:
    """Run the student over a recording; returns the result and the final inference detector.

    ``online`` interleaves inference and training as the frames arrive;
    ``offline`` first gathers every supervised frame, trains for
    ``distill.offline_epochs`` epochs and then runs inference with the
    final weights.
    """
    scene = scene_from_recording(rec, cfg)
    teacher_boxes = rec.teacher_boxes()
    probe = annotation_probe(cfg.eval.annotation_period, rec.fps)
    on_target = None
    if dump_dir is not None:
        dump = Path(dump_dir)
        dump.mkdir(parents=True, exist_ok=True)
        on_target = lambda t, target: target.dump(dump, f"t{t:010.3f}")  # noqa: E731
    if mode == "online":
        loop_cfg = online_config(cfg)
        loop = build_loop(cfg, scene, probe)
        loop.on_target = on_target
        if loop_cfg.clock == "wall" and loop.trainer is not None:
            result = run_online(rec.student_frames(), lambda t: teacher_boxes.get(rec.frame_index(t)),
                                loop.detector, loop.trainer, scene, motion_detector(cfg), loop_cfg,
                                cfg.gate.mode, probe, on_target)
            return result, loop.detector
        motion = motion_detector(cfg)
        for frame in rec.student_frames():
            masks = motion(frame)
            loop.step(frame, masks, teacher_boxes.get(rec.frame_index(frame.timestamp)))
        return loop.result, loop.detector
    if mode != "offline":
        raise ValueError(f"unknown run mode {mode!r}")
    return _run_offline(cfg, rec, scene, teacher_boxes, probe, on_target)


def _run_offline(cfg, rec, scene, teacher_boxes, probe, on_target):
    loop = build_loop(cfg, scene, probe)
    ds = OnlineDataset(math.inf)
    motion = motion_detector(cfg)
    for frame in rec.student_frames():
        masks = motion(frame)
        boxes = teacher_boxes.get(rec.frame_index(frame.timestamp))
        if boxes is not None:
            target = assemble_target(boxes, scene.homography, [], masks, scene.partition, scene.distortion,
                                     cfg.gate.mode)
            if on_target is not None:
                on_target(frame.timestamp, target)
            ds.push(frame.timestamp, frame, target, masks)
    result = OnlineResult()
    if loop.trainer is not None and len(ds):
        snap = ds.snapshot()
        for epoch in range(cfg.distill.offline_epochs):
            result.swaps.append(SwapRecord(snap[-1].timestamp, epoch, loop.trainer.run_epoch(snap)))
        loop.detector.load_weights(loop.trainer.detector.snapshot_weights())
    motion = motion_detector(cfg)
    ocfg = online_config(cfg)
    for frame in rec.student_frames():
        t0 = time.perf_counter()
        masks = motion(frame)
        result.outputs.append(infer_frame(loop.detector, frame, masks, ocfg, frame.timestamp, probe))
        result.latencies.append(time.perf_counter() - t0)
    return result, loop.detector
