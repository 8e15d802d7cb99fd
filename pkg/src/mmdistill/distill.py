"""Online distillation: rolling dataset, epoch trainer and weight hand-over.

Two clock modes are supported. ``replay`` runs everything on one thread with
a virtual clock: an epoch that starts at frame ``i`` publishes its weights at
a later frame fixed by the snapshot size, so runs are reproducible. ``wall``
runs the trainer in a background thread and swaps weights whenever a new
blob is waiting in the mailbox.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .augment import AugmentConfig, augment_frame
from .core import Box, CameraId, Frame, MotionMasks, RegionPartition
from .geometry import FisheyeModel, Homography
from .imageio import to_uint8
from .motion import MotionDetector
from .student import Detector
from .supervise import GateMode, LossBreakdown, SupervisionTarget, assemble_target, gate_masks, nms, postprocess_inference

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scene:
    """Fixed geometry of the camera pair."""

    homography: Homography
    partition: RegionPartition
    distortion: FisheyeModel | None
    anchor_region: np.ndarray
    frame_size: tuple[int, int]
    teacher_size: tuple[int, int]


@dataclass(frozen=True)
class DatasetEntry:
    timestamp: float
    frame_u8: np.ndarray
    raw_bits: np.ndarray
    dilated_bits: np.ndarray
    gt_boxes: tuple[Box, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frame_u8.shape[:2]

    def frame(self) -> Frame:
        return Frame(self.frame_u8.astype(np.float32) / 255.0, self.timestamp, CameraId.STUDENT)

    def masks(self) -> MotionMasks:
        h, w = self.shape
        raw = np.unpackbits(self.raw_bits, count=h * w).reshape(h, w).astype(bool)
        dil = np.unpackbits(self.dilated_bits, count=h * w).reshape(h, w).astype(bool)
        return MotionMasks(raw, dil)


class OnlineDataset:
    """Time-ordered supervised frames covering at most ``memory_window`` seconds."""

    def __init__(self, memory_window: float = 300.0):
        self.memory_window = memory_window
        self.entries: deque[DatasetEntry] = deque()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, timestamp: float, frame: Frame, target: SupervisionTarget, masks: MotionMasks) -> "OnlineDataset":
        with self._lock:
            if self.entries and timestamp < self.entries[-1].timestamp:
                raise ValueError(f"timestamp {timestamp} precedes newest entry {self.entries[-1].timestamp}")
            self.entries.append(DatasetEntry(
                timestamp, to_uint8(frame.luma()), np.packbits(masks.raw.ravel()),
                np.packbits(masks.dilated.ravel()), tuple(target.gt_boxes),
            ))
            while self.entries and self.entries[0].timestamp < timestamp - self.memory_window:
                self.entries.popleft()
        return self

    def snapshot(self) -> tuple[DatasetEntry, ...]:
        with self._lock:
            return tuple(self.entries)


def dataset_push(ds: OnlineDataset, timestamp: float, frame: Frame, target: SupervisionTarget,
                 masks: MotionMasks | None = None) -> OnlineDataset:
    if masks is None:
        empty = np.zeros((frame.height, frame.width), dtype=bool)
        masks = MotionMasks(empty, empty)
    return ds.push(timestamp, frame, target, masks)


@dataclass
class TrainerConfig:
    lr: float = 0.02
    batch_size: int = 4
    match_iou: float = 0.5
    gate_mode: str = "motion"
    augment: AugmentConfig | None = None


class Trainer:
    """Owns the training copy of the student and runs one epoch per call."""

    def __init__(self, detector: Detector, scene: Scene, cfg: TrainerConfig, seed=None):
        self.detector = detector
        self.scene = scene
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.epochs = 0

    def sample(self, entry: DatasetEntry):
        frame = entry.frame()
        masks = entry.masks()
        ignore, penalize = gate_masks(self.scene.partition, masks.dilated, self.cfg.gate_mode)
        boxes = list(entry.gt_boxes)
        motion = masks.raw
        if self.cfg.augment is not None and self.cfg.augment.crops_per_frame > 0:
            res = augment_frame(frame, boxes, self.scene.partition, self.cfg.augment, self.rng, motion)
            frame, motion = res.frame, res.motion
            boxes = boxes + res.boxes
        return frame, motion, SupervisionTarget(boxes, ignore, penalize, self.scene.partition.overlap)

    def run_epoch(self, snapshot) -> LossBreakdown:
        order = self.rng.permutation(len(snapshot))
        total, steps = LossBreakdown(), 0
        bs = max(1, self.cfg.batch_size)
        for start in range(0, len(order), bs):
            batch = [self.sample(snapshot[i]) for i in order[start:start + bs]]
            total = total + self.detector.train_step(batch, self.cfg.lr, match_iou=self.cfg.match_iou)
            steps += 1
        self.epochs += 1
        return total.scaled(1 / max(steps, 1))


@dataclass
class SwapRecord:
    swap_time: float
    epoch_index: int
    loss: LossBreakdown


@dataclass
class FrameOutput:
    t: float
    boxes: np.ndarray
    raw: np.ndarray | None = None  # before motion post-processing, kept on probe frames
    weights_version: int = 0


@dataclass
class OnlineResult:
    outputs: list[FrameOutput] = field(default_factory=list)
    swaps: list[SwapRecord] = field(default_factory=list)
    latencies: list[float] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)


@dataclass
class OnlineConfig:
    fps: float = 12.0
    teacher_period: float = 1.0
    memory_window: float = 300.0
    min_entries: int = 5
    clock: str = "replay"
    replay_sample_cost: float = 0.2
    postprocess: bool = True
    nms_iou: float = 0.5
    pace: bool = False  # wall clock only: hold each frame until its capture time


def _teacher_due(t: float, last: float | None, period: float) -> bool:
    return last is None or t - last >= period - 1e-9


class OnlineLoop:
    """Single-threaded online loop driven frame by frame on the replay clock.

    Motion masks and teacher boxes are supplied by the caller so several
    loops can share one video stream.
    """

    def __init__(self, detector: Detector, trainer: Trainer | None, scene: Scene, cfg: OnlineConfig,
                 gate_mode: str | GateMode = GateMode.MOTION, probe: Callable[[float], bool] | None = None,
                 on_target: Callable[[float, SupervisionTarget], None] | None = None):
        self.on_target = on_target
        self.detector = detector
        self.trainer = trainer
        self.scene = scene
        self.cfg = cfg
        self.gate_mode = GateMode(gate_mode)
        self.probe = probe
        self.dataset = OnlineDataset(cfg.memory_window)
        self.result = OnlineResult()
        self._pending = None  # (ready_index, blob, epoch, loss)
        self._last_teacher = None
        self._index = 0
        self._version = 0

    def wants_teacher(self, t: float) -> bool:
        return _teacher_due(t, self._last_teacher, self.cfg.teacher_period)

    def step(self, frame: Frame, masks: MotionMasks, teacher_boxes: list[Box] | None = None) -> FrameOutput:
        i, t = self._index, frame.timestamp
        self._index += 1
        t0 = time.perf_counter()
        if self._pending is not None and self._pending[0] <= i:
            _, blob, epoch, loss = self._pending
            self.detector.load_weights(blob)
            self._version += 1
            self.result.swaps.append(SwapRecord(t, epoch, loss))
            self._pending = None
        out = infer_frame(self.detector, frame, masks, self.cfg, t, self.probe)
        out.weights_version = self._version
        self.result.outputs.append(out)
        self.result.latencies.append(time.perf_counter() - t0)

        if teacher_boxes is not None and self.wants_teacher(t):
            self._last_teacher = t
            target = assemble_target(teacher_boxes, self.scene.homography, [], masks, self.scene.partition,
                                     self.scene.distortion, self.gate_mode)
            if self.on_target is not None:
                self.on_target(t, target)
            self.dataset.push(t, frame, target, masks)
        if self.trainer is not None and self._pending is None and len(self.dataset) >= self.cfg.min_entries:
            snap = self.dataset.snapshot()
            try:
                loss = self.trainer.run_epoch(snap)
            except Exception as exc:  # inference keeps the last good weights
                log.exception("training epoch failed")
                self.result.errors.append(repr(exc))
                return out
            delay = max(1, math.ceil(len(snap) * self.cfg.replay_sample_cost * self.cfg.fps))
            self._pending = (i + delay, self.trainer.detector.snapshot_weights(), self.trainer.epochs - 1, loss)
        return out


def run_online(
    frames: Iterable[Frame],
    teacher: Callable[[float], list[Box] | None],
    detector: Detector,
    trainer: Trainer | None,
    scene: Scene,
    motion: MotionDetector,
    cfg: OnlineConfig,
    gate_mode: str | GateMode = GateMode.MOTION,
    probe: Callable[[float], bool] | None = None,
    on_target: Callable[[float, SupervisionTarget], None] | None = None,
) -> OnlineResult:
    """Detect on every frame while a training copy learns from teacher-labelled frames.

    ``teacher(t)`` returns teacher-view boxes for the frame at ``t`` (or None
    when no teacher frame exists). ``probe(t)`` marks frames whose
    predictions are also kept before motion post-processing.
    """
    if cfg.clock == "wall" and trainer is not None:
        return _run_wall(frames, teacher, detector, trainer, scene, motion, cfg, gate_mode, probe, on_target)
    loop = OnlineLoop(detector, trainer, scene, cfg, gate_mode, probe, on_target)
    for frame in frames:
        masks = motion(frame)
        boxes = teacher(frame.timestamp) if loop.wants_teacher(frame.timestamp) else None
        loop.step(frame, masks, boxes)
    return loop.result


def infer_frame(detector, frame, masks, cfg, t, probe) -> FrameOutput:
    preds = detector.predict_array(frame, masks)
    suppress = (lambda p: nms(p, cfg.nms_iou)) if cfg.nms_iou < 1.0 else (lambda p: p)
    raw = suppress(preds) if (probe is not None and probe(t)) or not cfg.postprocess else None
    # filter before suppression so boxes off the motion mask cannot suppress ones on it
    final = suppress(postprocess_inference(preds, masks)) if cfg.postprocess else raw
    return FrameOutput(t, final, raw if (probe is not None and probe(t)) else None)


def _run_wall(frames, teacher, detector, trainer, scene, motion, cfg, gate_mode, probe, on_target) -> OnlineResult:
    result = OnlineResult()
    ds = OnlineDataset(cfg.memory_window)
    stop = threading.Event()
    lock = threading.Lock()
    mailbox: dict = {"blob": None, "epoch": -1, "loss": None}

    def train_loop():
        while not stop.is_set():
            snap = ds.snapshot()
            if len(snap) < cfg.min_entries:
                stop.wait(0.01)
                continue
            try:
                loss = trainer.run_epoch(snap)
                blob = trainer.detector.snapshot_weights()
            except Exception as exc:
                log.exception("training epoch failed")
                result.errors.append(repr(exc))
                stop.wait(0.1)
                continue
            with lock:
                mailbox.update(blob=blob, epoch=trainer.epochs - 1, loss=loss)

    worker = threading.Thread(target=train_loop, name="trainer", daemon=True)
    worker.start()
    last_teacher = None
    seen_epoch = -1
    version = 0
    start_wall = time.perf_counter()
    start_t = None
    try:
        for frame in frames:
            t = frame.timestamp
            if start_t is None:
                start_t = t
            if cfg.pace:
                delay = (t - start_t) - (time.perf_counter() - start_wall)
                if delay > 0:
                    time.sleep(delay)
            t0 = time.perf_counter()
            with lock:
                fresh = mailbox["epoch"] > seen_epoch
                blob, epoch, loss = mailbox["blob"], mailbox["epoch"], mailbox["loss"]
            if fresh:
                detector.load_weights(blob)
                seen_epoch = epoch
                version += 1
                result.swaps.append(SwapRecord(t, epoch, loss))
            masks = motion(frame)
            out = infer_frame(detector, frame, masks, cfg, t, probe)
            out.weights_version = version
            result.outputs.append(out)
            result.latencies.append(time.perf_counter() - t0)
            if _teacher_due(t, last_teacher, cfg.teacher_period):
                boxes = teacher(t)
                if boxes is not None:
                    last_teacher = t
                    target = assemble_target(boxes, scene.homography, [], masks, scene.partition,
                                             scene.distortion, gate_mode)
                    if on_target is not None:
                        on_target(t, target)
                    ds.push(t, frame, target, masks)
    finally:
        stop.set()
        worker.join()
    return result


def write_training_log(swaps: list[SwapRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["swap_time", "epoch_index", "coord_loss", "obj_loss", "noobj_loss", "total"])
        for s in swaps:
            w.writerow([f"{s.swap_time:.6f}", s.epoch_index, f"{s.loss.coord_loss:.8g}", f"{s.loss.obj_loss:.8g}",
                        f"{s.loss.noobj_loss:.8g}", f"{s.loss.total:.8g}"])


def box_records(boxes: np.ndarray, with_score: bool = True) -> list[dict]:
    keys = ("cx", "cy", "w", "h", "score") if with_score else ("cx", "cy", "w", "h")
    return [{k: round(float(v), 4) for k, v in zip(keys, row)} for row in np.asarray(boxes).reshape(-1, 5)]


def write_detections(outputs: list[FrameOutput], path) -> None:
    with open(path, "w") as fh:
        for o in outputs:
            fh.write(json.dumps({"t": round(o.t, 6), "boxes": box_records(o.boxes)}) + "\n")


def read_box_stream(path, default_score: float = 1.0) -> list[tuple[float, np.ndarray]]:
    """Read ``{t, boxes:[{cx,cy,w,h[,score]}]}`` JSON Lines records."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                rows = [[b["cx"], b["cy"], b["w"], b["h"], b.get("score", default_score)] for b in rec["boxes"]]
                out.append((float(rec["t"]), np.array(rows, dtype=np.float64).reshape(-1, 5)))
            except (KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
    return out
