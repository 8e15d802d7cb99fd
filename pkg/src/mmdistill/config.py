"""Run configuration: one JSON document drives a whole experiment."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .sim import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass
class GeometrySection:
    correspondences: str | None = None  # `tx ty sx sy` rows
    homography: str | None = None  # 9-float JSON array


@dataclass
class VibeSection:
    n: int = 20
    radius: int = 20
    min_matches: int = 2
    phi: int = 16


@dataclass
class DilateSection:
    kernel: int = 11


@dataclass
class AugmentSection:
    enabled: bool = True
    alpha: float = 0.5
    beta: float = -0.004
    gamma: float = 0.5
    crops_per_frame: int = 4
    margin: int = 2
    inflate: float = 1.5
    max_retries: int = 10
    field_polygon: list | None = None  # student pixel vertices; None = simulator field
    blend_tol: float = 1e-4
    blend_max_iter: int = 2000
    blend_omega: float = 1.0


@dataclass
class GateSection:
    mode: str = "motion"

    def __post_init__(self):
        if self.mode not in ("motion", "none", "all"):
            raise ConfigError(f"gate.mode must be motion, none or all, got {self.mode!r}")


@dataclass
class LossSection:
    match_iou: float = 0.5


@dataclass
class StudentSection:
    kind: str = "grid"
    grid: int = 40
    emission_threshold: float = 0.1
    local_box_rate: float = 0.1
    lr: float = 0.02
    batch_size: int = 4
    nms_iou: float = 0.5
    postprocess: bool = True
    blob_min_area: int = 4
    blob_max_area: int = 2000

    def __post_init__(self):
        if self.kind not in ("grid", "blob"):
            raise ConfigError(f"student.kind must be grid or blob, got {self.kind!r}")


@dataclass
class TeacherSection:
    kind: str = "oracle"  # oracle: jittered simulator boxes; blob: motion blobs on teacher frames
    center_sigma: float = 1.0
    size_sigma: float = 0.05
    drop_prob: float = 0.02


@dataclass
class DistillSection:
    memory_window: float = 300.0
    teacher_period: float = 1.0
    fps: float = 12.0
    clock: str = "replay"
    trainer_enabled: bool = True
    min_entries: int = 5
    replay_sample_cost: float = 0.2  # virtual seconds of training per sample
    offline_epochs: int = 20

    def __post_init__(self):
        if self.clock not in ("replay", "wall"):
            raise ConfigError(f"distill.clock must be replay or wall, got {self.clock!r}")
        if self.teacher_period < 1.0 / self.fps:
            raise ConfigError("distill.teacher_period must be at least one frame")


@dataclass
class EvalSection:
    tiou: float = 0.25
    window: float = 180.0
    annotation_period: float = 10.0
    count_window: float = 60.0


@dataclass
class SimSection(WorldConfig):
    duration: float = 120.0


@dataclass
class RunConfig:
    seed: int = 0
    geometry: GeometrySection = field(default_factory=GeometrySection)
    vibe: VibeSection = field(default_factory=VibeSection)
    dilate: DilateSection = field(default_factory=DilateSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    gate: GateSection = field(default_factory=GateSection)
    loss: LossSection = field(default_factory=LossSection)
    student: StudentSection = field(default_factory=StudentSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sim: SimSection = field(default_factory=SimSection)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_json(path.read_text())

    def with_overrides(self, **dotted) -> "RunConfig":
        """Copy with ``section__key=value`` overrides, e.g. ``gate__mode="all"``."""
        data = self.to_dict()
        for key, value in dotted.items():
            parts = key.split("__")
            node = data
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = value
        return RunConfig.from_dict(data)


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = _build(tp, value, f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(value, tp, f"{prefix}{key}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        origin = typing.get_origin(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if tp in (int, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        if tp is int and float(value) != int(value):
            raise ConfigError(f"{key} must be an integer")
        return tp(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if origin in (tuple, list) or tp is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list")
        return tuple(value) if origin is tuple else list(value)
    return value
