"""8-bit image files (PGM/PPM/PNG) for frames and masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .core import CameraId, Frame


def to_uint8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(data) * 255.0), 0, 255).astype(np.uint8)


def save_frame(frame: Frame, path) -> None:
    path = Path(path)
    img = Image.fromarray(to_uint8(frame.data), mode="L" if frame.channels == 1 else "RGB")
    img.save(path)


def load_frame(path, timestamp: float = 0.0, camera_id: CameraId = CameraId.STUDENT) -> Frame:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if len(img.getbands()) >= 3 else "L")
    data = np.asarray(img, dtype=np.float32) / 255.0
    return Frame(data, timestamp, camera_id)


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(Path(path))


def load_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) >= 128
