"""ViBe background subtraction and the square dilation used for loss gating."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .core import Frame, MotionMasks
from .imageio import to_uint8


@dataclass(frozen=True)
class VibeParams:
    n: int = 20
    radius: int = 20  # 8-bit intensity units
    min_matches: int = 2
    phi: int = 16

    def __post_init__(self):
        if not (self.n >= self.min_matches >= 1):
            raise ValueError("need n >= min_matches >= 1")
        if self.phi < 1:
            raise ValueError("phi must be >= 1")


@dataclass
class VibeModel:
    params: VibeParams
    bank: np.ndarray  # (H, W, N) uint8

    @property
    def shape(self) -> tuple[int, int]:
        return self.bank.shape[:2]


_NEIGHBORS = np.array(
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)], dtype=np.int64
)


def _gray_u8(frame: Frame) -> np.ndarray:
    return to_uint8(frame.luma())


def vibe_init(first_frame: Frame, params: VibeParams | None = None, rng=None) -> VibeModel:
    params = params or VibeParams()
    rng = np.random.default_rng(rng)
    img = _gray_u8(first_frame)
    h, w = img.shape
    if h < 3 or w < 3:
        raise ValueError(f"frame must be at least 3x3, got {w}x{h}")
    pick = rng.integers(0, 8, size=(h, w, params.n))
    off = _NEIGHBORS[pick]
    rows = np.clip(np.arange(h)[:, None, None] + off[..., 0], 0, h - 1)
    cols = np.clip(np.arange(w)[None, :, None] + off[..., 1], 0, w - 1)
    return VibeModel(params, np.ascontiguousarray(img[rows, cols]))


@numba.njit(cache=True)
def _vibe_kernel(img, bank, nbrs, radius, min_matches, phi, seed, out):
    h, w, n = bank.shape
    r = np.int16(radius)
    state = np.uint64(seed) | np.uint64(1)
    for i in range(h):
        for j in range(w):
            v = np.int16(img[i, j])
            # branch-free count over all samples vectorizes; early exit does not
            count = 0
            for k in range(n):
                d = v - np.int16(bank[i, j, k])
                count += (d < r) & (d > -r)
            if count < min_matches:
                out[i, j] = True
                continue
            out[i, j] = False
            # xorshift64
            state ^= state << np.uint64(13)
            state ^= state >> np.uint64(7)
            state ^= state << np.uint64(17)
            if state % np.uint64(phi) == 0:
                state ^= state << np.uint64(13)
                state ^= state >> np.uint64(7)
                state ^= state << np.uint64(17)
                bank[i, j, state % np.uint64(n)] = img[i, j]
            state ^= state << np.uint64(13)
            state ^= state >> np.uint64(7)
            state ^= state << np.uint64(17)
            if state % np.uint64(phi) == 0:
                state ^= state << np.uint64(13)
                state ^= state >> np.uint64(7)
                state ^= state << np.uint64(17)
                nb = np.int64(state % np.uint64(8))
                ni = i + nbrs[nb, 0]
                nj = j + nbrs[nb, 1]
                if 0 <= ni < h and 0 <= nj < w:
                    state ^= state << np.uint64(13)
                    state ^= state >> np.uint64(7)
                    state ^= state << np.uint64(17)
                    bank[ni, nj, state % np.uint64(n)] = img[i, j]


def vibe_segment_update(model: VibeModel, frame: Frame, rng) -> np.ndarray:
    """Classify each pixel and refresh the sample bank in place; returns the raw motion mask."""
    img = _gray_u8(frame)
    if img.shape != model.shape:
        raise ValueError(f"frame {img.shape} does not match model {model.shape}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    seed = int(rng.integers(1, 2**63 - 1))
    out = np.empty(img.shape, dtype=np.bool_)
    p = model.params
    _vibe_kernel(img, model.bank, _NEIGHBORS, p.radius, p.min_matches, p.phi, seed, out)
    return out


def dilate(raw: np.ndarray, kernel: int = 11) -> np.ndarray:
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"dilation kernel must be odd and positive, got {kernel}")
    if kernel == 1:
        return raw.copy()
    raw = np.ascontiguousarray(raw, dtype=bool)
    tmp = np.empty_like(raw)
    out = np.empty_like(raw)
    _dilate_rows(raw, kernel // 2, tmp)
    _dilate_cols(tmp, kernel // 2, out)
    return out


@numba.njit(cache=True)
def _dilate_rows(src, r, dst):
    # running count of set pixels in a (2r+1)-wide window; outside the image counts as unset
    h, w = src.shape
    for y in range(h):
        count = 0
        for x in range(min(r, w)):
            count += src[y, x]
        for x in range(w):
            if x + r < w:
                count += src[y, x + r]
            if x - r - 1 >= 0:
                count -= src[y, x - r - 1]
            dst[y, x] = count > 0


@numba.njit(cache=True)
def _dilate_cols(src, r, dst):
    h, w = src.shape
    count = np.zeros(w, dtype=np.int32)
    for y in range(min(r, h)):
        for x in range(w):
            count[x] += src[y, x]
    for y in range(h):
        for x in range(w):
            if y + r < h:
                count[x] += src[y + r, x]
            if y - r - 1 >= 0:
                count[x] -= src[y - r - 1, x]
            dst[y, x] = count[x] > 0


class MotionDetector:
    """Owns a ViBe model and its RNG stream; call once per frame, in order."""

    def __init__(self, params: VibeParams | None = None, kernel: int = 11, seed=None):
        self.params = params or VibeParams()
        self.kernel = kernel
        self.rng = np.random.default_rng(seed)
        self.model: VibeModel | None = None

    def __call__(self, frame: Frame) -> MotionMasks:
        if self.model is None:
            self.model = vibe_init(frame, self.params, self.rng)
        raw = vibe_segment_update(self.model, frame, self.rng)
        return MotionMasks(raw, dilate(raw, self.kernel))
