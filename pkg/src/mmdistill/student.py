"""Detector interface, a motion-blob baseline and a trainable grid detector."""
from __future__ import annotations

import abc
import struct
import threading
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage

from .core import Box, Frame, MotionMasks, array_to_boxes
from .supervise import IGNORED, LossBreakdown, classify_predictions, loss_and_grad


class Detector(abc.ABC):
    """What the online loop needs from a student detector."""

    @abc.abstractmethod
    def predict_array(self, frame: Frame, masks: MotionMasks) -> np.ndarray:
        """``(n, 5)`` array of ``cx, cy, w, h, score``; must not mutate the detector."""

    def predict(self, frame: Frame, masks: MotionMasks) -> list[Box]:
        return array_to_boxes(self.predict_array(frame, masks))

    @abc.abstractmethod
    def snapshot_weights(self) -> bytes: ...

    @abc.abstractmethod
    def load_weights(self, blob: bytes) -> None: ...

    @abc.abstractmethod
    def train_step(self, batch, lr: float, match_iou: float = 0.5) -> LossBreakdown: ...


class BlobDetector(Detector):
    """Boxes around 8-connected components of the raw motion mask."""

    def __init__(self, min_area: int = 4, max_area: int = 10_000):
        self.min_area = min_area
        self.max_area = max_area

    def predict_array(self, frame, masks):
        return blob_detect(masks, self.min_area, self.max_area)

    def snapshot_weights(self) -> bytes:
        return b""

    def load_weights(self, blob: bytes) -> None:
        pass

    def train_step(self, batch, lr, match_iou=0.5):
        return LossBreakdown()


def blob_detect(masks: MotionMasks, min_area: int = 1, max_area: int = 10**9) -> np.ndarray:
    labels, n = ndimage.label(masks.raw, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros((0, 5))
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    out = []
    for k, sl in enumerate(ndimage.find_objects(labels)):
        if sl is None or not (min_area <= areas[k] <= max_area):
            continue
        ys, xs = sl
        out.append([(xs.start + xs.stop) / 2, (ys.start + ys.stop) / 2, xs.stop - xs.start, ys.stop - ys.start, 1.0])
    return np.array(out, dtype=np.float64).reshape(-1, 5)


FEATURES = (
    "bias",
    "motion_density",
    "motion_density_nb",
    "mean_intensity",
    "std_intensity",
    "radius",
    "blob",  # 1 where a motion blob's box centre falls in the cell
    "blob_dx",
    "blob_dy",
    "blob_log_w",
    "blob_log_h",
    "blob_dx2",
    "blob_dy2",
    "blob_fill",
)
_MAGIC = b"MMDG"
_VERSION = 1


_memo_lock = threading.Lock()
_memo: dict = {}


@numba.njit(cache=True)
def _grid_moments(motion, lum, row_of, col_of, g):
    """Per-cell motion count, intensity sum and squared-intensity sum in one pass."""
    cnt = np.zeros((g, g))
    s1 = np.zeros((g, g))
    s2 = np.zeros((g, g))
    for y in range(motion.shape[0]):
        r = row_of[y]
        for x in range(motion.shape[1]):
            c = col_of[x]
            v = np.float64(lum[y, x])
            cnt[r, c] += motion[y, x]
            s1[r, c] += v
            s2[r, c] += v * v
    return cnt, s1, s2


@numba.njit(cache=True)
def _label_extents(lab, n):
    """Bounding box (half-open) and pixel count of labels ``1..n``."""
    x0 = np.full(n, lab.shape[1])
    y0 = np.full(n, lab.shape[0])
    x1 = np.zeros(n, dtype=np.int64)
    y1 = np.zeros(n, dtype=np.int64)
    area = np.zeros(n, dtype=np.int64)
    for y in range(lab.shape[0]):
        for x in range(lab.shape[1]):
            k = lab[y, x] - 1
            if k < 0:
                continue
            area[k] += 1
            x0[k] = min(x0[k], x)
            y0[k] = min(y0[k], y)
            x1[k] = max(x1[k], x + 1)
            y1[k] = max(y1[k], y + 1)
    return x0, y0, x1, y1, area


def _box3(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1)
    return sum(p[i:i + a.shape[0], j:j + a.shape[1]] for i in range(3) for j in range(3))


class GridDetector(Detector):
    """Linear per-cell head over hand-made features of a ``G x G`` grid.

    Each cell owns weights for all five outputs (score logit, dx, dy, log w,
    log h). The four box outputs also share a common weight matrix so that
    box geometry learned in one cell transfers to others; the score does not,
    so a cell only learns to fire from supervision it has actually received.
    Offsets and log-sizes are in units of the cell size.
    """

    def __init__(self, frame_size: tuple[int, int], grid: int = 40, emission_threshold: float = 0.1,
                 local_box_rate: float = 0.1):
        self.width, self.height = frame_size
        self.local_box_rate = local_box_rate
        self.grid = grid
        self.emission_threshold = emission_threshold
        self.n_features = len(FEATURES)
        self.cell = np.zeros((grid, grid, 5, self.n_features))
        self.shared = np.zeros((4, self.n_features))
        self.xe = np.round(np.linspace(0, self.width, grid + 1)).astype(int)
        self.ye = np.round(np.linspace(0, self.height, grid + 1)).astype(int)
        if np.any(np.diff(self.xe) <= 0) or np.any(np.diff(self.ye) <= 0):
            raise ValueError("grid is finer than the frame")
        self.cw = np.diff(self.xe).astype(float)
        self.ch = np.diff(self.ye).astype(float)
        self.ccx = (self.xe[:-1] + self.xe[1:]) / 2
        self.ccy = (self.ye[:-1] + self.ye[1:]) / 2
        r = np.hypot(self.ccx[None, :] - self.width / 2, self.ccy[:, None] - self.height / 2)
        self.radius = r / (min(self.width, self.height) / 2)
        self.row_of = np.repeat(np.arange(grid), np.diff(self.ye))
        self.col_of = np.repeat(np.arange(grid), np.diff(self.xe))
        self._adam = None
        self.step_count = 0
        self.last_step_skipped = False

    # ---- features -------------------------------------------------------
    def _blobs(self, motion: np.ndarray) -> np.ndarray:
        """Per cell: largest 8-connected blob centred there as ``dx, dy, log w, log h, fill``."""
        g = self.grid
        out = np.zeros((g, g, 5))
        lab, n = ndimage.label(motion, structure=np.ones((3, 3)))
        if n == 0:
            return out
        x0, y0, x1, y1, area = _label_extents(lab, n)
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        col = np.minimum(np.searchsorted(self.xe, cx, side="right") - 1, g - 1)
        row = np.minimum(np.searchsorted(self.ye, cy, side="right") - 1, g - 1)
        # one blob per cell: the largest, ties to the lowest label
        order = np.lexsort((np.arange(n), -area))
        cells, first = np.unique((row * g + col)[order], return_index=True)
        k = order[first]
        i, j = cells // g, cells % g
        w, h = x1[k] - x0[k], y1[k] - y0[k]
        out[i, j, 0] = (cx[k] - self.ccx[j]) / self.cw[j]
        out[i, j, 1] = (cy[k] - self.ccy[i]) / self.ch[i]
        out[i, j, 2] = np.log(w / self.cw[j])
        out[i, j, 3] = np.log(h / self.ch[i])
        out[i, j, 4] = area[k] / (w * h)
        return out

    def features(self, frame: Frame, motion: np.ndarray) -> np.ndarray:
        """``(G, G, F)`` feature tensor from a frame and its raw motion mask.

        The last result is memoized per grid geometry, so detectors that see
        the same frame and mask objects (parallel ablation cells) share it.
        The returned array must be treated as read-only.
        """
        if (frame.width, frame.height) != (self.width, self.height):
            raise ValueError("frame size does not match the detector")
        key = (self.width, self.height, self.grid)
        with _memo_lock:
            hit = _memo.get(key)
        if hit is not None and hit[0] is frame and hit[1] is motion:
            return hit[2]
        f = self._compute_features(frame, motion)
        f.flags.writeable = False
        with _memo_lock:
            _memo[key] = (frame, motion, f)
        return f

    def _compute_features(self, frame: Frame, motion: np.ndarray) -> np.ndarray:
        g = self.grid
        motion = np.asarray(motion, dtype=bool)
        lum = frame.luma()
        area = self.ch[:, None] * self.cw[None, :]
        cnt, s1, s2 = _grid_moments(motion.view(np.uint8), lum, self.row_of, self.col_of, g)
        mean_i = s1 / area
        std_i = np.sqrt(np.maximum(s2 / area - mean_i**2, 0.0))
        blobs = self._blobs(motion)
        has = blobs[..., 4] > 0

        f = np.empty((g, g, self.n_features))
        f[..., 0] = 1.0
        f[..., 1] = cnt / area
        f[..., 2] = _box3(cnt) / _box3(area)
        f[..., 3] = mean_i
        f[..., 4] = std_i
        f[..., 5] = self.radius
        f[..., 6] = has
        f[..., 7:11] = blobs[..., :4]
        f[..., 11] = blobs[..., 0] ** 2
        f[..., 12] = blobs[..., 1] ** 2
        f[..., 13] = blobs[..., 4]
        return f

    # ---- forward --------------------------------------------------------
    def _outputs(self, f: np.ndarray) -> np.ndarray:
        o = np.einsum("ijkf,ijf->ijk", self.cell, f)
        o[..., 1:] += f @ self.shared.T
        return o

    def _decode(self, o: np.ndarray) -> np.ndarray:
        """All cells as ``(G*G, 5)`` boxes, row-major over cells."""
        cw, ch = self.cw[None, :], self.ch[:, None]
        score = 1.0 / (1.0 + np.exp(-np.clip(o[..., 0], -50, 50)))
        cx = self.ccx[None, :] + cw * o[..., 1]
        cy = self.ccy[:, None] + ch * o[..., 2]
        w = cw * np.exp(np.clip(o[..., 3], -8, 8))
        h = ch * np.exp(np.clip(o[..., 4], -8, 8))
        return np.stack([cx, cy, w, h, score], axis=-1).reshape(-1, 5)

    def predict_all(self, frame: Frame, motion: np.ndarray) -> np.ndarray:
        return self._decode(self._outputs(self.features(frame, motion)))

    def predict_array(self, frame, masks):
        boxes = self.predict_all(frame, masks.raw)
        return boxes[boxes[:, 4] > self.emission_threshold]

    # ---- training -------------------------------------------------------
    def responsible_cells(self, gts: np.ndarray) -> dict[int, int]:
        """``{gt index: cell index}`` for the cell holding each gt center (first gt wins)."""
        out: dict[int, int] = {}
        used = set()
        for g, b in enumerate(gts):
            if not (0 <= b[0] < self.width and 0 <= b[1] < self.height):
                continue
            j = int(np.searchsorted(self.xe, b[0], side="right")) - 1
            i = int(np.searchsorted(self.ye, b[1], side="right")) - 1
            k = i * self.grid + j
            if k not in used:
                used.add(k)
                out[g] = k
        return out

    def label_predictions(self, preds: np.ndarray, target, match_iou: float = 0.5) -> np.ndarray:
        """Loss labels for all cells; only emitted cells and responsible cells take part.

        A cell below the emission threshold outputs nothing, so it is neither
        matched nor penalized unless it holds a gt center.
        """
        resp = self.responsible_cells(target.gt_array())
        active = preds[:, 4] > self.emission_threshold
        active[list(resp.values())] = True
        idx = np.flatnonzero(active)
        pos = np.full(len(preds), -1)
        pos[idx] = np.arange(len(idx))
        labels = np.full(len(preds), IGNORED, dtype=np.int64)
        labels[idx] = classify_predictions(preds[idx], target, match_iou, {g: int(pos[c]) for g, c in resp.items()})
        return labels

    def loss_and_gradients(self, batch, labels=None, match_iou: float = 0.5):
        """Mean loss over ``batch`` of ``(frame, motion, target)`` and its weight gradients.

        ``labels`` (one array per sample) freezes the prediction labelling,
        which is what a finite-difference check needs.
        """
        g = self.grid
        total = LossBreakdown()
        d_cell = np.zeros_like(self.cell)
        d_shared = np.zeros_like(self.shared)
        used_labels = []
        for k, (frame, motion, target) in enumerate(batch):
            if isinstance(motion, MotionMasks):
                motion = motion.raw
            f = self.features(frame, motion)
            o = self._outputs(f)
            preds = self._decode(o)
            gts = target.gt_array()
            if labels is None:
                lab = self.label_predictions(preds, target, match_iou)
            else:
                lab = labels[k]
            used_labels.append(lab)
            loss, d_score, d_box = loss_and_grad(preds, lab, gts, (self.width, self.height))
            total = total + loss
            s = preds[:, 4]
            do = np.empty((g * g, 5))
            do[:, 0] = d_score * s * (1 - s)
            do[:, 1] = d_box[:, 0] * np.tile(self.cw, g)
            do[:, 2] = d_box[:, 1] * np.repeat(self.ch, g)
            do[:, 3] = d_box[:, 2] * preds[:, 2]
            do[:, 4] = d_box[:, 3] * preds[:, 3]
            do = do.reshape(g, g, 5)
            d_cell += do[..., :, None] * f[..., None, :]
            d_shared += np.einsum("ijk,ijf->kf", do[..., 1:], f)
        n = max(len(batch), 1)
        return total.scaled(1 / n), d_cell / n, d_shared / n, used_labels

    def train_step(self, batch, lr: float, match_iou: float = 0.5) -> LossBreakdown:
        """One Adam step on ``batch``; returns the loss before the step."""
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        loss, d_cell, d_shared, _ = self.loss_and_gradients(batch, match_iou=match_iou)
        if not (np.all(np.isfinite(d_cell)) and np.all(np.isfinite(d_shared))):
            self.last_step_skipped = True
            return loss
        self.last_step_skipped = False
        if lr == 0:
            return loss
        if self._adam is None:
            self._adam = [np.zeros_like(self.cell), np.zeros_like(self.cell),
                          np.zeros_like(self.shared), np.zeros_like(self.shared)]
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.step_count += 1
        t = self.step_count
        # per-cell box weights move slower than the shared ones: they only
        # refine what the shared regression already gets right
        cell_rate = np.array([1.0] + [self.local_box_rate] * 4)[:, None]
        for w, grad, m, v, rate in ((self.cell, d_cell, self._adam[0], self._adam[1], cell_rate),
                                    (self.shared, d_shared, self._adam[2], self._adam[3], 1.0)):
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            w -= lr * rate * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        return loss

    # ---- weights --------------------------------------------------------
    def snapshot_weights(self) -> bytes:
        header = struct.pack("<4sIIIII", _MAGIC, _VERSION, self.grid, self.n_features, self.width, self.height)
        return header + self.cell.astype("<f8").tobytes() + self.shared.astype("<f8").tobytes()

    def load_weights(self, blob: bytes) -> None:
        hsize = struct.calcsize("<4sIIIII")
        magic, version, grid, nf, w, h = struct.unpack("<4sIIIII", blob[:hsize])
        if magic != _MAGIC or version != _VERSION:
            raise ValueError("not a grid detector weight blob")
        if (grid, nf, w, h) != (self.grid, self.n_features, self.width, self.height):
            raise ValueError("weight blob does not match this detector's shape")
        data = np.frombuffer(blob[hsize:], dtype="<f8")
        n_cell = self.cell.size
        if len(data) != n_cell + self.shared.size:
            raise ValueError("truncated weight blob")
        self.cell = data[:n_cell].reshape(self.cell.shape).astype(np.float64)
        self.shared = data[n_cell:].reshape(self.shared.shape).astype(np.float64)

    def save(self, path) -> None:
        Path(path).write_bytes(self.snapshot_weights())

    def copy(self) -> "GridDetector":
        other = GridDetector((self.width, self.height), self.grid, self.emission_threshold, self.local_box_rate)
        other.load_weights(self.snapshot_weights())
        return other


def make_detector(kind: str, frame_size: tuple[int, int], **kwargs) -> Detector:
    if kind == "grid":
        return GridDetector(frame_size, **kwargs)
    if kind == "blob":
        return BlobDetector(**kwargs)
    raise ValueError(f"unknown student kind {kind!r}")
