"""Supervision targets, the three-way loss gating and the detection loss."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .core import Box, MotionMasks, RegionPartition, box_center_in_mask, boxes_to_array, iou_matrix
from .geometry import FisheyeModel, Homography, project_box
from .imageio import save_mask

EPS = 1e-7
IGNORED = -1
PENALIZED = -2


class GateMode(str, enum.Enum):
    MOTION = "motion"  # no loss for unmatched boxes centred on motion outside the shared view
    NONE = "none"  # no loss for any unmatched box outside the shared view
    ALL = "all"  # unmatched boxes are penalised everywhere


class Label(enum.Enum):
    MATCHED = "matched"
    PENALIZED = "penalized"
    IGNORED = "ignored"


@dataclass(frozen=True)
class Classification:
    label: Label
    gt_index: int | None = None


@dataclass(frozen=True)
class SupervisionTarget:
    gt_boxes: list[Box]
    ignore_mask: np.ndarray = field(repr=False)
    penalize_mask: np.ndarray = field(repr=False)
    overlap: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.overlap.shape

    def gt_array(self) -> np.ndarray:
        return boxes_to_array(self.gt_boxes)

    def with_extra_boxes(self, boxes: list[Box]) -> "SupervisionTarget":
        return SupervisionTarget(list(self.gt_boxes) + list(boxes), self.ignore_mask, self.penalize_mask, self.overlap)

    def dump(self, directory, stem: str) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        record = {"boxes": [dict(zip(("cx", "cy", "w", "h", "score"), b.as_tuple())) for b in self.gt_boxes]}
        (directory / f"{stem}.json").write_text(json.dumps(record))
        save_mask(self.ignore_mask, directory / f"{stem}_ignore.pgm")
        save_mask(self.penalize_mask, directory / f"{stem}_penalize.pgm")


@dataclass(frozen=True)
class LossBreakdown:
    coord_loss: float = 0.0
    obj_loss: float = 0.0
    noobj_loss: float = 0.0

    @property
    def total(self) -> float:
        return self.coord_loss + self.obj_loss + self.noobj_loss

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(self.coord_loss + other.coord_loss, self.obj_loss + other.obj_loss,
                             self.noobj_loss + other.noobj_loss)

    def scaled(self, k: float) -> "LossBreakdown":
        return LossBreakdown(self.coord_loss * k, self.obj_loss * k, self.noobj_loss * k)


def gate_masks(partition: RegionPartition, dilated: np.ndarray, mode: GateMode | str = GateMode.MOTION):
    """Return ``(ignore, penalize)`` masks over the student-only region."""
    mode = GateMode(mode)
    outside = partition.outside
    if mode is GateMode.MOTION:
        return outside & dilated, outside & ~dilated
    if mode is GateMode.NONE:
        return outside.copy(), np.zeros_like(outside)
    return np.zeros_like(outside), outside.copy()


def assemble_target(
    teacher_boxes: list[Box],
    h: Homography,
    artificial_boxes: list[Box],
    masks: MotionMasks,
    partition: RegionPartition,
    distortion: FisheyeModel | None = None,
    gate_mode: GateMode | str = GateMode.MOTION,
) -> SupervisionTarget:
    gt = [project_box(h, b, distortion).with_score(1.0) for b in teacher_boxes]
    gt += [b.with_score(1.0) for b in artificial_boxes]
    ignore, penalize = gate_masks(partition, masks.dilated, gate_mode)
    return SupervisionTarget(gt, ignore, penalize, partition.overlap)


def classify_predictions(
    preds,
    target: SupervisionTarget,
    match_iou: float = 0.5,
    responsible: dict[int, int] | None = None,
) -> np.ndarray:
    """Label every prediction: gt index when matched, else IGNORED or PENALIZED.

    Matching is one-to-one, highest IoU first (ties: lower gt index, then
    lower prediction index). ``responsible`` pre-assigns ``{gt: pred}`` pairs
    before the IoU pass, as a grid detector does for the cell holding a
    box center.
    """
    p = boxes_to_array(preds)
    gts = target.gt_array()
    labels = np.full(len(p), PENALIZED, dtype=np.int64)
    gt_taken = np.zeros(len(gts), dtype=bool)
    if responsible:
        for g, i in responsible.items():
            labels[i] = g
            gt_taken[g] = True
    if len(p) and len(gts):
        iou = iou_matrix(p, gts)
        iou[labels >= 0] = -1.0
        iou[:, gt_taken] = -1.0
        pi, gi = np.nonzero(iou >= match_iou)
        if len(pi):
            order = np.lexsort((pi, gi, -iou[pi, gi]))
            pred_free = labels < 0
            for k in order:
                i, g = pi[k], gi[k]
                if pred_free[i] and not gt_taken[g]:
                    labels[i] = g
                    pred_free[i] = False
                    gt_taken[g] = True
    unmatched = labels < 0
    if unmatched.any():
        ign = box_center_in_mask(p[unmatched], target.ignore_mask)
        labels[np.flatnonzero(unmatched)[ign]] = IGNORED
    return labels


def classify_prediction(pred: Box, target: SupervisionTarget, match_iou: float = 0.5) -> Classification:
    label = int(classify_predictions([pred], target, match_iou)[0])
    if label >= 0:
        return Classification(Label.MATCHED, label)
    return Classification(Label.IGNORED if label == IGNORED else Label.PENALIZED)


def loss_and_grad(preds: np.ndarray, labels: np.ndarray, gts: np.ndarray, frame_size: tuple[int, int]):
    """Loss terms for labelled predictions and their gradients.

    Returns ``(LossBreakdown, d_score, d_box)`` where ``d_box`` is the
    gradient with respect to ``(cx, cy, w, h)``. Scores are clamped to
    ``[EPS, 1 - EPS]``; the clamp has zero gradient.
    """
    preds = boxes_to_array(preds)
    n = len(preds)
    d_score = np.zeros(n)
    d_box = np.zeros((n, 4))
    raw = preds[:, 4]
    s = np.clip(raw, EPS, 1 - EPS)
    live = (raw > EPS) & (raw < 1 - EPS)
    matched = labels >= 0
    penal = labels == PENALIZED
    coord = obj = noobj = 0.0
    m = int(matched.sum())
    if m:
        norm = np.array([frame_size[0], frame_size[1], frame_size[0], frame_size[1]], dtype=np.float64)
        diff = (preds[matched, :4] - gts[labels[matched], :4]) / norm
        coord = float(np.mean(np.sum(diff**2, axis=1) / 4))
        d_box[matched] = 2 * diff / norm / 4 / m
        obj = float(np.mean(-np.log(s[matched])))
        d_score[matched] = np.where(live[matched], -1.0 / s[matched] / m, 0.0)
    k = int(penal.sum())
    if k:
        noobj = float(np.mean(-np.log(1 - s[penal])))
        d_score[penal] = np.where(live[penal], 1.0 / (1 - s[penal]) / k, 0.0)
    return LossBreakdown(coord, obj, noobj), d_score, d_box


def detection_loss(preds, target: SupervisionTarget, match_iou: float = 0.5, responsible=None) -> LossBreakdown:
    p = boxes_to_array(preds)
    labels = classify_predictions(p, target, match_iou, responsible)
    h, w = target.shape
    loss, _, _ = loss_and_grad(p, labels, target.gt_array(), (w, h))
    return loss


def postprocess_inference(preds, masks: MotionMasks):
    """Drop predictions whose center pixel is outside the dilated motion mask.

    Accepts a list of boxes or an ``(n, 5)`` array and returns the same kind.
    """
    if isinstance(preds, np.ndarray):
        return preds[box_center_in_mask(preds, masks.dilated)]
    if not preds:
        return []
    keep = box_center_in_mask(boxes_to_array(preds), masks.dilated)
    return [b for b, k in zip(preds, keep) if k]


@numba.njit(cache=True)
def _nms_keep(b, thr):
    n = b.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    for i in range(n):
        if not keep[i]:
            continue
        ax0 = b[i, 0] - b[i, 2] / 2
        ax1 = b[i, 0] + b[i, 2] / 2
        ay0 = b[i, 1] - b[i, 3] / 2
        ay1 = b[i, 1] + b[i, 3] / 2
        aa = b[i, 2] * b[i, 3]
        for j in range(i + 1, n):
            if not keep[j]:
                continue
            iw = min(ax1, b[j, 0] + b[j, 2] / 2) - max(ax0, b[j, 0] - b[j, 2] / 2)
            if iw <= 0:
                continue
            ih = min(ay1, b[j, 1] + b[j, 3] / 2) - max(ay0, b[j, 1] - b[j, 3] / 2)
            if ih <= 0:
                continue
            inter = iw * ih
            union = aa + b[j, 2] * b[j, 3] - inter
            if union > 0 and inter / union > thr:
                keep[j] = False
    return keep


def nms(preds: np.ndarray, iou_threshold: float = 0.5, score_threshold: float = 0.0) -> np.ndarray:
    """Greedy suppression in descending score order on an ``(n, 5)`` array."""
    preds = boxes_to_array(preds)
    preds = preds[preds[:, 4] >= score_threshold]
    if len(preds) <= 1:
        return preds
    order = np.argsort(-preds[:, 4], kind="stable")
    preds = preds[order]
    keep = _nms_keep(np.ascontiguousarray(preds[:, :4]), float(iou_threshold))
    return preds[keep]
