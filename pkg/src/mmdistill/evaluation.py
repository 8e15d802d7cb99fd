"""Detection evaluation: greedy IoU matching, AP, temporal windows and counting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import box_center_in_mask, boxes_to_array, iou_matrix


@dataclass(frozen=True)
class EvalConfig:
    tiou: float = 0.25
    window: float = 180.0
    annotation_period: float = 10.0
    count_window: float = 60.0

    def __post_init__(self):
        if not (self.window > 0 and self.annotation_period > 0 and self.count_window > 0 and self.tiou >= 0):
            raise ValueError("evaluation parameters must be positive")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    is_tp: np.ndarray | None = None  # per prediction, in input order


@dataclass
class AnnotatedFrame:
    t: float
    preds: np.ndarray
    gts: np.ndarray


def _claim_order(scores: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(len(scores)), -scores))


def match_detections(preds, gts, tiou: float = 0.25) -> MatchResult:
    """Each prediction takes its best-IoU ground truth; claims go by descending score.

    A prediction is a true positive when that IoU reaches ``tiou`` and the
    ground truth is still unclaimed; later claims on it are false positives.
    """
    p = boxes_to_array(preds)
    g = boxes_to_array(gts)
    is_tp = np.zeros(len(p), dtype=bool)
    pairs = []
    if len(p) and len(g):
        iou = iou_matrix(p, g)
        best = np.argmax(iou, axis=1)  # first maximum = lowest gt index
        best_iou = iou[np.arange(len(p)), best]
        claimed = np.zeros(len(g), dtype=bool)
        for i in _claim_order(p[:, 4]):
            gi = best[i]
            if best_iou[i] >= tiou and best_iou[i] > 0 and not claimed[gi]:
                claimed[gi] = True
                is_tp[i] = True
                pairs.append((int(i), int(gi), float(best_iou[i])))
    tp = int(is_tp.sum())
    return MatchResult(tp, len(p) - tp, len(g) - tp, pairs, is_tp)


def precision_recall(mr: MatchResult) -> tuple[float, float]:
    p = 1.0 if mr.tp + mr.fp == 0 else mr.tp / (mr.tp + mr.fp)
    r = 1.0 if mr.tp + mr.fn == 0 else mr.tp / (mr.tp + mr.fn)
    return p, r


def pr_curve(frames, tiou: float = 0.25) -> tuple[np.ndarray, np.ndarray, int]:
    """Precision/recall at every distinct score threshold over a set of frames.

    ``frames`` is an iterable of ``(preds, gts)`` pairs. Returns recall and
    precision arrays (in decreasing-threshold order) and the gt count.
    """
    scores, hits = [], []
    n_gt = 0
    for preds, gts in frames:
        p = boxes_to_array(preds)
        mr = match_detections(p, gts, tiou)
        n_gt += len(boxes_to_array(gts))
        scores.append(p[:, 4])
        hits.append(mr.is_tp)
    if not scores:
        return np.zeros(0), np.zeros(0), 0
    scores = np.concatenate(scores)
    hits = np.concatenate(hits)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    # one point per distinct threshold: the end of each run of tied scores
    last = np.r_[scores[1:] != scores[:-1], True] if len(scores) else np.zeros(0, dtype=bool)
    tp, fp = tp[last], fp[last]
    recall = tp / n_gt if n_gt else np.ones_like(tp, dtype=float)
    precision = tp / np.maximum(tp + fp, 1)
    return recall.astype(float), precision.astype(float), n_gt


def area_under_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolated area: precision envelope integrated over recall."""
    if len(recall) == 0:
        return 0.0
    mrec = np.r_[0.0, recall, 1.0]
    mpre = np.r_[0.0, precision, 0.0]
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(frames, tiou: float = 0.25) -> float:
    """AP over ``(preds, gts)`` frames; NaN when the set holds no ground truth."""
    recall, precision, n_gt = pr_curve(frames, tiou)
    if n_gt == 0:
        return math.nan
    return area_under_pr(recall, precision)


def restrict_to_region(boxes, region: np.ndarray) -> np.ndarray:
    b = boxes_to_array(boxes)
    return b[box_center_in_mask(b, region)]


def region_restricted_eval(frames, region: np.ndarray, tiou: float = 0.25) -> float:
    return average_precision(
        [(restrict_to_region(p, region), restrict_to_region(g, region)) for p, g in frames], tiou
    )


def rolling_window_ap(
    timeline: list[AnnotatedFrame], cfg: EvalConfig, region: np.ndarray | None = None,
    duration: float | None = None,
) -> list[tuple[float, float]]:
    """AP over annotated frames in ``[t, t + window)`` for ``t`` every annotation period."""
    if not timeline:
        return []
    times = np.array([f.t for f in timeline])
    if duration is None:
        duration = float(times.max()) + cfg.annotation_period
    n = int(math.floor((duration - cfg.window) / cfg.annotation_period + 1e-9)) + 1
    t0 = float(times.min())
    out = []
    for k in range(max(n, 0)):
        start = t0 + k * cfg.annotation_period
        sel = [f for f in timeline if start - 1e-9 <= f.t < start + cfg.window - 1e-9]
        if not sel:
            continue
        frames = [(f.preds, f.gts) for f in sel]
        ap = average_precision(frames, cfg.tiou) if region is None else region_restricted_eval(frames, region, cfg.tiou)
        out.append((start, ap))
    return out


def tiou_sweep(frames, grid=None) -> list[tuple[float, float]]:
    frames = list(frames)
    grid = np.linspace(0.0, 1.0, 21) if grid is None else grid
    return [(float(t), average_precision(frames, float(t))) for t in grid]


@dataclass
class CountingResult:
    series: list[tuple[float, float, float]]
    rmse: float | None


def counting_series(
    detections: list[tuple[float, int]],
    cfg: EvalConfig,
    gt_counts: list[tuple[float, int]] | None = None,
    t_range: tuple[float, float] | None = None,
) -> CountingResult:
    """Trailing-window mean/std of per-frame box counts, plus RMSE at gt instants.

    ``detections`` holds ``(t, count)`` per frame. RMSE compares the windowed
    mean with each gt count inside ``t_range`` (all of them by default).
    """
    if not detections:
        return CountingResult([], None)
    t = np.array([d[0] for d in detections], dtype=float)
    c = np.array([d[1] for d in detections], dtype=float)
    order = np.argsort(t, kind="stable")
    t, c = t[order], c[order]
    cs = np.r_[0.0, np.cumsum(c)]
    cs2 = np.r_[0.0, np.cumsum(c * c)]
    lo = np.searchsorted(t, t - cfg.count_window, side="right")
    hi = np.arange(1, len(t) + 1)
    n = hi - lo
    mean = (cs[hi] - cs[lo]) / n
    var = np.maximum((cs2[hi] - cs2[lo]) / n - mean**2, 0.0)
    series = [(float(a), float(b), float(s)) for a, b, s in zip(t, mean, np.sqrt(var))]
    rmse = None
    if gt_counts:
        errs = []
        for tg, cg in gt_counts:
            if t_range is not None and not (t_range[0] <= tg <= t_range[1]):
                continue
            k = int(np.searchsorted(t, tg, side="right")) - 1
            if k >= 0:
                errs.append(mean[k] - cg)
        rmse = float(np.sqrt(np.mean(np.square(errs)))) if errs else None
    return CountingResult(series, rmse)
