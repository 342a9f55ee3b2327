"""COCO-style average precision.

Per category and IoU threshold, score-sorted detections are greedily matched
to ground truth (see :func:`kernels.greedy_match`); precision/recall are
accumulated over all images and AP is the area under the monotone precision
envelope. ``interpolation="coco101"`` samples the envelope at 101 recall
points instead.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .. import kernels

log = logging.getLogger(__name__)

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}


def _areas(rec, iou_type):
    if iou_type == "segm":
        return rec["masks"].reshape(len(rec["masks"]), -1).sum(1).astype(np.float64)
    b = np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def _ious(det, gt, iou_type):
    if iou_type == "segm":
        return kernels.mask_iou(det["masks"], gt["masks"])
    return kernels.box_iou(det["boxes"], gt["boxes"])


def _select(rec, mask):
    return {k: (np.asarray(v)[mask] if k in ("boxes", "scores", "labels", "masks") else v)
            for k, v in rec.items() if v is not None}


def average_precision(recall, precision, interpolation="all_point"):
    """AP from a cumulative recall/precision curve ordered by score."""
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "coco101":
        pts = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, pts, side="left")
        vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
        return float(vals.mean())
    if interpolation != "all_point":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    r_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - r_prev) * env))


def _category_curve(dets, gts, cat, thresholds, area_rng, iou_type, max_dets):
    """Per-threshold (scores, tp, ignore) arrays and the non-ignored GT count."""
    lo, hi = area_rng
    scores, tps, ignores = [], [], []
    n_gt = 0
    for img_id, gt in gts.items():
        g = _select(gt, np.asarray(gt["labels"]) == cat)
        det = dets.get(img_id)
        if det is None or len(det.get("scores", ())) == 0:
            d = None
        else:
            d = _select(det, np.asarray(det["labels"]) == cat)
        n_g = len(g["labels"])
        g_area = _areas(g, iou_type) if n_g else np.zeros(0)
        g_ign = (g_area < lo) | (g_area > hi)
        n_gt += int((~g_ign).sum())
        if d is None or len(d["scores"]) == 0:
            continue
        order = np.argsort(-np.asarray(d["scores"], dtype=np.float64), kind="mergesort")[:max_dets]
        d = {k: np.asarray(v)[order] for k, v in d.items() if k in ("boxes", "scores", "labels", "masks")}
        n_d = len(d["scores"])
        # regular ground truth first so ignored ones only match as a fallback
        gorder = np.argsort(g_ign, kind="mergesort")
        if n_g:
            g_sorted = {k: v[gorder] for k, v in g.items() if k in ("boxes", "labels", "masks")}
            ious = _ious(d, g_sorted, iou_type)
            det_gt, det_ign = kernels.greedy_match(ious, g_ign[gorder], thresholds)
        else:
            det_gt = -np.ones((len(thresholds), n_d), dtype=np.int64)
            det_ign = np.zeros((len(thresholds), n_d), dtype=bool)
        d_area = _areas(d, iou_type)
        out_of_range = (d_area < lo) | (d_area > hi)
        det_ign = det_ign | ((det_gt < 0) & out_of_range[None, :])
        scores.append(d["scores"].astype(np.float64))
        tps.append(det_gt >= 0)
        ignores.append(det_ign)
    if not scores:
        return np.zeros(0), np.zeros((len(thresholds), 0), bool), np.zeros((len(thresholds), 0), bool), n_gt
    return np.concatenate(scores), np.concatenate(tps, axis=1), np.concatenate(ignores, axis=1), n_gt


def _ap_for(dets, gts, cats, thresholds, area_rng, iou_type, max_dets, interpolation):
    """``(T, K)`` AP table; NaN where a category has no ground truth."""
    table = np.full((len(thresholds), len(cats)), np.nan)
    for k, cat in enumerate(cats):
        scores, tp, ign, n_gt = _category_curve(dets, gts, cat, thresholds, area_rng, iou_type, max_dets)
        if n_gt == 0:
            continue
        order = np.argsort(-scores, kind="mergesort")
        for t in range(len(thresholds)):
            keep = ~ign[t, order]
            hits = tp[t, order][keep]
            ctp = np.cumsum(hits)
            cfp = np.cumsum(~hits)
            recall = ctp / n_gt
            precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
            table[t, k] = average_precision(recall, precision, interpolation)
    return table


@dataclass
class ApResult:
    ap: float
    ap50: float
    ap75: float
    ap_small: float
    ap_medium: float
    ap_large: float
    per_threshold: np.ndarray
    per_category: np.ndarray

    def as_dict(self):
        return {k: float(getattr(self, k)) for k in ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large")}


def _mean(x):
    x = np.asarray(x, dtype=np.float64)
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else float("nan")


def evaluate_ap(detections, ground_truth, iou_thresholds=IOU_THRESHOLDS, iou_type="bbox",
                interpolation="all_point", max_dets=100, categories=None):
    """COCO-style AP.

    ``detections`` and ``ground_truth`` map image id to dicts with ``boxes``
    (corner format), ``labels`` and, for detections, ``scores``; ``masks``
    (``K x H x W``) are required for ``iou_type="segm"``. Images absent from
    ``ground_truth`` are ignored. Size buckets with no ground truth are NaN.
    """
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    if categories is None:
        labels = [np.asarray(g["labels"]) for g in ground_truth.values()]
        categories = sorted({int(l) for arr in labels for l in arr})
    n_gt = sum(len(g["labels"]) for g in ground_truth.values())
    if n_gt == 0:
        log.warning("evaluate_ap: ground truth is empty; AP defined as 0")
        return ApResult(0.0, 0.0, 0.0, float("nan"), float("nan"), float("nan"),
                        np.zeros(len(thresholds)), np.zeros(len(categories)))
    table = _ap_for(detections, ground_truth, categories, thresholds, AREA_RANGES["all"], iou_type,
                    max_dets, interpolation)
    per_t = np.array([_mean(row) for row in table])
    per_c = np.array([_mean(col) for col in table.T])

    def at(value):
        hit = np.flatnonzero(np.isclose(thresholds, value))
        return float(per_t[hit[0]]) if len(hit) else float("nan")

    buckets = {}
    for name in ("small", "medium", "large"):
        tb = _ap_for(detections, ground_truth, categories, thresholds, AREA_RANGES[name], iou_type,
                     max_dets, interpolation)
        buckets[name] = _mean(tb)
    return ApResult(_mean(table), at(0.5), at(0.75), buckets["small"], buckets["medium"], buckets["large"],
                    per_t, per_c)
