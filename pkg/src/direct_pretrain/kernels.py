"""Numeric inner loops with a numba path and a pure-numpy path.

Geometry convention shared by every resampler: output pixel ``(i, j)`` with
centre ``(j + 0.5, i + 0.5)`` lies at ``(j + dx + 0.5, i + dy + 0.5)`` in the
scaled (pre-crop) image, i.e. at ``((j + dx + 0.5) / sx, (i + dy + 0.5) / sy)``
in source pixel units. Pixels outside the content window ``content_h x
content_w`` are zero (bottom-right padding). Images clamp to the border;
masks read zero where the sample point falls outside the source extent.
"""
import math

import numpy as np

from ._backend import USE_NUMBA, njit


# --------------------------------------------------------------------------
# bilinear image resampling


@njit
def _bilinear_nb(img, sx, sy, dx, dy, out_h, out_w, content_h, content_w):
    h, w, c = img.shape
    out = np.zeros((out_h, out_w, c), dtype=np.float32)
    ch = min(content_h, out_h)
    cw = min(content_w, out_w)
    x0s = np.empty(cw, dtype=np.int64)
    x1s = np.empty(cw, dtype=np.int64)
    wxs = np.empty(cw, dtype=np.float64)
    for j in range(cw):
        u = (j + dx + 0.5) / sx - 0.5
        if u < 0.0:
            u = 0.0
        if u > w - 1:
            u = w - 1.0
        x0 = int(math.floor(u))
        x0s[j] = x0
        x1s[j] = min(x0 + 1, w - 1)
        wxs[j] = u - x0
    for i in range(ch):
        v = (i + dy + 0.5) / sy - 0.5
        if v < 0.0:
            v = 0.0
        if v > h - 1:
            v = h - 1.0
        y0 = int(math.floor(v))
        y1 = min(y0 + 1, h - 1)
        wy = v - y0
        for j in range(cw):
            x0 = x0s[j]
            x1 = x1s[j]
            wx = wxs[j]
            for k in range(c):
                top = (1.0 - wx) * img[y0, x0, k] + wx * img[y0, x1, k]
                bot = (1.0 - wx) * img[y1, x0, k] + wx * img[y1, x1, k]
                out[i, j, k] = (1.0 - wy) * top + wy * bot
    return out


def _axis_weights(n_out, offset, scale, n_src):
    u = (np.arange(n_out, dtype=np.float64) + offset + 0.5) / scale - 0.5
    u = np.clip(u, 0.0, n_src - 1.0)
    lo = np.floor(u).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, u - lo


def _bilinear_np(img, sx, sy, dx, dy, out_h, out_w, content_h, content_w):
    h, w, c = img.shape
    out = np.zeros((out_h, out_w, c), dtype=np.float32)
    ch = min(content_h, out_h)
    cw = min(content_w, out_w)
    if ch <= 0 or cw <= 0:
        return out
    x0, x1, wx = _axis_weights(cw, dx, sx, w)
    y0, y1, wy = _axis_weights(ch, dy, sy, h)
    wx = wx[None, :, None]
    wy = wy[:, None, None]
    src = img.astype(np.float64, copy=False)
    top = (1.0 - wx) * src[y0][:, x0] + wx * src[y0][:, x1]
    bot = (1.0 - wx) * src[y1][:, x0] + wx * src[y1][:, x1]
    out[:ch, :cw] = (1.0 - wy) * top + wy * bot
    return out


def resample_bilinear(img, sx, sy, dx, dy, out_h, out_w, content_h, content_w):
    """Bilinear resample + crop + zero pad of an ``H x W x C`` float image."""
    img = np.ascontiguousarray(img, dtype=np.float32)
    args = (float(sx), float(sy), float(dx), float(dy), int(out_h), int(out_w),
            int(content_h), int(content_w))
    if USE_NUMBA:
        return _bilinear_nb(img, *args)
    return _bilinear_np(img, *args)


# --------------------------------------------------------------------------
# nearest-neighbour mask resampling


@njit
def _nearest_nb(masks, sx, sy, dx, dy, out_h, out_w, content_h, content_w):
    n, h, w = masks.shape
    out = np.zeros((n, out_h, out_w), dtype=np.uint8)
    ch = min(content_h, out_h)
    cw = min(content_w, out_w)
    xs = np.empty(cw, dtype=np.int64)
    for j in range(cw):
        u = (j + dx + 0.5) / sx
        xs[j] = -1 if (u < 0.0 or u > w) else min(int(math.floor(u)), w - 1)
    for i in range(ch):
        v = (i + dy + 0.5) / sy
        if v < 0.0 or v > h:
            continue
        y = min(int(math.floor(v)), h - 1)
        for m in range(n):
            for j in range(cw):
                if xs[j] >= 0:
                    out[m, i, j] = masks[m, y, xs[j]]
    return out


def _nearest_np(masks, sx, sy, dx, dy, out_h, out_w, content_h, content_w):
    n, h, w = masks.shape
    out = np.zeros((n, out_h, out_w), dtype=np.uint8)
    ch = min(content_h, out_h)
    cw = min(content_w, out_w)
    if ch <= 0 or cw <= 0 or n == 0:
        return out
    u = (np.arange(cw) + dx + 0.5) / sx
    v = (np.arange(ch) + dy + 0.5) / sy
    jx = np.flatnonzero((u >= 0) & (u <= w))
    iy = np.flatnonzero((v >= 0) & (v <= h))
    xs = np.minimum(np.floor(u[jx]).astype(np.int64), w - 1)
    ys = np.minimum(np.floor(v[iy]).astype(np.int64), h - 1)
    out[:, iy[:, None], jx[None, :]] = masks[:, ys][:, :, xs]
    return out


def resample_nearest(masks, sx, sy, dx, dy, out_h, out_w, content_h, content_w):
    """Nearest-neighbour resample of an ``N x H x W`` stack of binary masks."""
    masks = np.ascontiguousarray(masks, dtype=np.uint8)
    args = (float(sx), float(sy), float(dx), float(dy), int(out_h), int(out_w),
            int(content_h), int(content_w))
    if USE_NUMBA:
        return _nearest_nb(masks, *args)
    return _nearest_np(masks, *args)


# --------------------------------------------------------------------------
# box IoU


@njit
def _box_iou_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            if iw <= 0.0:
                continue
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            union = area_a + area_b - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out


def _box_iou_np(a, b):
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where((inter > 0) & (union > 0), inter / union, 0.0)
    return out


def box_iou(a, b):
    """Pairwise IoU of corner-format boxes, ``(N, 4) x (M, 4) -> (N, M)``."""
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    if USE_NUMBA:
        return _box_iou_nb(a, b)
    return _box_iou_np(a, b)


def mask_iou(a, b):
    """Pairwise IoU of flattened binary masks, ``(N, P) x (M, P)``."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


# --------------------------------------------------------------------------
# greedy detection/ground-truth matching


@njit
def _greedy_match_nb(ious, gt_ignore, thresholds):
    n_det, n_gt = ious.shape
    n_thr = thresholds.shape[0]
    det_gt = -np.ones((n_thr, n_det), dtype=np.int64)
    det_ignored = np.zeros((n_thr, n_det), dtype=np.bool_)
    for t in range(n_thr):
        thr = thresholds[t]
        taken = np.zeros(n_gt, dtype=np.bool_)
        for d in range(n_det):
            best = -1
            best_iou = -1.0
            # regular ground truth first, ignored ones only as a fallback
            for pas in range(2):
                want_ignored = pas == 1
                for g in range(n_gt):
                    if taken[g] or gt_ignore[g] != want_ignored:
                        continue
                    v = ious[d, g]
                    if v >= thr and v > best_iou:
                        best_iou = v
                        best = g
                if best >= 0:
                    break
            if best >= 0:
                taken[best] = True
                det_gt[t, d] = best
                det_ignored[t, d] = gt_ignore[best]
    return det_gt, det_ignored


def _greedy_match_np(ious, gt_ignore, thresholds):
    n_det, n_gt = ious.shape
    det_gt = -np.ones((len(thresholds), n_det), dtype=np.int64)
    det_ignored = np.zeros((len(thresholds), n_det), dtype=bool)
    for t, thr in enumerate(thresholds):
        free = np.ones(n_gt, dtype=bool)
        for d in range(n_det):
            ok = free & (ious[d] >= thr)
            for cand in (ok & ~gt_ignore, ok & gt_ignore):
                if cand.any():
                    g = int(np.argmax(np.where(cand, ious[d], -1.0)))
                    free[g] = False
                    det_gt[t, d] = g
                    det_ignored[t, d] = gt_ignore[g]
                    break
    return det_gt, det_ignored


def greedy_match(ious, gt_ignore, thresholds):
    """Match score-sorted detections (rows) to ground truth (columns).

    Each detection takes the highest-IoU still-free ground truth with
    ``IoU >= threshold``; non-ignored ground truth is preferred, ties go to the
    lower column index. Returns ``(det_gt, det_ignored)`` of shape
    ``(len(thresholds), n_det)`` with ``-1`` for unmatched detections.
    """
    ious = np.ascontiguousarray(ious, dtype=np.float64)
    gt_ignore = np.ascontiguousarray(gt_ignore, dtype=np.bool_)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    if USE_NUMBA:
        return _greedy_match_nb(ious, gt_ignore, thresholds)
    return _greedy_match_np(ious, gt_ignore, thresholds)
