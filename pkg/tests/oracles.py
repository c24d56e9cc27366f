"""Independent brute-force reference implementations used by the tests."""

import math

import numpy as np


def tv_loop(t, m):
    h, w = m.shape
    t = t.reshape(h, w, -1)
    total = 0.0
    for i in range(h):
        for j in range(w):
            for c in range(t.shape[2]):
                if i + 1 < h and m[i, j] and m[i + 1, j]:
                    total += abs(t[i, j, c] - t[i + 1, j, c])
                if j + 1 < w and m[i, j] and m[i, j + 1]:
                    total += abs(t[i, j, c] - t[i, j + 1, c])
    return total / m.sum()


def nps_loop(t, m, palette):
    total = 0.0
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            if m[i, j]:
                best = math.inf
                for p in palette:
                    d = math.sqrt(sum((t[i, j, c] - p[c]) ** 2 for c in range(3)))
                    best = min(best, d)
                total += best
    return total / m.sum()


def cr_loop(t, m, c_r, c_ru):
    total = 0.0
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            if m[i, j]:
                for c in range(3):
                    lo = min(max(c_r[c] - c_ru, 0.0), 1.0)
                    hi = min(max(c_r[c] + c_ru, 0.0), 1.0)
                    total += abs(t[i, j, c] - lo) + abs(t[i, j, c] - hi)
    return total / m.sum()


def iou_area(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def ap_pr_table(preds, gts, thr=0.5):
    """AP from an explicit PR table.

    preds: list of (image, confidence, box); gts: list of per-image box lists.
    Matching walks detections by descending confidence (ties by image, then
    input order); precision at each recall level is the max precision at any
    equal-or-higher recall; AP sums precision over recall increments.
    """
    n_gt = sum(len(g) for g in gts)
    order = sorted(range(len(preds)), key=lambda k: (-preds[k][1], preds[k][0], k))
    used = [[False] * len(g) for g in gts]
    rows = []
    tp = fp = 0
    for k in order:
        img, _, box = preds[k]
        best, best_iou = None, -1.0
        for gi, g in enumerate(gts[img]):
            v = iou_area(box, g)
            if v > best_iou:
                best, best_iou = gi, v
        if best is not None and best_iou >= thr and not used[img][best]:
            used[img][best] = True
            tp += 1
        else:
            fp += 1
        rows.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for r, _ in rows:
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in rows if rr >= r)
            prev_r = r
    return ap


def point_in_triangle(px, py, tri):
    """Strict-or-on-edge containment by sign of the three edge functions."""
    (x0, y0), (x1, y1), (x2, y2) = tri
    d0 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
    d1 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    d2 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
    neg = d0 < 0 or d1 < 0 or d2 < 0
    pos = d0 > 0 or d1 > 0 or d2 > 0
    return not (neg and pos)
