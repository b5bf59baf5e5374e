"""Slow, independent reference implementations.

Nothing here shares code with the fast paths it checks: metrics count pairs
and thresholds directly, labelling is a breadth-first flood fill, convolution
and smoothing are explicit loops, and the pyramid is unrolled region by region.
"""

from __future__ import annotations

from collections import deque
from typing import Callable, Sequence

import numpy as np

# ---------------------------------------------------------------------------
# ranking metrics


def auroc_pairs(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def _pr_points(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    points = []
    for t in sorted(set(s.tolist()), reverse=True):
        pred = s >= t
        tp = int((pred & y).sum())
        fp = int((pred & ~y).sum())
        points.append((tp / (tp + fp), tp / int(y.sum())))
    return points


def average_precision_loop(scores, labels) -> float:
    ap, prev_recall = 0.0, 0.0
    for precision, recall in _pr_points(scores, labels):
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def f1max_loop(scores, labels) -> float:
    best = 0.0
    for precision, recall in _pr_points(scores, labels):
        if precision + recall > 0:
            best = max(best, 2 * precision * recall / (precision + recall))
    return best


# ---------------------------------------------------------------------------
# connected components and AU-PRO


def label_bfs(mask, connectivity: int = 8) -> tuple[np.ndarray, int]:
    mask = np.asarray(mask).astype(bool)
    H, W = mask.shape
    lab = np.zeros((H, W), dtype=np.int64)
    if connectivity == 8:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]
    else:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    n = 0
    for y0 in range(H):
        for x0 in range(W):
            if not mask[y0, x0] or lab[y0, x0]:
                continue
            n += 1
            lab[y0, x0] = n
            queue = deque([(y0, x0)])
            while queue:
                y, x = queue.popleft()
                for dy, dx in steps:
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < H and 0 <= xx < W and mask[yy, xx] and not lab[yy, xx]:
                        lab[yy, xx] = n
                        queue.append((yy, xx))
    return lab, n


def pro_curve_loop(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], connectivity: int = 8):
    regions = []  # (image index, boolean region mask)
    for i, m in enumerate(masks):
        lab, n = label_bfs(m, connectivity)
        regions.extend((i, lab == k) for k in range(1, n + 1))
    maps = [np.asarray(a, dtype=np.float64) for a in maps]
    normal = [~np.asarray(m).astype(bool) for m in masks]
    n_neg = sum(int(z.sum()) for z in normal)
    thresholds = sorted(set(np.concatenate([a.ravel() for a in maps]).tolist()), reverse=True)
    fprs, pros = [0.0], [0.0]
    for t in thresholds:
        fp = sum(int(((a >= t) & z).sum()) for a, z in zip(maps, normal))
        overlaps = [((maps[i] >= t) & r).sum() / r.sum() for i, r in regions]
        fprs.append(fp / n_neg)
        pros.append(float(np.mean(overlaps)))
    return np.array(fprs), np.array(pros)


def aupro_loop(maps, masks, fpr_limit: float = 0.3, connectivity: int = 8) -> float:
    fpr, pro = pro_curve_loop(maps, masks, connectivity)
    area = 0.0
    for k in range(1, fpr.size):
        x0, x1, y0, y1 = fpr[k - 1], fpr[k], pro[k - 1], pro[k]
        if x0 >= fpr_limit:
            break
        if x1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += (x1 - x0) * (y0 + y1) / 2
    return area / fpr_limit


# ---------------------------------------------------------------------------
# image operators


def conv2d_loops(x, w, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, g * cg : (g + 1) * cg, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, oc, i, j] = (patch * w[oc]).sum() + (0.0 if bias is None else bias[oc])
    return out


def bilinear_loops(img, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a 2-D array, one output pixel at a time."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape

    def taps(i, n_in, n_out):
        src = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    out = np.zeros((out_h, out_w))
    for r in range(out_h):
        r0, r1, fr = taps(r, H, out_h)
        for c in range(out_w):
            c0, c1, fc = taps(c, W, out_w)
            top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
            bottom = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
            out[r, c] = top * (1 - fr) + bottom * fr
    return out


def gaussian_loops(img, sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Separable Gaussian with half-sample symmetric borders and radius int(truncate * sigma + 0.5)."""
    img = np.asarray(img, dtype=np.float64)
    r = int(truncate * sigma + 0.5)
    taps = np.array([np.exp(-0.5 * (k / sigma) ** 2) for k in range(-r, r + 1)])
    taps /= taps.sum()
    padded = np.pad(img, r, mode="symmetric")
    H, W = img.shape
    rows = np.zeros((H + 2 * r, W))
    for j in range(W):
        rows[:, j] = sum(taps[k] * padded[:, j + k] for k in range(2 * r + 1))
    out = np.zeros((H, W))
    for i in range(H):
        out[i] = sum(taps[k] * rows[i + k] for k in range(2 * r + 1))
    return out


# ---------------------------------------------------------------------------
# scans


def selective_scan_loop(u, delta, A, B, C) -> np.ndarray:
    """Per-element recurrence for one sequence: u, delta (L, E); A (E, N); B, C (L, N)."""
    u, delta, A, B, C = (np.asarray(a, dtype=np.float64) for a in (u, delta, A, B, C))
    L, E = u.shape
    h = np.zeros(A.shape)
    y = np.zeros((L, E))
    for t in range(L):
        for e in range(E):
            for n in range(A.shape[1]):
                h[e, n] = np.exp(delta[t, e] * A[e, n]) * h[e, n] + delta[t, e] * B[t, n] * u[t, e]
            y[t, e] = h[e] @ C[t]
    return y


def pyramid_unrolled(x: np.ndarray, levels: int, scan: Callable[[np.ndarray, int], np.ndarray]) -> np.ndarray:
    """Pairwise-averaged pyramid written out level by level on plain arrays.

    Level p < P contributes with weight 2^-(p+1) and the deepest level with
    2^-P. ``scan(region, level)`` maps a (B, C, h, w) region to the same shape.
    """
    x = np.asarray(x)
    H, W = x.shape[2:]
    out = np.zeros(x.shape, dtype=np.float64)
    for p in range(levels + 1):
        weight = 0.5 ** (p + 1) if p < levels else 0.5**levels
        g = 2**p
        h, w = H // g, W // g
        for r in range(g):
            for c in range(g):
                sl = (slice(None), slice(None), slice(r * h, (r + 1) * h), slice(c * w, (c + 1) * w))
                out[sl] += weight * scan(x[sl], p)
    return out


# ---------------------------------------------------------------------------
# gradients


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``arr``, perturbed in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))
