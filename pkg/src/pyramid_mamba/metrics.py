"""Image- and pixel-level anomaly metrics: AU-ROC, AP, F1max and AU-PRO.

Equal scores are always grouped into a single threshold step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise MetricError("ranking metrics need at least one positive and one negative label")
    return s, y


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties counted one half."""
    s, y = _validate(scores, labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _threshold_counts(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) at each distinct threshold, highest threshold first."""
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    return tp[last].astype(np.float64), fp[last].astype(np.float64)


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum over thresholds of (R_n - R_{n-1}) * P_n."""
    s, y = _validate(scores, labels)
    tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1max(scores, labels) -> float:
    s, y = _validate(scores, labels)
    tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return float(f1.max())


def label_regions(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    if connectivity == 8:
        structure = np.ones((3, 3), dtype=bool)
    elif connectivity == 4:
        structure = ndimage.generate_binary_structure(2, 1)
    else:
        raise MetricError(f"connectivity must be 4 or 8, got {connectivity}")
    return ndimage.label(np.asarray(mask).astype(bool), structure=structure)


def pro_curve(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], connectivity: int = 8):
    """(fpr, pro) points, starting at (0, 0), one per distinct score threshold."""
    if len(maps) != len(masks):
        raise MetricError(f"{len(maps)} maps vs {len(masks)} masks")
    scores, weights_fp, weights_pro = [], [], []
    region_sizes = []
    labelled = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        if amap.shape != np.shape(mask):
            raise MetricError(f"map shape {amap.shape} vs mask shape {np.shape(mask)}")
        lab, n = label_regions(mask, connectivity)
        labelled.append((amap, lab, len(region_sizes)))
        region_sizes.extend(np.bincount(lab.reshape(-1), minlength=n + 1)[1:].tolist())
    n_regions = len(region_sizes)
    if n_regions == 0:
        raise MetricError("no anomalous region in any mask")
    n_neg = sum(int((lab == 0).sum()) for _, lab, _ in labelled)
    if n_neg == 0:
        raise MetricError("no normal pixels; false-positive rate undefined")
    sizes = np.asarray(region_sizes, dtype=np.float64)
    for amap, lab, offset in labelled:
        flat = lab.reshape(-1)
        neg = flat == 0
        wpro = np.zeros(flat.size)
        wpro[~neg] = 1.0 / (n_regions * sizes[flat[~neg] - 1 + offset])
        scores.append(amap.reshape(-1))
        weights_fp.append(neg.astype(np.int64))
        weights_pro.append(wpro)
    s = np.concatenate(scores)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    fpr = np.cumsum(np.concatenate(weights_fp)[order]) / n_neg
    pro = np.cumsum(np.concatenate(weights_pro)[order])
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    return np.r_[0.0, fpr[last]], np.r_[0.0, pro[last]]


def _area_up_to(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoidal area under the curve (x, y) on [0, limit], interpolating at the limit."""
    inside = x <= limit
    xs, ys = x[inside], y[inside]
    cut = np.searchsorted(x, limit, side="right")
    if cut < x.size and xs[-1] < limit:
        x0, x1, y0, y1 = x[cut - 1], x[cut], y[cut - 1], y[cut]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs, ys = np.r_[xs, limit], np.r_[ys, y_lim]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2))


def aupro(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], fpr_limit: float = 0.3,
          connectivity: int = 8) -> float:
    """Area under the per-region-overlap curve up to ``fpr_limit``, normalised to [0, 1]."""
    if not 0 < fpr_limit <= 1:
        raise MetricError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(maps, masks, connectivity)
    return _area_up_to(fpr, pro, fpr_limit) / fpr_limit


# ---------------------------------------------------------------------------
# reports

IMAGE_FIELDS = ("auroc", "ap", "f1max")
PIXEL_FIELDS = ("auroc", "ap", "f1max", "aupro")


@dataclass
class MetricsReport:
    image: dict[str, float]
    pixel: dict[str, float]

    def row(self) -> str:
        img = "/".join(f"{100 * self.image[k]:.1f}" for k in IMAGE_FIELDS)
        pix = "/".join(f"{100 * self.pixel[k]:.1f}" for k in PIXEL_FIELDS)
        return f"{img} | {pix}"


def evaluate(image_scores, image_labels, pixel_maps, masks, fpr_limit: float = 0.3,
             connectivity: int = 8) -> MetricsReport:
    image = {
        "auroc": auroc(image_scores, image_labels),
        "ap": average_precision(image_scores, image_labels),
        "f1max": f1max(image_scores, image_labels),
    }
    pix_s = np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1) for m in pixel_maps])
    pix_y = np.concatenate([np.asarray(m).reshape(-1) for m in masks]).astype(int)
    pixel = {
        "auroc": auroc(pix_s, pix_y),
        "ap": average_precision(pix_s, pix_y),
        "f1max": f1max(pix_s, pix_y),
        "aupro": aupro(pixel_maps, masks, fpr_limit, connectivity),
    }
    return MetricsReport(image, pixel)


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    return MetricsReport(
        {k: float(np.mean([r.image[k] for r in reports])) for k in IMAGE_FIELDS},
        {k: float(np.mean([r.pixel[k] for r in reports])) for k in PIXEL_FIELDS},
    )


def reports_to_json(per_class: dict[str, MetricsReport]) -> str:
    """Per-class rows plus a ``mean`` row, detection (image) and localization (pixel) blocks."""
    doc = {
        "classes": {name: asdict(r) for name, r in per_class.items()},
        "mean": asdict(mean_report(list(per_class.values()))),
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def reports_from_json(text: str) -> tuple[dict[str, MetricsReport], MetricsReport]:
    doc = json.loads(text)
    classes = {k: MetricsReport(**v) for k, v in doc["classes"].items()}
    return classes, MetricsReport(**doc["mean"])
