"""Reconstruction loss, anomaly maps and image scores."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .blocks import FeaturePyramid
from .tensor import ShapeError, Tensor, resize_array

logger = logging.getLogger(__name__)

GAUSSIAN_TRUNCATE = 4.0


@dataclass
class AnomalyResult:
    pixel_map: np.ndarray  # smoothed, (H, W)
    raw_map: np.ndarray  # fused before smoothing, values in [0, 2] for cosine maps
    image_score: float
    per_level_maps: list[np.ndarray]


def _check_pyramids(enc: FeaturePyramid, dec: FeaturePyramid) -> None:
    if len(enc) != len(dec):
        raise ShapeError("pyramid", f"level count mismatch: {len(enc)} encoder vs {len(dec)} decoder")
    for i, (a, b) in enumerate(zip(enc.shapes, dec.shapes)):
        if a != b:
            raise ShapeError("pyramid", f"level {i}: encoder {a} vs decoder {b}")


def multiscale_mse_loss(enc: FeaturePyramid, dec: FeaturePyramid) -> Tensor:
    """Sum over levels of mean squared error between clean encoder and decoder features."""
    _check_pyramids(enc, dec)
    total = None
    for e, d in zip(enc.levels, dec.levels):
        e = e if isinstance(e, Tensor) else Tensor(np.asarray(e, dtype=d.dtype if isinstance(d, Tensor) else None))
        d = d if isinstance(d, Tensor) else Tensor(d)
        term = T.mse(d, e)
        total = term if total is None else T.add(total, term)
    return total


def cosine_distance_map(enc: np.ndarray, dec: np.ndarray) -> np.ndarray:
    """1 - cos(enc, dec) along the channel axis of (B, C, H, W) arrays -> (B, H, W).

    A zero-norm feature vector counts as similarity 0, i.e. distance 1.
    """
    enc = np.asarray(enc, dtype=np.float64)
    dec = np.asarray(dec, dtype=np.float64)
    dot = (enc * dec).sum(axis=1)
    norms = np.sqrt((enc * enc).sum(axis=1)) * np.sqrt((dec * dec).sum(axis=1))
    zero = norms == 0
    if zero.any():
        logger.warning("%d zero-norm feature vectors; treating their similarity as 0", int(zero.sum()))
    sim = np.where(zero, 0.0, dot / np.where(zero, 1.0, norms))
    return 1.0 - np.clip(sim, -1.0, 1.0)


def mse_map(enc: np.ndarray, dec: np.ndarray) -> np.ndarray:
    diff = np.asarray(enc, dtype=np.float64) - np.asarray(dec, dtype=np.float64)
    return (diff * diff).mean(axis=1)


def gaussian_smooth(amap: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return amap.copy()
    return ndimage.gaussian_filter(amap, sigma=sigma, mode="reflect", truncate=GAUSSIAN_TRUNCATE)


def image_score(amap: np.ndarray, statistic: str = "max", top_k: int = 10) -> float:
    """Image-level score of a smoothed pixel map: its maximum, or the mean of its top-k values."""
    flat = np.asarray(amap).reshape(-1)
    if statistic == "max":
        return float(flat.max())
    if statistic == "topk_mean":
        k = max(1, min(top_k, flat.size))
        return float(np.sort(flat)[-k:].mean())
    raise ValueError(f"unknown image statistic {statistic!r}")


def anomaly_maps(
    enc: FeaturePyramid,
    dec: FeaturePyramid,
    out_size: tuple[int, int],
    smoothing_sigma: float = 4.0,
    metric: str = "cosine",
    statistic: str = "max",
    top_k: int = 10,
) -> list[AnomalyResult]:
    """Per-image anomaly maps: per-level distance, upsample, average over levels, smooth."""
    _check_pyramids(enc, dec)
    if metric not in ("cosine", "mse"):
        raise ValueError(f"unknown map metric {metric!r}")
    dist = cosine_distance_map if metric == "cosine" else mse_map
    per_level = [dist(e, d) for e, d in zip(enc.arrays(), dec.arrays())]
    H, W = out_size
    fused = sum(resize_array(m, H, W) for m in per_level) / len(per_level)
    results = []
    for b in range(fused.shape[0]):
        smooth = gaussian_smooth(fused[b], smoothing_sigma)
        results.append(
            AnomalyResult(
                pixel_map=smooth,
                raw_map=fused[b],
                image_score=image_score(smooth, statistic, top_k),
                per_level_maps=[m[b] for m in per_level],
            )
        )
    return results


def anomaly_map(enc: FeaturePyramid, dec: FeaturePyramid, out_size: tuple[int, int], smoothing_sigma: float = 4.0,
                **kwargs) -> AnomalyResult:
    """Single-image form of :func:`anomaly_maps`."""
    results = anomaly_maps(enc, dec, out_size, smoothing_sigma, **kwargs)
    if len(results) != 1:
        raise ShapeError("anomaly_map", f"expected a batch of one image, got {len(results)}")
    return results[0]
