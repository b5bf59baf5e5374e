"""Pyramidal scanning: recursive quadrant split, per-level four-way scans, averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .ssm import Scan4
from .tensor import Module, ShapeError, Tensor

ScanFn = Callable[[Tensor, int], Tensor]


@dataclass(frozen=True)
class PyramidSpec:
    """``levels`` is the deepest pyramid level P; ``chain`` the number M of stacked PSS blocks."""

    levels: int = 2
    chain: int = 3
    average: str = "pairwise"  # or "uniform"

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError(f"pyramid levels must be >= 0, got {self.levels}")
        if self.chain < 1:
            raise ValueError(f"PSS chain length must be >= 1, got {self.chain}")
        if self.average not in ("pairwise", "uniform"):
            raise ValueError(f"unknown averaging rule {self.average!r}")

    def check_size(self, h: int, w: int) -> None:
        div = 2**self.levels
        if h % div or w % div:
            raise ShapeError("pyramid", f"spatial size {h}x{w} not divisible by 2^P = {div} on axes [2, 3]")


@dataclass
class PyramidNode:
    level: int
    index: int
    region: Tensor


def split(x: Tensor, p: int = 0) -> list[Tensor]:
    """One subdivision step: quadrants in order top-left, top-right, bottom-left, bottom-right.

    ``p`` is the level being split and only appears in error messages.
    """
    _, _, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError("split", f"level {p}: odd spatial size {H}x{W} on axes [2, 3]")
    h, w = H // 2, W // 2
    return [x[:, :, r * h : (r + 1) * h, c * w : (c + 1) * w] for r in (0, 1) for c in (0, 1)]


def cat(regions: Sequence[Tensor], grid: int | None = None) -> Tensor:
    """Reassemble ``grid`` x ``grid`` regions given in row-major order."""
    regions = list(regions)
    n = len(regions)
    grid = grid if grid is not None else int(round(np.sqrt(n)))
    if grid * grid != n or grid & (grid - 1):
        raise ShapeError("cat", f"{n} regions do not form a power-of-two square grid")
    for r in regions[1:]:
        if r.shape != regions[0].shape:
            raise ShapeError("cat", f"region shapes differ: {regions[0].shape} vs {r.shape}")
    if n == 1:
        return regions[0]
    rows = [T.concat(regions[i * grid : (i + 1) * grid], axis=3) for i in range(grid)]
    return T.concat(rows, axis=2)


def split_nodes(x: Tensor, p: int) -> list[PyramidNode]:
    """All 2^p x 2^p regions of ``x`` at level ``p``, row-major over the grid."""
    g = 2**p
    _, _, H, W = x.shape
    if H % g or W % g:
        raise ShapeError("split", f"{H}x{W} not divisible into a {g}x{g} grid")
    h, w = H // g, W // g
    return [
        PyramidNode(p, r * g + c, x[:, :, r * h : (r + 1) * h, c * w : (c + 1) * w])
        for r in range(g)
        for c in range(g)
    ]


def split_batch(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (4B, C, H/2, W/2), quadrant-major, same quadrant order as :func:`split`."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError("split", f"odd spatial size {H}x{W} on axes [2, 3]")
    y = T.reshape(x, (B, C, 2, H // 2, 2, W // 2))
    y = T.transpose(y, (2, 4, 0, 1, 3, 5))
    return T.reshape(y, (4 * B, C, H // 2, W // 2))


def cat_batch(x: Tensor) -> Tensor:
    """Inverse of :func:`split_batch`."""
    B4, C, h, w = x.shape
    B = B4 // 4
    y = T.reshape(x, (2, 2, B, C, h, w))
    y = T.transpose(y, (2, 3, 0, 4, 1, 5))
    return T.reshape(y, (B, C, 2 * h, 2 * w))


def ps_recursive(x: Tensor, p: int, spec: PyramidSpec, scan: ScanFn) -> Tensor:
    """Pyramid scan from level ``p`` down to ``spec.levels``.

    ``scan(region_batch, level)`` is the per-level four-way scan. Regions of
    one level are folded into the batch axis so they share one recurrence
    sweep; this is exactly the per-region recursion since each region is
    scanned independently.
    """
    if p > spec.levels:
        raise ValueError(f"level {p} beyond pyramid depth {spec.levels}")
    if spec.average == "uniform":
        return _ps_uniform(x, p, spec, scan)
    here = scan(x, p)
    if p == spec.levels:
        return here
    below = cat_batch(ps_recursive(split_batch(x), p + 1, spec, scan))
    return T.add(T.scale(here, 0.5), T.scale(below, 0.5))


def _ps_uniform(x: Tensor, p: int, spec: PyramidSpec, scan: ScanFn) -> Tensor:
    n = spec.levels - p + 1
    out = None
    regions = x
    for level in range(p, spec.levels + 1):
        y = scan(regions, level)
        for _ in range(level - p):
            y = cat_batch(y)
        out = y if out is None else T.add(out, y)
        if level < spec.levels:
            regions = split_batch(regions)
    return T.scale(out, 1.0 / n)


class PyramidScan(Module):
    """Per-level Scan4 weights (optionally one set shared across levels)."""

    def __init__(self, channels: int, spec: PyramidSpec, d_state: int = 16, share_levels: bool = False,
                 rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        n = 1 if share_levels else spec.levels + 1
        self.scans = [Scan4(channels, d_state, rng=rng, dtype=dtype) for _ in range(n)]

    def scan_for(self, level: int) -> Scan4:
        return self.scans[min(level, len(self.scans) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        self.spec.check_size(x.shape[2], x.shape[3])
        return ps_recursive(x, 0, self.spec, lambda r, level: self.scan_for(level)(r))


class PSS(Module):
    """Pre-norm pyramid scan with a residual connection."""

    def __init__(self, channels: int, spec: PyramidSpec, d_state: int = 16, share_levels: bool = False,
                 rng=None, dtype=np.float32):
        self.norm_w = T.parameter(np.ones(channels, dtype=dtype))
        self.norm_b = T.parameter(np.zeros(channels, dtype=dtype))
        self.pyramid = PyramidScan(channels, spec, d_state, share_levels, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.layer_norm(x, axis=1, weight=self.norm_w, bias=self.norm_b)
        return T.add(x, self.pyramid(h))


def pss_chain(x: Tensor, blocks: Sequence[PSS]) -> Tensor:
    """Apply the M PSS blocks in sequence; output shape equals input shape."""
    if not blocks:
        raise ValueError("PSS chain needs at least one block")
    for block in blocks:
        x = block(x)
    return x
