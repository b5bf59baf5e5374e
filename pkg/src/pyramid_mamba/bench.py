"""Throughput of the scan kernels: ``pyramid-mamba bench``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pyramid import PyramidScan, PyramidSpec
from .ssm import discretize_zoh, make_params, ssm_conv, ssm_kernel, ssm_recurrent


@dataclass
class BenchRow:
    variant: str
    size: int
    elements: int
    seconds: float

    @property
    def throughput(self) -> float:
        return self.elements / self.seconds if self.seconds > 0 else float("inf")

    def line(self) -> str:
        return f"{self.variant:<14} {self.size:>6} {self.elements:>10} {self.seconds:>10.4f} {self.throughput:>14.4g}"


HEADER = f"{'variant':<14} {'size':>6} {'elements':>10} {'seconds':>10} {'elements/s':>14}"


def _best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_scans(lengths=(256, 1024, 4096), channels: int = 16, state: int = 16, repeats: int = 3,
                seed: int = 0) -> list[BenchRow]:
    rng = np.random.default_rng(seed)
    params = make_params(
        -rng.uniform(0.05, 2.0, (channels, state)),
        rng.standard_normal((channels, state)),
        rng.standard_normal((channels, state)),
        rng.uniform(0.01, 0.5, channels),
    )
    d = discretize_zoh(params)
    rows = []
    for L in lengths:
        x = rng.standard_normal((channels, L))
        rows.append(BenchRow("recurrent", L, channels * L, _best_of(lambda: ssm_recurrent(d, x), repeats)))
        rows.append(BenchRow("kernel", L, channels * L, _best_of(lambda: ssm_conv(x, ssm_kernel(d, L)), repeats)))
    return rows


def bench_pyramid(levels=(0, 1, 2), channels: int = 16, size: int = 32, batch: int = 2, state: int = 16,
                  repeats: int = 3, seed: int = 0) -> list[BenchRow]:
    """Forward pyramid scans over the same (batch, channels, size, size) input for each P."""
    x = T.tensor(np.random.default_rng(seed).standard_normal((batch, channels, size, size)).astype(np.float32))
    rows = []
    for P in levels:
        scan = PyramidScan(channels, PyramidSpec(levels=P, chain=1), state, rng=np.random.default_rng(seed))
        with T.no_grad():
            seconds = _best_of(lambda: scan(x), repeats)
        rows.append(BenchRow("ps_recursive", P, x.data.size, seconds))
    return rows


def run_bench(repeats: int = 3) -> list[BenchRow]:
    return bench_scans(repeats=repeats) + bench_pyramid(repeats=repeats)
