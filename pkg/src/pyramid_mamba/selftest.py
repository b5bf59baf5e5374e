"""Quick invariant and oracle suite behind ``pyramid-mamba selftest``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import metrics, oracles
from . import tensor as T
from .gradcheck import check_all
from .pyramid import PyramidSpec, cat, ps_recursive, split
from .ssm import discretize_zoh, make_params, ssm_conv, ssm_kernel, ssm_recurrent


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name:<22} {self.detail} ({self.seconds:.2f}s)"


def random_stable_ssm(rng: np.random.Generator, channels: int, n: int):
    A = -rng.uniform(0.05, 2.0, (channels, n))
    B = rng.standard_normal((channels, n))
    C = rng.standard_normal((channels, n))
    delta = rng.uniform(0.01, 0.5, channels)
    return make_params(A, B, C, delta)


def scan_equivalence(draws: int = 20, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        n, L, c = int(rng.integers(1, 9)), int(rng.integers(1, 65)), int(rng.integers(1, 4))
        d = discretize_zoh(random_stable_ssm(rng, c, n))
        x = rng.standard_normal((c, L))
        worst = max(worst, float(np.abs(ssm_recurrent(d, x) - ssm_conv(x, ssm_kernel(d, L))).max()))
    return worst < 1e-5, f"max |recurrent - kernel| = {worst:.2e} over {draws} draws"


def zoh_checks() -> tuple[bool, str]:
    d = discretize_zoh(make_params(-1.0, 1.0, 1.0, np.log(2.0)))
    scalar = abs(d.A_bar.item() - 0.5) < 1e-6 and abs(d.B_bar.item() - 0.5) < 1e-6
    # delta -> 0: A_bar -> 1 and B_bar / delta -> B
    tiny = discretize_zoh(make_params(-3.0, 2.0, 1.0, 1e-9))
    limit = abs(tiny.A_bar.item() - 1.0) < 1e-8 and abs(tiny.B_bar.item() / 1e-9 - 2.0) < 1e-6
    # series branch vs exact expm1 quotient evaluated in double precision
    worst = 0.0
    for z in (-9.9e-5, -5e-5, -1e-6, -1e-9):
        got = discretize_zoh(make_params(z, 1.0, 1.0, 1.0)).B_bar.item()
        exact = np.expm1(z) / z
        worst = max(worst, abs(got - exact) / abs(exact))
    ok = scalar and limit and worst < 1e-6
    return ok, f"A_bar={d.A_bar.item():.7f} B_bar={d.B_bar.item():.7f} series rel err {worst:.1e}"


def split_cat_identity(shapes: int = 50, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(shapes):
        b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        h, w = 2 * int(rng.integers(1, 9)), 2 * int(rng.integers(1, 9))
        x = T.tensor(rng.standard_normal((b, c, h, w)).astype(np.float32))
        if not np.array_equal(cat(split(x)).data, x.data):
            return False, f"cat(split(x)) != x for shape {(b, c, h, w)}"
    return True, f"bitwise identity on {shapes} shapes"


def pyramid_checks(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    spec = PyramidSpec(levels=2, chain=1)
    x = T.tensor(rng.standard_normal((2, 3, 8, 8)))
    ident = np.array_equal(ps_recursive(x, 0, spec, lambda r, p: r).data, x.data)
    gains = rng.uniform(0.5, 2.0, 3)

    def scan_np(r, p):
        return np.tanh(r * gains[p]) + p * r[:, :, :1, :1]

    got = ps_recursive(x, 0, spec, lambda r, p: T.tensor(scan_np(r.data, p))).data
    err = float(np.abs(got - oracles.pyramid_unrolled(x.data, 2, scan_np)).max())
    return ident and err < 1e-6, f"identity scan exact: {ident}, unrolled 3-level oracle err {err:.1e}"


def gradient_checks(seed: int = 0) -> tuple[bool, str]:
    results = check_all(seed)
    bad = [r.name for r in results if not r.ok]
    worst = max(results, key=lambda r: r.error)
    detail = f"{len(results)} cases, worst {worst.name} {worst.error:.1e}"
    return not bad, detail + (f"; failing: {', '.join(bad)}" if bad else "")


def random_metric_instance(rng: np.random.Generator):
    n = int(rng.integers(4, 30))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    # coarse scores so ties occur
    scores = rng.integers(0, 6, n) / 5.0 + rng.choice([0.0, 0.01], n)
    return scores, labels


def random_pro_instance(rng: np.random.Generator):
    maps, masks = [], []
    for _ in range(int(rng.integers(1, 3))):
        h, w = int(rng.integers(4, 9)), int(rng.integers(4, 9))
        mask = rng.random((h, w)) < 0.25
        mask[0, 0] = True
        mask[-1, -1] = False
        maps.append(np.round(rng.random((h, w)) + 0.4 * mask, 1))
        masks.append(mask.astype(np.uint8))
    return maps, masks


def metric_oracles(instances: int = 200, seed: int = 0, tol: float = 1e-9) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        s, y = random_metric_instance(rng)
        worst = max(
            worst,
            abs(metrics.auroc(s, y) - oracles.auroc_pairs(s, y)),
            abs(metrics.average_precision(s, y) - oracles.average_precision_loop(s, y)),
            abs(metrics.f1max(s, y) - oracles.f1max_loop(s, y)),
        )
        maps, masks = random_pro_instance(rng)
        limit = float(rng.choice([0.05, 0.3, 1.0]))
        worst = max(worst, abs(metrics.aupro(maps, masks, limit) - oracles.aupro_loop(maps, masks, limit)))
    return worst < tol, f"max deviation {worst:.1e} over {instances} instances"


def metric_examples() -> tuple[bool, str]:
    a = metrics.auroc([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    ap = metrics.average_precision([0.9, 0.8, 0.7], [1, 0, 1])
    f1 = metrics.f1max([0.9, 0.8, 0.1], [1, 0, 1])
    ok = a == 0.75 and abs(ap - 5 / 6) < 1e-12 and abs(f1 - 0.8) < 1e-12
    return ok, f"auroc {a} ap {ap:.4f} f1max {f1:.4f}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "scan_equivalence": scan_equivalence,
    "zoh": zoh_checks,
    "split_cat": split_cat_identity,
    "pyramid": pyramid_checks,
    "gradients": gradient_checks,
    "metric_oracles": lambda: metric_oracles(50),
    "metric_examples": metric_examples,
}


def run_selftest() -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not an aborted suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
