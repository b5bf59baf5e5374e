"""Finite-difference gradient checks for every differentiable op and the composite blocks.

Each case builds float64 leaves and a function of them; the scalar probed is
``sum(out * R)`` for a fixed random ``R`` so that every output element
contributes. Large parameter arrays are spot-checked at a few random entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .blocks import CSS, LEC, MFF, CssConfig, FeaturePyramid
from .oracles import relative_error
from .pyramid import PSS, PyramidSpec, cat_batch, ps_recursive, split_batch
from .ssm import Scan4, SelectiveScan, selective_scan_core
from .tensor import Tensor

STEP = 1e-3
TOLERANCE = 1e-4
MAX_ENTRIES = 6

Build = Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], Tensor]]]


@dataclass
class GradResult:
    name: str
    error: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _leaf(rng, *shape, low=None):
    a = rng.standard_normal(shape)
    if low is not None:
        # keep clear of kinks and branch points
        a = np.sign(a) * (np.abs(a) + low)
    return T.tensor(a, requires_grad=True)


def _module(build_module) -> Build:
    def build(rng):
        mod, x, fn = build_module(rng)
        return [x] + mod.parameters(), fn
    return build


def _unary(op, low=None):
    def build(rng):
        x = _leaf(rng, 3, 4, low=low)
        return [x], lambda: op(x)
    return build


def _binary(op, shape_b=(3, 4)):
    def build(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, *shape_b)
        return [a, b], lambda: op(a, b)
    return build


def _scan_inputs(rng, lead=(2,), L=5, E=3, N=2):
    u = _leaf(rng, *lead, L, E)
    delta = T.tensor(rng.uniform(0.1, 0.6, lead + (L, E)), requires_grad=True)
    A = T.tensor(-rng.uniform(0.5, 2.0, (E, N)), requires_grad=True)
    Bm, Cm = _leaf(rng, *lead, L, N), _leaf(rng, *lead, L, N)
    return [u, delta, A, Bm, Cm]


def _core(rng):
    leaves = _scan_inputs(rng)
    return leaves, lambda: selective_scan_core(*leaves)


def _getitem_fancy(rng):
    x = _leaf(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    return [x], lambda: T.getitem(x, idx)


def _conv(stride=1, padding=1, groups=1, c=4, o=4, k=3):
    def build(rng):
        x, w, b = _leaf(rng, 2, c, 5, 5), _leaf(rng, o, c // groups, k, k), _leaf(rng, o)
        return [x, w, b], lambda: T.conv2d(x, w, b, stride, padding, groups)
    return build


def _layer_norm(rng):
    x, w, b = _leaf(rng, 2, 4, 3), _leaf(rng, 4), _leaf(rng, 4)
    return [x, w, b], lambda: T.layer_norm(x, axis=1, weight=w, bias=b)


def _linear_stacked(rng):
    x, w, b = _leaf(rng, 4, 2, 3, 5), _leaf(rng, 4, 1, 5, 2), _leaf(rng, 4, 1, 1, 2)
    return [x, w, b], lambda: T.linear(x, w, b)


def _selective(rng):
    mod = SelectiveScan(3, d_state=2, rng=rng, dtype=np.float64)
    x = _leaf(rng, 2, 6, 3)
    return mod, x, lambda: mod(x)


def _scan4(rng):
    mod = Scan4(2, d_state=2, rng=rng, dtype=np.float64)
    x = _leaf(rng, 1, 2, 4, 4)
    return mod, x, lambda: mod(x)


def _pyramid(rng):
    spec = PyramidSpec(levels=2, chain=1)
    x = _leaf(rng, 1, 2, 4, 4)
    w = _leaf(rng, 3, 2)  # one channel gain per level

    def scan(r, level):
        g = T.reshape(T.getitem(w, level), (1, 2, 1, 1))
        return T.mul(T.silu(r), g, broadcast=True)

    return [x, w], lambda: ps_recursive(x, 0, spec, scan)


def _pss(rng):
    # the block normalises over channels; two channels would make that nearly a sign function
    mod = PSS(4, PyramidSpec(levels=1, chain=1), d_state=2, rng=rng, dtype=np.float64)
    x = _leaf(rng, 1, 4, 4, 4)
    return mod, x, lambda: mod(x)


def _lec(rng):
    mod = LEC(2, 3, rng=rng, dtype=np.float64)
    x = _leaf(rng, 1, 2, 4, 4)
    return mod, x, lambda: mod(x)


def _css(rng):
    cfg = CssConfig(4, kernels=(3, 5), pyramid=PyramidSpec(levels=1, chain=2), d_state=2)
    mod = CSS(cfg, rng=rng, dtype=np.float64)
    x = _leaf(rng, 1, 4, 4, 4)
    return mod, x, lambda: mod(x)


def _mff(rng):
    mod = MFF((2, 3), (8, 4), 3, rng=rng, dtype=np.float64)
    x0 = _leaf(rng, 1, 2, 8, 8)
    x1 = T.tensor(rng.standard_normal((1, 3, 4, 4)))
    return mod, x0, lambda: mod(FeaturePyramid([x0, x1]))


CASES: dict[str, Build] = {
    "add": _binary(T.add),
    "add_broadcast": _binary(lambda a, b: T.add(a, b, broadcast=True), (1, 4)),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "mul_broadcast": _binary(lambda a, b: T.mul(a, b, broadcast=True), (3, 1)),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "sum_all": _unary(T.sum_all),
    "mean_all": _unary(T.mean_all),
    "exp": _unary(T.exp),
    "sigmoid": _unary(T.sigmoid),
    "silu": _unary(T.silu),
    "softplus": _unary(T.softplus),
    "relu": _unary(T.relu, low=0.1),
    "mse": _binary(T.mse),
    "reshape": _unary(lambda x: T.reshape(x, (2, 6))),
    "transpose": _unary(lambda x: T.transpose(x, (1, 0))),
    "flip": _unary(lambda x: T.flip(x, 1)),
    "getitem": _unary(lambda x: T.getitem(x, (slice(1, 3), slice(None, None, 2)))),
    "getitem_fancy": _getitem_fancy,
    "concat": _binary(lambda a, b: T.concat([a, b, a], axis=1), (3, 2)),
    "stack": _binary(lambda a, b: T.stack([a, b], axis=1)),
    "linear": lambda rng: (lambda x, w, b: ([x, w, b], lambda: T.linear(x, w, b)))(
        _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    ),
    "linear_stacked": _linear_stacked,
    "layer_norm": _layer_norm,
    "conv2d": _conv(),
    "conv2d_stride2": _conv(stride=2),
    "conv2d_pointwise": _conv(padding=0, o=3, k=1),
    "conv2d_depthwise": _conv(groups=4),
    "conv2d_grouped": _conv(groups=2, o=6),
    "bilinear_resize": _unary(lambda x: T.bilinear_resize(T.reshape(x, (1, 1, 3, 4)), 6, 7)),
    "split_cat_batch": lambda rng: (lambda x: ([x], lambda: T.scale(cat_batch(split_batch(x)), 1.0)))(
        _leaf(rng, 2, 1, 4, 4)
    ),
    "selective_scan_core": _core,
    "selective_scan": _module(_selective),
    "scan4": _module(_scan4),
    "ps_recursive": _pyramid,
    "pss_block": _module(_pss),
    "lec_block": _module(_lec),
    "css_block": _module(_css),
    "mff_block": _module(_mff),
}


def check(name: str, seed: int = 0, h: float = STEP, max_entries: int = MAX_ENTRIES) -> GradResult:
    """Worst relative error over all leaves of case ``name``."""
    rng = np.random.default_rng(seed)
    leaves, fn = CASES[name](rng)
    probe_rng = np.random.default_rng(seed + 1)
    out = fn()
    R = probe_rng.standard_normal(out.shape)

    def objective() -> float:
        with T.no_grad():
            return float((fn().data * R).sum())

    for leaf in leaves:
        leaf.grad = None
    T.backward(T.sum_all(T.mul(out, T.tensor(R))))
    worst, checked = 0.0, 0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > max_entries:
            picks = probe_rng.choice(flat.size, max_entries, replace=False)
        numeric, expected = [], []
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = objective()
            flat[i] = orig - h
            fm = objective()
            flat[i] = orig
            numeric.append((fp - fm) / (2 * h))
            expected.append(analytic.reshape(-1)[i])
        worst = max(worst, relative_error(expected, numeric))
        checked += len(picks)
    return GradResult(name, worst, checked)


def check_all(seed: int = 0) -> list[GradResult]:
    return [check(name, seed) for name in CASES]

