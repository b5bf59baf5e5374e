"""Dense float tensors with reverse-mode automatic differentiation.

Only the operation set the Pyramid-Mamba pipeline actually uses is provided.
Arrays are ``numpy.float32`` by default; ``float64`` is carried through
unchanged so that finite-difference checks can run at full precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op
        self.detail = detail


class Tensor:
    """An array node in an autodiff graph.

    ``_parents`` and ``_backward`` are filled in by the op that produced the
    tensor; leaves have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray would promote a 0-d scalar to shape (1,)
        self.data: np.ndarray = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {self.name or self.shape}")

    def backward(self) -> None:
        backward(self)

    # operator sugar, all strict-shape
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=dtype or np.asarray(data).dtype), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class no_grad:
    """Context manager; ops inside it build no graph."""

    _depth = 0

    def __enter__(self):
        no_grad._depth += 1
        return self

    def __exit__(self, *exc):
        no_grad._depth -= 1
        return False


def _grad_enabled() -> bool:
    return no_grad._depth == 0


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not _grad_enabled():
        return Tensor(data)
    return _make(data, parents, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        bad = [i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q]
        if a.ndim != b.ndim:
            raise ShapeError(op, f"rank mismatch {a.shape} vs {b.shape}")
        raise ShapeError(op, f"shape mismatch {a.shape} vs {b.shape} on axes {bad}")


# ---------------------------------------------------------------------------
# backward driver


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.dtype != parent.dtype:
                pg = pg.astype(parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor, broadcast: bool = False) -> Tensor:
    if not broadcast:
        _check_same("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor, broadcast: bool = False) -> Tensor:
    if not broadcast:
        _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    inv = x.dtype.type(1.0 / n)
    return _node(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g * inv, dtype=g.dtype),)
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return _node(xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(xd.dtype.type(0), xd)
    return _node(out, (x,), lambda g: (g * _sigmoid(xd),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def mse(x: Tensor, y: Tensor) -> Tensor:
    """Mean of squared differences, as a scalar tensor."""
    _check_same("mse", x, y)
    diff = x.data - y.data
    n = diff.size
    k = diff.dtype.type(2.0 / n)
    out = np.asarray(np.mean(diff * diff), dtype=diff.dtype)
    return _node(out, (x, y), lambda g: (g * k * diff, -g * k * diff))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def flip(x: Tensor, axis: int) -> Tensor:
    return _node(np.ascontiguousarray(np.flip(x.data, axis)), (x,), lambda g: (np.flip(g, axis),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _node(np.ascontiguousarray(x.data[index]), (x,), grad_fn)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat", "no operands")
    ndim = xs[0].ndim
    if not -ndim <= axis < ndim:
        raise ShapeError("concat", f"axis {axis} out of range for rank {ndim}")
    axis %= ndim
    for t in xs[1:]:
        if t.ndim != ndim:
            raise ShapeError("concat", f"rank mismatch {xs[0].shape} vs {t.shape}")
        bad = [i for i in range(ndim) if i != axis and t.shape[i] != xs[0].shape[i]]
        if bad:
            raise ShapeError("concat", f"shape mismatch {xs[0].shape} vs {t.shape} on axes {bad}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _node(np.concatenate([t.data for t in xs], axis=axis), xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    for t in xs[1:]:
        _check_same("stack", xs[0], t)
    n = len(xs)
    return _node(
        np.stack([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# ---------------------------------------------------------------------------
# linear algebra and normalization


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` may carry leading batch axes."""
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError("linear", f"in-features {x.shape[-1]} != weight rows {w.shape[-2]}")
    xd, wd = x.data, w.data
    # stacked weights (S, 1, ..., 1, C, F) against inputs (S, ...): fold the inner batch axes
    stacked = wd.ndim > 2 and xd.ndim == wd.ndim and wd.shape[0] == xd.shape[0] and all(
        d == 1 for d in wd.shape[1:-2]
    )
    x2 = xd.reshape(xd.shape[0], -1, xd.shape[-1]) if stacked else xd.reshape(-1, xd.shape[-1])
    w2 = wd.reshape(wd.shape[0], wd.shape[-2], wd.shape[-1]) if stacked else wd
    if not stacked and wd.ndim > 2:
        x2, w2 = xd, wd
    out = np.matmul(x2, w2).reshape(xd.shape[:-1] + (wd.shape[-1],))
    if b is not None:
        out = out + b.data

    def grad_fn(g):
        g2 = g.reshape(x2.shape[:-1] + (wd.shape[-1],))
        gx = _unbroadcast(np.matmul(g2, np.swapaxes(w2, -1, -2)), x2.shape).reshape(xd.shape)
        gw = _unbroadcast(np.matmul(np.swapaxes(x2, -1, -2), g2), w2.shape).reshape(wd.shape)
        if b is None:
            return gx, gw
        return gx, gw, _unbroadcast(g, b.shape)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, grad_fn)


def layer_norm(
    x: Tensor, axis: int = 1, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5
) -> Tensor:
    """Normalize along ``axis``; ``weight``/``bias`` are 1-D over that axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError("layer_norm", f"axis {axis} out of range for rank {x.ndim}")
    axis %= x.ndim
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    wd = weight.data.reshape(bshape) if weight is not None else None
    out = xhat * wd if wd is not None else xhat.copy()
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def grad_fn(g):
        gxhat = g * wd if wd is not None else g
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=axis, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
        )
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=red).reshape(weight.shape))
        if bias is not None:
            grads.append(g.sum(axis=red).reshape(bias.shape))
        return grads

    parents = [x] + [t for t in (weight, bias) if t is not None]
    return _node(out, parents, grad_fn)


# ---------------------------------------------------------------------------
# convolution


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None, stride: int, padding: int, groups: int):
    """Plain-array convolution; used directly by the frozen encoders."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if kh == 1 and kw == 1 and groups == 1:
        xs = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], xs, optimize=True)
    elif groups == c and cg == 1 and o == c:
        out = np.zeros((n, o, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                out += patch * w[None, :, 0, i, j, None, None]
    else:
        out = np.empty((n, o, ho, wo), dtype=x.dtype)
        og = o // groups
        for gi in range(groups):
            cols = _im2col(xp[:, gi * cg : (gi + 1) * cg], kh, kw, stride, ho, wo)
            wmat = w[gi * og : (gi + 1) * og].reshape(og, -1)
            out[:, gi * og : (gi + 1) * og] = (cols @ wmat.T).reshape(n, ho, wo, og).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    return out


def conv2d(
    x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1
) -> Tensor:
    """2-D cross-correlation on NCHW input with OIkk weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups:
        raise ShapeError("conv2d", f"channels (in={c}, out={o}) not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError("conv2d", f"weight axis 1 is {cg}, expected in_channels/groups = {c // groups}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError("conv2d", f"bias shape {bias.shape} != ({o},)")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {h}x{wd} on axes [2, 3]")
    xd, wdat = x.data, w.data
    out = conv2d_forward(xd, wdat, None if bias is None else bias.data, stride, padding, groups)

    def grad_fn(g):
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wdat)
        if groups == c and cg == 1 and o == c:
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                    gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                    gxp[sl] += g * wdat[None, :, 0, i, j, None, None]
        else:
            og = o // groups
            for gi in range(groups):
                cs, os_ = slice(gi * cg, (gi + 1) * cg), slice(gi * og, (gi + 1) * og)
                cols = _im2col(xp[:, cs], kh, kw, stride, ho, wo)
                gmat = g[:, os_].transpose(0, 2, 3, 1).reshape(-1, og)
                gw[os_] = (gmat.T @ cols).reshape(og, cg, kh, kw)
                gcols = gmat @ wdat[os_].reshape(og, -1)
                gxp[:, cs] += _col2im(gcols, xp[:, cs].shape, kh, kw, stride, ho, wo)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, grad_fn)


# ---------------------------------------------------------------------------
# resampling


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, align_corners=False with edge clamping."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes of a plain array."""
    ry = bilinear_matrix(x.shape[-2], out_h, x.dtype)
    rx = bilinear_matrix(x.shape[-1], out_w, x.dtype)
    return np.matmul(np.matmul(ry, x), rx.T)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim < 2:
        raise ShapeError("bilinear_resize", f"need at least 2 axes, got {x.shape}")
    ry = bilinear_matrix(x.shape[-2], out_h, x.dtype)
    rx = bilinear_matrix(x.shape[-1], out_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return _node(out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Moments and hyper-parameters for Adam with decoupled weight decay."""

    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def init_for(self, params: Sequence[Tensor]) -> None:
        self.first_moment = [np.zeros_like(p.data) for p in params]
        self.second_moment = [np.zeros_like(p.data) for p in params]
        self.step_count = 0


def adam_step(params: Sequence[Tensor], state: AdamState, grads: Sequence[np.ndarray] | None = None) -> AdamState:
    """One in-place AdamW update; ``grads`` defaults to each parameter's ``.grad``."""
    params = list(params)
    if not state.first_moment:
        state.init_for(params)
    if len(state.first_moment) != len(params):
        raise ShapeError("adam_step", f"{len(state.first_moment)} moment buffers for {len(params)} params")
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.shape or g.shape != p.shape:
            raise ShapeError("adam_step", f"moment/grad shape {m.shape}/{g.shape} vs param {p.shape}")
        dt = p.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * g * g
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.epsilon))
        if state.weight_decay:
            p.data *= dt(1.0 - state.learning_rate * state.weight_decay)
        p.data -= dt(state.learning_rate) * update
    return state


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class Module:
    """Parameter container; attributes holding tensors or sub-modules are walked in order."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError("load_state_dict", f"{name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def _walk(val, name: str):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")
