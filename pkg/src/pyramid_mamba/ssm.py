"""State-space kernels.

Two families live here. The time-invariant reference path works on plain
arrays (``discretize_zoh`` -> ``ssm_recurrent`` / ``ssm_kernel`` + ``ssm_conv``)
and exists so the recurrent and convolutional forms can be checked against
each other. The selective path (``selective_scan`` and ``scan4``) is built on
autodiff tensors and is what the decoder trains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Module, ShapeError, Tensor

SERIES_THRESHOLD = 1e-4


class SsmParameterError(ValueError):
    pass


@dataclass
class SsmParams:
    """Continuous diagonal SSM, one row per channel.

    ``A``, ``B`` and ``C_out`` have shape (C, N); ``delta`` has shape (C,).
    """

    A: np.ndarray
    B: np.ndarray
    C_out: np.ndarray
    delta: np.ndarray


@dataclass
class DiscreteSsm:
    A_bar: np.ndarray
    B_bar: np.ndarray
    C_out: np.ndarray


def _as2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64) if np.asarray(a).dtype.kind != "f" else np.asarray(a)
    return a.reshape(1, 1) if a.ndim == 0 else (a.reshape(1, -1) if a.ndim == 1 else a)


def make_params(A, B, C_out, delta) -> SsmParams:
    """Build params, promoting scalars and 1-D state vectors to a single channel."""
    A2, B2, C2 = _as2d(A), _as2d(B), _as2d(C_out)
    d = np.asarray(delta, dtype=A2.dtype).reshape(-1)
    return SsmParams(A2, B2, C2, d)


def discretize_zoh(params: SsmParams) -> DiscreteSsm:
    """Zero-order hold: A_bar = exp(dA), B_bar = (dA)^-1 (exp(dA) - 1) d B."""
    A, B, delta = params.A, params.B, params.delta
    if A.shape != B.shape or A.shape != params.C_out.shape:
        raise ShapeError("discretize_zoh", f"A {A.shape}, B {B.shape}, C {params.C_out.shape} must match")
    if delta.shape != (A.shape[0],):
        raise ShapeError("discretize_zoh", f"delta shape {delta.shape} != ({A.shape[0]},)")
    if np.any(delta <= 0):
        raise SsmParameterError("step size delta must be > 0")
    if np.any(A >= 0):
        raise SsmParameterError("diagonal A must be strictly negative")
    z = delta[:, None] * A
    A_bar = np.exp(z)
    small = np.abs(z) < SERIES_THRESHOLD
    # (e^z - 1)/z -> 1 + z/2 near zero; the direct quotient cancels catastrophically there
    safe_z = np.where(small, 1.0, z)
    phi = np.where(small, 1.0 + z / 2, (A_bar - 1.0) / safe_z)
    B_bar = phi * delta[:, None] * B
    return DiscreteSsm(A_bar, B_bar, params.C_out.copy())


def _seq2d(x, channels: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 1:
        if channels != 1:
            raise ShapeError("ssm", f"1-D input needs a single-channel SSM, got {channels} channels")
        return x[None, :], True
    if x.shape[0] != channels:
        raise ShapeError("ssm", f"input has {x.shape[0]} channels, SSM has {channels}")
    return x, False


def ssm_recurrent(d: DiscreteSsm, x) -> np.ndarray:
    """h_t = A_bar h_{t-1} + B_bar x_t, y_t = C h_t with h_{-1} = 0; x is (C, L) or (L,)."""
    xs, squeeze = _seq2d(x, d.A_bar.shape[0])
    L = xs.shape[1]
    y = np.zeros(xs.shape, dtype=np.result_type(xs, d.A_bar))
    h = np.zeros(d.A_bar.shape, dtype=y.dtype)
    for t in range(L):
        h = d.A_bar * h + d.B_bar * xs[:, t : t + 1]
        y[:, t] = (d.C_out * h).sum(axis=1)
    return y[0] if squeeze else y


def ssm_kernel(d: DiscreteSsm, L: int) -> np.ndarray:
    """K_t = C A_bar^t B_bar for t < L; shape (C, L)."""
    if L < 1:
        raise ShapeError("ssm_kernel", f"kernel length must be >= 1, got {L}")
    powers = d.A_bar[:, None, :] ** np.arange(L)[None, :, None]
    K = (d.C_out[:, None, :] * powers * d.B_bar[:, None, :]).sum(axis=2)
    return K


def ssm_conv(x, K) -> np.ndarray:
    """Causal convolution y_t = sum_{s<=t} K_{t-s} x_s, computed with an FFT."""
    x = np.asarray(x)
    K = np.asarray(K)
    squeeze = x.ndim == 1
    x2 = x[None] if squeeze else x
    K2 = K[None] if K.ndim == 1 else K
    if K2.shape[0] != x2.shape[0] or K2.shape[1] < x2.shape[1]:
        raise ShapeError("ssm_conv", f"kernel {K2.shape} incompatible with input {x2.shape}")
    L = x2.shape[1]
    n = 1 << int(np.ceil(np.log2(max(2 * L, 2))))
    y = np.fft.irfft(np.fft.rfft(x2, n) * np.fft.rfft(K2[:, :L], n), n)[:, :L]
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# selective scan


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a[..., :, None] * b[..., None, :] without a unit-stride broadcast in the inner loop."""
    out = np.repeat(a[..., None], b.shape[-1], axis=-1)
    out *= b[..., None, :]
    return out


def selective_scan_core(
    u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, memoryless: bool = False
) -> Tensor:
    """Time-varying diagonal recurrence with exact-ZOH A and Euler B.

    ``u`` and ``delta`` are (..., L, E); ``Bm`` and ``Cm`` are (..., L, N); ``A``
    is (E, N) or broadcastable to (..., E, N). ``memoryless`` forces
    exp(delta_t A) to 0. Returns y of shape (..., L, E)::

        h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t
        y_t = h_t . C_t
    """
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, Bm.data, Cm.data
    if ud.shape != dd.shape:
        raise ShapeError("selective_scan", f"u {ud.shape} vs delta {dd.shape}")
    if Bd.shape != Cd.shape or Bd.shape[:-1] != ud.shape[:-1]:
        raise ShapeError("selective_scan", f"B {Bd.shape} / C {Cd.shape} do not match u {ud.shape}")
    L = ud.shape[-2]
    # time-major copies so every step reads one contiguous slab
    ut, dt = np.moveaxis(ud, -2, 0), np.moveaxis(dd, -2, 0)
    Bt, Ct = np.moveaxis(Bd, -2, 0), np.moveaxis(Cd, -2, 0)
    if memoryless:
        dA = np.zeros(dt.shape + (Ad.shape[-1],), dtype=ud.dtype)
    else:
        dA = np.repeat(dt[..., None], Ad.shape[-1], axis=-1)
        dA *= Ad
        np.exp(dA, out=dA)
    du = dt * ut
    H = _outer(du, Bt)  # (L, ..., E, N), becomes the state history in place
    for t in range(1, L):
        H[t] += dA[t] * H[t - 1]
    y = np.moveaxis(np.matmul(H, Ct[..., None])[..., 0], 0, -2)

    def grad_fn(gy):
        gyt = np.moveaxis(gy, -2, 0)
        gC = np.matmul(gyt[..., None, :], H)[..., 0, :]
        G = _outer(gyt, Ct)
        for t in range(L - 2, -1, -1):
            G[t] += dA[t + 1] * G[t + 1]
        GB = np.matmul(G, Bt[..., None])[..., 0]
        gB = np.matmul(du[..., None, :], G)[..., 0, :]
        # G is no longer needed: turn it into dL/d(dA) in place
        gdA = G
        gdA[1:] *= H[:-1]
        gdA[0] = 0
        gdA *= dA
        gdelta = np.einsum("...en,...en->...e", gdA, Ad) + GB * ut
        gu = GB * dt
        gA = T._unbroadcast(np.einsum("l...en,l...e->...en", gdA, dt), Ad.shape)
        back = lambda a: np.moveaxis(a, 0, -2)
        return back(gu), back(gdelta), gA, back(gB), back(gC)

    return T._node(y, (u, delta, A, Bm, Cm), grad_fn)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SelectiveScan(Module):
    """Mamba-style selective SSM over sequences of ``d_model`` channels.

    ``stack`` independent parameter sets are held along a leading axis so
    several scan directions run as one batched recurrence. Inputs are then
    (stack, B, L, d_model).
    """

    def __init__(
        self,
        d_model: int,
        d_state: int = 16,
        expand: int = 1,
        stack: int | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        E = expand * d_model
        self.d_model, self.d_state, self.d_inner, self.stack = d_model, d_state, E, stack
        lead = () if stack is None else (stack, 1)
        vlead = () if stack is None else (stack, 1, 1)
        self.in_proj = T.parameter(_uniform(rng, lead + (d_model, 2 * E), d_model, dtype))
        self.dt_w = T.parameter(_uniform(rng, lead + (E, E), E, dtype))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=vlead + (E,)))
        # inverse softplus so that softplus(dt_b) lands in [dt_min, dt_max]
        self.dt_b = T.parameter((dt + np.log(-np.expm1(-dt))).astype(dtype))
        self.B_w = T.parameter(_uniform(rng, lead + (E, d_state), E, dtype))
        self.B_b = T.parameter(np.zeros(vlead + (d_state,), dtype=dtype))
        self.C_w = T.parameter(_uniform(rng, lead + (E, d_state), E, dtype))
        self.C_b = T.parameter(np.zeros(vlead + (d_state,), dtype=dtype))
        a_init = np.broadcast_to(np.arange(1, d_state + 1, dtype=np.float64), (E, d_state))
        alead = () if stack is None else (stack, 1)
        self.A_log = T.parameter(np.broadcast_to(np.log(a_init), alead + (E, d_state)).astype(dtype))
        self.D = T.parameter(np.ones(vlead + (E,), dtype=dtype))
        self.out_proj = T.parameter(_uniform(rng, lead + (E, d_model), E, dtype))

    def A(self) -> Tensor:
        return T.scale(T.exp(self.A_log), -1.0)

    def __call__(self, x: Tensor, memoryless: bool = False) -> Tensor:
        return selective_scan(x, self, memoryless=memoryless)


def selective_scan(x: Tensor, w: SelectiveScan, memoryless: bool = False) -> Tensor:
    """(B, L, C) -> (B, L, C); with stacked weights, (S, B, L, C) -> (S, B, L, C).

    ``memoryless`` zeroes the state carry (A_bar = 0), a test seam.
    """
    if x.shape[-1] != w.d_model:
        raise ShapeError("selective_scan", f"input has {x.shape[-1]} channels, weights expect {w.d_model}")
    E = w.d_inner
    xz = T.linear(x, w.in_proj)
    u = T.silu(xz[..., :E])
    z = xz[..., E:]
    delta = T.softplus(T.linear(u, w.dt_w, w.dt_b))
    Bm = T.linear(u, w.B_w, w.B_b)
    Cm = T.linear(u, w.C_w, w.C_b)
    y = selective_scan_core(u, delta, w.A(), Bm, Cm, memoryless=memoryless)
    y = T.add(y, T.mul(u, w.D, broadcast=True))
    y = T.mul(y, T.silu(z))
    return T.linear(y, w.out_proj)


# ---------------------------------------------------------------------------
# four-way 2-D scan

DIRECTIONS = ("row_forward", "row_backward", "col_forward", "col_backward")


def flatten_orders(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (4, B, H*W, C) in the four traversal orders."""
    B, C, H, W = x.shape
    rows = T.reshape(T.transpose(x, (0, 2, 3, 1)), (B, H * W, C))
    cols = T.reshape(T.transpose(x, (0, 3, 2, 1)), (B, W * H, C))
    return T.stack([rows, T.flip(rows, 1), cols, T.flip(cols, 1)], axis=0)


def unflatten_orders(seqs: Tensor, H: int, W: int) -> list[Tensor]:
    """Inverse of :func:`flatten_orders`; returns four (B, H, W, C) maps."""
    _, B, _, C = seqs.shape
    r_f, r_b, c_f, c_b = (seqs[k] for k in range(4))
    out = [T.reshape(r_f, (B, H, W, C)), T.reshape(T.flip(r_b, 1), (B, H, W, C))]
    for s in (c_f, T.flip(c_b, 1)):
        out.append(T.transpose(T.reshape(s, (B, W, H, C)), (0, 2, 1, 3)))
    return out


class Scan4(Module):
    """Four directional selective scans, summed and projected back to C channels."""

    def __init__(self, channels: int, d_state: int = 16, rng=None, dtype=np.float32, expand: int = 1):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.ssm = SelectiveScan(channels, d_state, expand=expand, stack=4, rng=rng, dtype=dtype)
        self.proj_w = T.parameter(_uniform(rng, (channels, channels), channels, dtype))
        self.proj_b = T.parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor, memoryless: bool = False) -> Tensor:
        return scan4(x, self, memoryless=memoryless)


def scan4(x: Tensor, w: Scan4, memoryless: bool = False) -> Tensor:
    """(B, C, H, W) -> (B, C, H, W)."""
    if x.ndim != 4 or x.shape[1] != w.channels:
        raise ShapeError("scan4", f"expected (B, {w.channels}, H, W), got {x.shape}")
    _, _, H, W = x.shape
    seqs = selective_scan(flatten_orders(x), w.ssm, memoryless=memoryless)
    maps = unflatten_orders(seqs, H, W)
    total = T.add(T.add(maps[0], maps[1]), T.add(maps[2], maps[3]))
    out = T.linear(total, w.proj_w, w.proj_b)
    return T.transpose(out, (0, 3, 1, 2))
