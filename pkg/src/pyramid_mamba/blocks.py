"""Encoder, bottleneck and CSS decoder of the Pyramid-Mamba reconstruction network."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .pyramid import PSS, PyramidSpec, pss_chain
from .tensor import Module, ShapeError, Tensor, conv2d_forward

logger = logging.getLogger(__name__)


@dataclass
class FeaturePyramid:
    """Per-level feature maps, shallow to deep. ``role`` is encoder, perturbed or decoder."""

    levels: list
    role: str = "encoder"

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def arrays(self) -> list[np.ndarray]:
        return [lv.data if isinstance(lv, Tensor) else np.asarray(lv) for lv in self.levels]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(a.shape) for a in self.levels]


@dataclass
class CssConfig:
    channels: int
    kernels: tuple[int, ...] = (5, 7)
    pyramid: PyramidSpec = field(default_factory=PyramidSpec)
    use_global: bool = True
    use_local: bool = True
    d_state: int = 16
    share_levels: bool = False

    def __post_init__(self):
        if not (self.use_global or self.use_local):
            raise ValueError("CSS needs at least one of the global (PSS) or local (LEC) branches")
        for k in self.kernels:
            if k % 2 == 0:
                raise ValueError(f"LEC kernel size must be odd, got {k}")

    @property
    def branch_count(self) -> int:
        return int(self.use_global) + (len(self.kernels) if self.use_local else 0)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 1, stride: int = 1, groups: int = 1, rng=None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (c_in // groups) * k * k
        self.weight = T.parameter(_uniform(rng, (c_out, c_in // groups, k, k), fan_in, dtype))
        self.bias = T.parameter(_uniform(rng, (c_out,), fan_in, dtype))
        self.stride, self.padding, self.groups = stride, (k - 1) // 2, groups

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LEC(Module):
    """1x1 conv -> depthwise kxk conv -> 1x1 conv, hidden width equal to the input width."""

    def __init__(self, channels: int, k: int, rng=None, dtype=np.float32):
        if k % 2 == 0:
            raise ValueError(f"LEC kernel size must be odd, got {k}")
        self.k = k
        self.pw_in = Conv(channels, channels, 1, rng=rng, dtype=dtype)
        self.dw = Conv(channels, channels, k, groups=channels, rng=rng, dtype=dtype)
        self.pw_out = Conv(channels, channels, 1, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.pw_out(self.dw(self.pw_in(x)))


def lec(x: Tensor, block: LEC) -> Tensor:
    return block(x)


class CSS(Module):
    """Global PSS chain and local LEC branches, concatenated, fused by a 1x1 conv, plus residual."""

    def __init__(self, cfg: CssConfig, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        C = cfg.channels
        self.pss = (
            [PSS(C, cfg.pyramid, cfg.d_state, cfg.share_levels, rng=rng, dtype=dtype) for _ in range(cfg.pyramid.chain)]
            if cfg.use_global
            else []
        )
        self.lecs = [LEC(C, k, rng=rng, dtype=dtype) for k in cfg.kernels] if cfg.use_local else []
        self.fuse = Conv(cfg.branch_count * C, C, 1, rng=rng, dtype=dtype)

    def branches(self, x: Tensor) -> list[Tensor]:
        out = []
        if self.pss:
            out.append(pss_chain(x, self.pss))
        out.extend(block(x) for block in self.lecs)
        return out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.channels:
            raise ShapeError("css", f"input has {x.shape[1]} channels, block expects {self.cfg.channels}")
        parts = self.branches(x)
        merged = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        return T.add(self.fuse(merged), x)


def css(x: Tensor, block: CSS) -> Tensor:
    return block(x)


class MFF(Module):
    """Downsample every encoder level to the deepest resolution, concat, 1x1 conv to ``out_channels``."""

    def __init__(self, channels: Sequence[int], sizes: Sequence[int], out_channels: int, rng=None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        deepest = sizes[-1]
        self.downs = []
        for c, s in zip(channels, sizes):
            ratio = s // deepest
            if s % deepest or ratio & (ratio - 1):
                raise ShapeError("mff", f"level size {s} is not a power-of-two multiple of {deepest}")
            steps = int(np.log2(ratio))
            self.downs.append([Conv(c, c, 3, stride=2, rng=rng, dtype=dtype) for _ in range(steps)])
        self.proj = Conv(sum(channels), out_channels, 1, rng=rng, dtype=dtype)

    def down_steps(self) -> list[int]:
        return [len(d) for d in self.downs]

    def __call__(self, features: FeaturePyramid) -> Tensor:
        if len(features) != len(self.downs):
            raise ShapeError("mff", f"{len(features)} levels, block built for {len(self.downs)}")
        parts = []
        for lv, convs in zip(features.levels, self.downs):
            x = lv if isinstance(lv, Tensor) else Tensor(lv)
            for conv in convs:
                x = T.silu(conv(x))
            parts.append(x)
        merged = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        return self.proj(merged)


def mff(features: FeaturePyramid, block: MFF) -> Tensor:
    return block(features)


# ---------------------------------------------------------------------------
# frozen encoders


class EncoderError(ValueError):
    pass


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def _maxpool3x3s2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    ho, wo = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    out = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            np.maximum(out, xp[:, :, i : i + 2 * ho : 2, j : j + 2 * wo : 2], out=out)
    return out


class TinyEncoder:
    """Seeded, randomly initialised, frozen conv encoder with three levels (16, 32, 64 channels)."""

    kind = "tiny"
    channels = (16, 32, 64)
    strides = (4, 8, 16)

    def __init__(self, seed: int = 0, weights: dict[str, np.ndarray] | None = None):
        if weights is None:
            rng = np.random.default_rng(seed)
            shapes = [(8, 3), (16, 8), (32, 16), (64, 32)]
            weights = {}
            for i, (o, c) in enumerate(shapes):
                weights[f"conv{i}.weight"] = (rng.standard_normal((o, c, 3, 3)) * np.sqrt(2.0 / (c * 9))).astype(
                    np.float32
                )
                weights[f"conv{i}.bias"] = np.zeros(o, dtype=np.float32)
        self.weights = {k: np.asarray(v, dtype=np.float32) for k, v in weights.items()}
        for i in range(4):
            if f"conv{i}.weight" not in self.weights:
                raise EncoderError(f"tiny encoder weights missing conv{i}.weight")

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(self.weights)

    def __call__(self, images: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(images, dtype=np.float32)
        feats = []
        for i in range(4):
            # reflect padding keeps border features statistically like interior ones
            x = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
            x = _relu(conv2d_forward(x, self.weights[f"conv{i}.weight"], self.weights[f"conv{i}.bias"], 2, 0, 1))
            if i >= 1:
                feats.append(x)
        return feats


RESNET34_LAYERS = (3, 4, 6, 3)


def resnet34_parameter_shapes() -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes expected in a ResNet34 archive (torchvision naming)."""
    shapes: dict[str, tuple[int, ...]] = {"conv1.weight": (64, 3, 7, 7)}

    def bn(prefix, c):
        for suffix in ("weight", "bias", "running_mean", "running_var"):
            shapes[f"{prefix}.{suffix}"] = (c,)

    bn("bn1", 64)
    c_in = 64
    for li, (blocks, c) in enumerate(zip(RESNET34_LAYERS, (64, 128, 256, 512)), start=1):
        for b in range(blocks):
            p = f"layer{li}.{b}"
            shapes[f"{p}.conv1.weight"] = (c, c_in if b == 0 else c, 3, 3)
            bn(f"{p}.bn1", c)
            shapes[f"{p}.conv2.weight"] = (c, c, 3, 3)
            bn(f"{p}.bn2", c)
            if b == 0 and li > 1:
                shapes[f"{p}.downsample.0.weight"] = (c, c_in, 1, 1)
                bn(f"{p}.downsample.1", c)
        c_in = c
    return shapes


class ResNet34Encoder:
    """Frozen ResNet34 in inference mode (batch norm folded); emits layer1..layer4."""

    kind = "resnet34"
    channels = (64, 128, 256, 512)
    strides = (4, 8, 16, 32)

    def __init__(self, weights: dict[str, np.ndarray], bn_eps: float = 1e-5):
        expected = resnet34_parameter_shapes()
        missing = [k for k in expected if k not in weights]
        if missing:
            raise EncoderError(f"resnet34 archive missing {len(missing)} tensors, e.g. {missing[:3]}")
        for k, shape in expected.items():
            if tuple(np.shape(weights[k])) != shape:
                raise EncoderError(f"resnet34 tensor {k} has shape {np.shape(weights[k])}, expected {shape}")
        self.weights = {k: np.asarray(weights[k], dtype=np.float32) for k in expected}
        self.bn_eps = bn_eps

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(self.weights)

    def _bn(self, x, prefix):
        w = self.weights
        scale = w[f"{prefix}.weight"] / np.sqrt(w[f"{prefix}.running_var"] + self.bn_eps)
        shift = w[f"{prefix}.bias"] - w[f"{prefix}.running_mean"] * scale
        return x * scale[None, :, None, None] + shift[None, :, None, None]

    def _conv(self, x, name, stride, padding):
        return conv2d_forward(x, self.weights[name], None, stride, padding, 1)

    def __call__(self, images: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(images, dtype=np.float32)
        x = _relu(self._bn(self._conv(x, "conv1.weight", 2, 3), "bn1"))
        x = _maxpool3x3s2(x)
        feats = []
        for li, blocks in enumerate(RESNET34_LAYERS, start=1):
            for b in range(blocks):
                p = f"layer{li}.{b}"
                stride = 2 if (b == 0 and li > 1) else 1
                out = _relu(self._bn(self._conv(x, f"{p}.conv1.weight", stride, 1), f"{p}.bn1"))
                out = self._bn(self._conv(out, f"{p}.conv2.weight", 1, 1), f"{p}.bn2")
                if f"{p}.downsample.0.weight" in self.weights:
                    x = self._bn(self._conv(x, f"{p}.downsample.0.weight", stride, 0), f"{p}.downsample.1")
                x = _relu(out + x)
            feats.append(x)
        return feats


def random_resnet34_weights(seed: int = 0) -> dict[str, np.ndarray]:
    """He-initialised stand-in weights with identity batch-norm statistics."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in resnet34_parameter_shapes().items():
        if name.endswith("running_var") or (name.endswith(".weight") and len(shape) == 1):
            out[name] = np.ones(shape, dtype=np.float32)
        elif len(shape) == 1:
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            out[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return out


def encoder_forward(encoder, image: np.ndarray) -> FeaturePyramid:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError("encoder", f"expected (B, 3, H, W) images, got {image.shape}")
    return FeaturePyramid(encoder(image), role="encoder")


# ---------------------------------------------------------------------------
# noise


def inject_noise(features: FeaturePyramid, sigma: float, rng: np.random.Generator, mode: str = "relative"):
    """Add i.i.d. Gaussian noise to every level.

    In ``relative`` mode the standard deviation is ``sigma`` times the level's
    own feature standard deviation; in ``absolute`` mode it is ``sigma``.
    """
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if mode not in ("relative", "absolute"):
        raise ValueError(f"unknown noise mode {mode!r}")
    out = []
    for lv in features.arrays():
        if sigma == 0:
            out.append(lv.copy())
            continue
        std = sigma * (float(lv.std()) if mode == "relative" else 1.0)
        out.append((lv + rng.standard_normal(lv.shape) * std).astype(lv.dtype))
    return FeaturePyramid(out, role="perturbed")


# ---------------------------------------------------------------------------
# decoder


class Decoder(Module):
    """Deep-to-shallow CSS stages; ``depths`` are given in encoder (shallow-to-deep) order."""

    def __init__(self, channels: Sequence[int], depths: Sequence[int], css_cfg: CssConfig, rng=None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        if len(depths) != len(channels):
            raise ShapeError("decoder", f"{len(depths)} stage depths for {len(channels)} encoder levels")
        self.channels = tuple(channels)
        self.depths = tuple(depths)
        n = len(channels)
        self.stages = []
        self.reduce = []
        for lvl in reversed(range(n)):
            cfg = CssConfig(
                channels[lvl], css_cfg.kernels, css_cfg.pyramid, css_cfg.use_global, css_cfg.use_local,
                css_cfg.d_state, css_cfg.share_levels,
            )
            self.stages.append([CSS(cfg, rng=rng, dtype=dtype) for _ in range(depths[lvl])])
            if lvl > 0:
                self.reduce.append(Conv(channels[lvl], channels[lvl - 1], 1, rng=rng, dtype=dtype))

    def stage_depths(self) -> tuple[int, ...]:
        """Depths in execution order (deepest stage first)."""
        return tuple(len(s) for s in self.stages)

    def __call__(self, fused: Tensor) -> FeaturePyramid:
        n = len(self.channels)
        if fused.shape[1] != self.channels[-1]:
            raise ShapeError("decoder", f"bottleneck has {fused.shape[1]} channels, expected {self.channels[-1]}")
        outs: list[Tensor] = []
        x = fused
        for i, stage in enumerate(self.stages):
            for block in stage:
                x = block(x)
            outs.append(x)
            if i < n - 1:
                _, _, h, w = x.shape
                x = self.reduce[i](T.bilinear_resize(x, 2 * h, 2 * w))
        return FeaturePyramid(outs[::-1], role="decoder")


def decoder_forward(fused: Tensor, decoder: Decoder) -> FeaturePyramid:
    return decoder(fused)


class PyramidMamba(Module):
    """Frozen encoder -> (noise) -> MFF bottleneck -> CSS decoder."""

    def __init__(self, encoder, image_size: int, depths: Sequence[int], css_cfg: CssConfig, seed: int = 0,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        self._encoder = encoder
        sizes = [image_size // s for s in encoder.strides]
        for s in sizes:
            css_cfg.pyramid.check_size(s, s)
        self.image_size = image_size
        self.mff = MFF(encoder.channels, sizes, encoder.channels[-1], rng=rng, dtype=dtype)
        self.decoder = Decoder(encoder.channels, depths, css_cfg, rng=rng, dtype=dtype)
        self.noise_calls = 0

    @property
    def encoder(self):
        return self._encoder

    def encode(self, images: np.ndarray) -> FeaturePyramid:
        return encoder_forward(self._encoder, images)

    def reconstruct(self, features: FeaturePyramid) -> FeaturePyramid:
        return self.decoder(self.mff(features))

    def forward(self, images: np.ndarray, noise_sigma: float = 0.0, rng: np.random.Generator | None = None,
                noise_mode: str = "relative", noise_target: str = "feature"):
        """Returns (clean encoder pyramid, decoder pyramid). Noise only when ``rng`` is given."""
        enc = self.encode(images)
        src = enc
        if rng is not None:
            self.noise_calls += 1
            if noise_target == "image":
                scale = noise_sigma * (float(np.std(images)) if noise_mode == "relative" else 1.0)
                noisy = np.asarray(images, np.float32) + (rng.standard_normal(np.shape(images)) * scale).astype(
                    np.float32
                )
                src = self.encode(noisy)
            else:
                src = inject_noise(enc, noise_sigma, rng, noise_mode)
        return enc, self.reconstruct(src)
