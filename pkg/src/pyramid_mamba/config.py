"""Run configuration: flat ``key = value`` text files plus ``--set`` overrides."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

ENCODER_STRIDE = {"resnet34": 32, "tiny": 16}
ENCODER_LEVELS = {"resnet34": 4, "tiny": 3}
CHOICES = {
    "encoder": ("resnet34", "tiny"),
    "noise_mode": ("relative", "absolute"),
    "noise_target": ("feature", "image"),
    "pyramid_average": ("pairwise", "uniform"),
    "map_metric": ("cosine", "mse"),
    "image_statistic": ("max", "topk_mean"),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_root: str = "data"
    classes: tuple[str, ...] = ()
    multi_class: bool = True
    image_size: int = 256
    encoder: str = "resnet34"
    encoder_weights: str = ""
    norm_mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    norm_std: tuple[float, ...] = (0.229, 0.224, 0.225)
    state_size: int = 16
    pss_chain: int = 3
    pyramid_levels: int = 2
    pyramid_average: str = "pairwise"
    share_level_params: bool = False
    decoder_depths: tuple[int, ...] = (3, 4, 6, 3)
    lec_kernels: tuple[int, ...] = (5, 7)
    use_global: bool = True
    use_local: bool = True
    use_pyramid: bool = True
    use_noise: bool = True
    noise_sigma: float = 0.1
    noise_mode: str = "relative"
    noise_target: str = "feature"
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    epochs: int = 500
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 50
    smoothing_sigma: float = 4.0
    map_metric: str = "cosine"
    image_statistic: str = "max"
    top_k: int = 10
    aupro_fpr_limit: float = 0.3
    pro_connectivity: int = 8
    save_png: bool = False

    @property
    def effective_levels(self) -> int:
        return self.pyramid_levels if self.use_pyramid else 0

    def validate(self) -> "RunConfig":
        for key, allowed in CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        positive = ("image_size", "state_size", "pss_chain", "epochs", "batch_size", "checkpoint_every", "top_k")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if not 0 <= self.pyramid_levels <= 3:
            raise ConfigError(f"pyramid_levels must lie in [0, 3], got {self.pyramid_levels}")
        for key in ("noise_sigma", "learning_rate", "weight_decay", "smoothing_sigma"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if not 0 < self.aupro_fpr_limit <= 1:
            raise ConfigError(f"aupro_fpr_limit must lie in (0, 1], got {self.aupro_fpr_limit}")
        if self.pro_connectivity not in (4, 8):
            raise ConfigError("pro_connectivity must be 4 or 8")
        if not (self.use_global or self.use_local):
            raise ConfigError("at least one of use_global / use_local must be true")
        if any(k % 2 == 0 or k < 1 for k in self.lec_kernels):
            raise ConfigError(f"lec_kernels must be odd, got {self.lec_kernels}")
        if len(self.norm_mean) != 3 or len(self.norm_std) != 3 or min(self.norm_std) <= 0:
            raise ConfigError("norm_mean and norm_std need three entries, std > 0")
        levels = ENCODER_LEVELS[self.encoder]
        if len(self.decoder_depths) != levels or min(self.decoder_depths) < 1:
            raise ConfigError(
                f"decoder_depths needs {levels} positive entries for the {self.encoder} encoder, "
                f"got {self.decoder_depths}"
            )
        div = ENCODER_STRIDE[self.encoder] * 2**self.effective_levels
        if self.image_size % div:
            raise ConfigError(f"image_size {self.image_size} must be divisible by {div} "
                              f"(encoder stride x 2^pyramid_levels)")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str) -> Any:
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError(raw)
            return val
        if kind == "str":
            return raw.strip('"').strip("'")
        items = [p.strip() for p in raw.split(",") if p.strip()]
        if kind == "tuple[int, ...]":
            return tuple(int(p) for p in items)
        if kind == "tuple[float, ...]":
            return tuple(float(p) for p in items)
        return tuple(items)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, overrides: list[str] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        values[key] = _coerce(key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = (p.strip() for p in item.split("=", 1))
        values[key] = _coerce(key, raw)
    return RunConfig(**values).validate()


def parse_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config_text(text, overrides)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes).validate()
