"""Training, evaluation and inference driven by a :class:`RunConfig`."""

from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .anomaly import AnomalyResult, anomaly_maps, multiscale_mse_loss
from .archive import ArchiveError, read_archive, write_archive
from .blocks import CssConfig, PyramidMamba, ResNet34Encoder, TinyEncoder
from .config import RunConfig, parse_config_text, serialize_config
from .data import DatasetError, DatasetIndex, index_dataset, list_classes, load_image, load_mask, save_pgm, save_png
from .metrics import MetricsReport, evaluate, reports_to_json
from .pyramid import PyramidSpec
from .tensor import AdamState, adam_step, no_grad, zero_grads

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def build_encoder(cfg: RunConfig):
    if cfg.encoder == "tiny":
        return TinyEncoder(seed=cfg.seed)
    if not cfg.encoder_weights:
        raise ArchiveError("encoder = resnet34 needs encoder_weights pointing at a weight archive")
    tensors, _ = read_archive(cfg.encoder_weights)
    return ResNet34Encoder(tensors)


def build_model(cfg: RunConfig, encoder=None) -> PyramidMamba:
    spec = PyramidSpec(levels=cfg.effective_levels, chain=cfg.pss_chain, average=cfg.pyramid_average)
    css_cfg = CssConfig(
        channels=0,
        kernels=tuple(cfg.lec_kernels),
        pyramid=spec,
        use_global=cfg.use_global,
        use_local=cfg.use_local,
        d_state=cfg.state_size,
        share_levels=cfg.share_level_params,
    )
    encoder = encoder if encoder is not None else build_encoder(cfg)
    return PyramidMamba(encoder, cfg.image_size, cfg.decoder_depths, css_cfg, seed=cfg.seed)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: PyramidMamba, optimizer: AdamState | None, cfg: RunConfig,
                    epoch: int = 0) -> None:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    meta = {"epoch": str(epoch)}
    if optimizer is not None and optimizer.first_moment:
        names = [k for k, _ in model.named_parameters()]
        for name, m, v in zip(names, optimizer.first_moment, optimizer.second_moment):
            tensors[f"adam.m/{name}"] = m
            tensors[f"adam.v/{name}"] = v
        meta.update(
            {
                "adam.step": str(optimizer.step_count),
                "adam.lr": repr(optimizer.learning_rate),
                "adam.weight_decay": repr(optimizer.weight_decay),
                "adam.beta1": repr(optimizer.beta1),
                "adam.beta2": repr(optimizer.beta2),
                "adam.epsilon": repr(optimizer.epsilon),
            }
        )
    for line in serialize_config(cfg).splitlines():
        key, _, value = line.partition(" = ")
        meta[f"config.{key}"] = value
    write_archive(path, tensors, meta)


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None, encoder=None):
    """Returns (model, optimizer state, config). The config stored in the archive is used when ``cfg`` is None."""
    tensors, meta = read_archive(path)
    if cfg is None:
        text = "".join(f"{k[len('config.'):]} = {v}\n" for k, v in meta.items() if k.startswith("config."))
        cfg = parse_config_text(text)
    model = build_model(cfg, encoder)
    state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise ArchiveError(f"{path}: checkpoint does not match the configured model ({exc})") from None
    opt = AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if "adam.step" in meta:
        names = [k for k, _ in model.named_parameters()]
        opt.step_count = int(meta["adam.step"])
        opt.learning_rate = float(meta["adam.lr"])
        opt.weight_decay = float(meta["adam.weight_decay"])
        opt.beta1, opt.beta2 = float(meta["adam.beta1"]), float(meta["adam.beta2"])
        opt.epsilon = float(meta["adam.epsilon"])
        opt.first_moment = [tensors[f"adam.m/{n}"].copy() for n in names]
        opt.second_moment = [tensors[f"adam.v/{n}"].copy() for n in names]
    return model, opt, cfg


# ---------------------------------------------------------------------------
# data


def resolve_classes(cfg: RunConfig) -> list[str]:
    available = list_classes(cfg.data_root)
    if not cfg.classes:
        if not available:
            raise DatasetError(f"no classes found under {cfg.data_root}")
        return available
    missing = [c for c in cfg.classes if c not in available]
    if missing:
        raise DatasetError(f"classes {missing} not present under {cfg.data_root}")
    return list(cfg.classes)


def load_images(paths: Sequence[Path], cfg: RunConfig) -> np.ndarray:
    return np.stack([load_image(p, cfg.image_size, cfg.norm_mean, cfg.norm_std) for p in paths]).astype(np.float32)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: PyramidMamba
    optimizer: AdamState
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def train_model(
    model: PyramidMamba,
    images: np.ndarray,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train the decoder on normal ``images`` (N, 3, H, W); the encoder stays frozen."""
    params = model.parameters()
    opt = AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    opt.init_for(params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "loss.log").write_text("")
    result = TrainResult(model, opt)
    n = images.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, 0, epoch]).permutation(n)
        batch_losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            rng = np.random.default_rng([cfg.seed, 1, epoch, b]) if cfg.use_noise else None
            enc, dec = model.forward(images[idx], cfg.noise_sigma, rng, cfg.noise_mode, cfg.noise_target)
            loss = multiscale_mse_loss(enc, dec)
            value = float(loss.data)
            if not np.isfinite(value):
                dump = None
                if out is not None:
                    dump = out / f"nonfinite_epoch{epoch}_batch{b}.npz"
                    np.savez(dump, images=images[idx], indices=idx)
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} (indices {idx.tolist()}); "
                                    f"batch dumped to {dump}")
            zero_grads(params)
            loss.backward()
            adam_step(params, opt)
            batch_losses.append(value)
        epoch_loss = float(np.mean(batch_losses))
        result.losses.append(epoch_loss)
        logger.info("epoch %d loss %.6f", epoch, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        if out is not None:
            with open(out / "loss.log", "a") as fh:
                fh.write(f"{epoch}\t{epoch_loss:.8g}\n")
            if epoch % cfg.checkpoint_every == 0 and epoch != cfg.epochs:
                save_checkpoint(out / f"checkpoint_epoch{epoch:04d}.pmwa", model, opt, cfg, epoch)
    if out is not None:
        result.checkpoint = out / "checkpoint.pmwa"
        save_checkpoint(result.checkpoint, model, opt, cfg, cfg.epochs)
    return result


def train(cfg: RunConfig, out_dir: str | Path | None = None, model: PyramidMamba | None = None,
          on_epoch=None) -> TrainResult:
    """Multi-class training over every configured class (or one class when ``multi_class`` is off)."""
    classes = resolve_classes(cfg)
    if not cfg.multi_class:
        classes = classes[:1]
    paths = [s.image for c in classes for s in index_dataset(cfg.data_root, c).train]
    images = load_images(paths, cfg)
    model = model if model is not None else build_model(cfg)
    return train_model(model, images, cfg, out_dir, on_epoch)


# ---------------------------------------------------------------------------
# inference and evaluation


def predict(model: PyramidMamba, images: np.ndarray, cfg: RunConfig, out_size=None,
            batch_size: int | None = None) -> list[AnomalyResult]:
    out_size = out_size or (images.shape[2], images.shape[3])
    results = []
    bs = batch_size or cfg.batch_size
    with no_grad():
        for start in range(0, images.shape[0], bs):
            enc, dec = model.forward(images[start : start + bs])
            results.extend(
                anomaly_maps(enc, dec, out_size, cfg.smoothing_sigma, cfg.map_metric, cfg.image_statistic, cfg.top_k)
            )
    return results


def evaluate_class(model: PyramidMamba, index: DatasetIndex, cfg: RunConfig) -> MetricsReport:
    images = load_images([s.image for s in index.test], cfg)
    results = predict(model, images, cfg)
    size = cfg.image_size
    masks = [
        load_mask(s.mask, size) if s.mask is not None else np.zeros((size, size), dtype=np.uint8) for s in index.test
    ]
    labels = [int(s.is_anomalous) for s in index.test]
    return evaluate(
        [r.image_score for r in results], labels, [r.pixel_map for r in results], masks,
        cfg.aupro_fpr_limit, cfg.pro_connectivity,
    )


def evaluate_model(model: PyramidMamba, cfg: RunConfig) -> dict[str, MetricsReport]:
    return {c: evaluate_class(model, index_dataset(cfg.data_root, c), cfg) for c in resolve_classes(cfg)}


def write_text_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_eval(cfg: RunConfig, checkpoint: str | Path, out_dir: str | Path | None = None) -> str:
    model, _, _ = load_checkpoint(checkpoint, cfg)
    text = reports_to_json(evaluate_model(model, cfg))
    if out_dir is not None:
        write_text_atomic(Path(out_dir) / "report.json", text + "\n")
    return text


def heatmap_to_u8(amap: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(amap.min()), float(amap.max())
    scaled = (amap - lo) / (hi - lo) if hi > lo else np.zeros_like(amap)
    return (scaled * 255 + 0.5).astype(np.uint8), lo, hi


def run_infer(cfg: RunConfig, checkpoint: str | Path, target: str | Path, out_dir: str | Path) -> list[tuple[Path, float]]:
    """Heatmaps ``<stem>_amap.pgm`` (+ PNG) with a ``<stem>_amap.txt`` range sidecar; returns (path, score)."""
    from .data import IMAGE_SUFFIXES, read_image
    from .tensor import resize_array

    model, _, _ = load_checkpoint(checkpoint, cfg)
    target = Path(target)
    paths = sorted(p for p in target.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if target.is_dir() else [target]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scored = []
    for p in paths:
        raw = read_image(p)
        h, w = raw.shape[:2]
        img = load_image(p, cfg.image_size, cfg.norm_mean, cfg.norm_std)[None]
        res = predict(model, img, cfg, batch_size=1)[0]
        amap = res.pixel_map if (h, w) == res.pixel_map.shape else resize_array(res.pixel_map, h, w)
        u8, lo, hi = heatmap_to_u8(amap)
        save_pgm(out / f"{p.stem}_amap.pgm", u8)
        if cfg.save_png:
            save_png(out / f"{p.stem}_amap.png", u8)
        (out / f"{p.stem}_amap.txt").write_text(f"min {lo!r}\nmax {hi!r}\nscore {res.image_score!r}\n")
        scored.append((p, res.image_score))
    return scored
