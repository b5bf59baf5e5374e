"""Images, masks, the MVTec directory layout, and a procedural striped-texture dataset."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .tensor import resize_array

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


class ImageFormatError(ValueError):
    pass


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# decoding / encoding


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace before raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: only binary PGM/PPM (P5/P6) supported, got {magic!r}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PNM supported, maxval is {maxval}")
    ch = 3 if magic == b"P6" else 1
    n = w * h * ch
    if len(raw) - pos < n:
        raise ImageFormatError(f"{path}: truncated raster")
    arr = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def _read_png(path: Path) -> np.ndarray:
    try:
        return _decode_png(path)
    except (OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, (FileNotFoundError, ImageFormatError)):
            raise
        raise ImageFormatError(f"{path}: cannot decode PNG ({exc})") from None


def _decode_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ImageFormatError(f"{path}: not a PNG file")
        if im.info.get("interlace"):
            raise ImageFormatError(f"{path}: interlaced PNG not supported")
        if im.mode not in ("L", "RGB", "RGBA", "LA", "P", "1"):
            raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode} (only 8-bit)")
        if im.mode in ("P", "LA", "1"):
            im = im.convert("RGBA" if im.mode == "P" else "L")
        arr = np.asarray(im, dtype=np.uint8)  # forces the full decode inside the try
    return arr[..., :3] if arr.ndim == 3 else arr


def read_image(path: str | Path) -> np.ndarray:
    """Raw uint8 pixels, (H, W) for grayscale or (H, W, 3) for colour."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        return _read_png(path)
    if suffix in (".ppm", ".pgm", ".pnm"):
        return _read_pnm(path)
    raise ImageFormatError(f"{path}: unsupported image type {suffix!r}")


def save_pgm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ImageFormatError("save_pgm expects a 2-D uint8 array")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())


def save_ppm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError("save_ppm expects an (H, W, 3) uint8 array")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())


def save_png(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")


def to_rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img


def load_image(
    path: str | Path,
    size: int | None = None,
    mean: Sequence[float] = IMAGENET_MEAN,
    std: Sequence[float] = IMAGENET_STD,
) -> np.ndarray:
    """(3, H, W) float32: pixels / 255, optionally bilinearly resized, then per-channel normalised."""
    x = to_rgb(read_image(path)).astype(np.float32).transpose(2, 0, 1) / 255.0
    if size is not None and x.shape[1:] != (size, size):
        x = resize_array(x, size, size).astype(np.float32)
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return (x - m) / s


def load_mask(path: str | Path, size: int | None = None) -> np.ndarray:
    """Binary {0, 1} uint8 mask, thresholded at 127.5 after an optional bilinear resize."""
    m = read_image(path)
    if m.ndim == 3:
        m = m.mean(axis=2)
    m = m.astype(np.float64)
    if size is not None and m.shape != (size, size):
        m = resize_array(m, size, size)
    return (m > 127.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset index


@dataclass(frozen=True)
class Sample:
    image: Path
    label: str  # "good" or a defect type
    mask: Path | None = None

    @property
    def is_anomalous(self) -> bool:
        return self.label != "good"


@dataclass
class DatasetIndex:
    class_name: str
    train: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)


def _images_in(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def index_dataset(root: str | Path, class_name: str) -> DatasetIndex:
    """Index ``<root>/<class>/{train/good, test/<defect>, ground_truth/<defect>}``."""
    base = Path(root) / class_name
    if not base.is_dir():
        raise DatasetError(f"class directory not found: {base}")
    train_dir = base / "train" / "good"
    train = [Sample(p, "good") for p in _images_in(train_dir)] if train_dir.is_dir() else []
    if not train:
        raise DatasetError(f"{class_name}: empty training split at {train_dir}")
    test_root = base / "test"
    if not test_root.is_dir():
        raise DatasetError(f"{class_name}: missing test split at {test_root}")
    test: list[Sample] = []
    for defect_dir in sorted(d for d in test_root.iterdir() if d.is_dir()):
        defect = defect_dir.name
        masks = {}
        gt_dir = base / "ground_truth" / defect
        if defect != "good" and gt_dir.is_dir():
            for m in _images_in(gt_dir):
                stem = m.stem[: -len("_mask")] if m.stem.endswith("_mask") else m.stem
                masks[stem] = m
        for img in _images_in(defect_dir):
            if defect == "good":
                test.append(Sample(img, "good"))
                continue
            if img.stem not in masks:
                raise DatasetError(f"{class_name}: defect image {img} has no mask in {gt_dir}")
            test.append(Sample(img, defect, masks[img.stem]))
    if not test:
        raise DatasetError(f"{class_name}: empty test split")
    return DatasetIndex(class_name, train, test)


def list_classes(root: str | Path) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    return sorted(d.name for d in root.iterdir() if (d / "train" / "good").is_dir())


# ---------------------------------------------------------------------------
# procedural striped textures


def striped_texture(size: int, rng: np.random.Generator, angle: float = 0.0, period: float = 8.0,
                    tint=(0.9, 0.7, 0.5)) -> np.ndarray:
    """Float (H, W, 3) image in [0, 1] with jittered sinusoidal stripes and pixel noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = angle + rng.normal(0, 0.03)
    per = period * (1 + rng.normal(0, 0.03))
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / per + phase)
    base = 0.5 + 0.3 * wave
    img = base[..., None] * np.asarray(tint)[None, None, :]
    img = img + rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0, 1)


def _defect_mask(size: int, rng: np.random.Generator, kind: str) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "square":
        side = int(rng.integers(size // 8, size // 4 + 1))
        y0, x0 = rng.integers(2, size - side - 2, size=2)
        return (yy >= y0) & (yy < y0 + side) & (xx >= x0) & (xx < x0 + side)
    r = rng.uniform(size / 16, size / 8)
    cy, cx = rng.uniform(r + 2, size - r - 2, size=2)
    ry, rx = r * rng.uniform(0.7, 1.3), r * rng.uniform(0.7, 1.3)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def add_defect(img: np.ndarray, rng: np.random.Generator, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Paint a square or blob defect; returns (image, boolean mask)."""
    size = img.shape[0]
    mask = _defect_mask(size, rng, kind)
    out = img.copy()
    if kind == "square":
        # perpendicular stripes inside the square
        yy = np.mgrid[0:size, 0:size][0]
        patch = 0.5 + 0.3 * np.sin(2 * np.pi * yy / 5.0)
        out[mask] = (patch[..., None] * np.asarray([0.4, 0.6, 0.9]))[mask]
    else:
        out[mask] = np.clip(out[mask] * 0.4 + 0.35, 0, 1)
    return out, mask


def make_striped_dataset(
    root: str | Path,
    class_name: str = "stripes",
    n_train: int = 16,
    n_test_good: int = 8,
    n_test_defect: int = 8,
    size: int = 64,
    seed: int = 0,
    angle: float = 0.0,
    period: float = 8.0,
) -> DatasetIndex:
    """Write a synthetic class in the MVTec layout and return its index."""
    rng = np.random.default_rng(seed)
    base = Path(root) / class_name
    for sub in ("train/good", "test/good", "test/square", "test/blob", "ground_truth/square", "ground_truth/blob"):
        (base / sub).mkdir(parents=True, exist_ok=True)

    def to_u8(img):
        return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)

    for i in range(n_train):
        save_png(base / "train/good" / f"{i:03d}.png", to_u8(striped_texture(size, rng, angle, period)))
    for i in range(n_test_good):
        save_png(base / "test/good" / f"{i:03d}.png", to_u8(striped_texture(size, rng, angle, period)))
    for i in range(n_test_defect):
        kind = ("square", "blob")[i % 2]
        img, mask = add_defect(striped_texture(size, rng, angle, period), rng, kind)
        save_png(base / "test" / kind / f"{i:03d}.png", to_u8(img))
        save_png(base / "ground_truth" / kind / f"{i:03d}_mask.png", mask.astype(np.uint8) * 255)
    return index_dataset(root, class_name)
