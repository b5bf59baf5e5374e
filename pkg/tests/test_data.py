import zlib

import numpy as np
import pytest
from PIL import Image

from pyramid_mamba.data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    DatasetError,
    ImageFormatError,
    index_dataset,
    list_classes,
    load_image,
    load_mask,
    make_striped_dataset,
    read_image,
    save_pgm,
    save_png,
    save_ppm,
)


def test_white_ppm_normalises_per_channel(tmp_path):
    p = tmp_path / "w.ppm"
    p.write_bytes(b"P6\n2 2\n255\n" + b"\xff" * 12)
    x = load_image(p)
    assert x.shape == (3, 2, 2) and x.dtype == np.float32
    expected = (1 - np.array(IMAGENET_MEAN)) / np.array(IMAGENET_STD)
    np.testing.assert_allclose(x[:, 0, 0], expected, rtol=1e-6)


def test_pnm_comments_and_grey(tmp_path):
    p = tmp_path / "g.pgm"
    p.write_bytes(b"P5\n# made by hand\n3 1\n255\n\x00\x80\xff")
    assert read_image(p).tolist() == [[0, 128, 255]]
    assert load_image(p).shape == (3, 1, 3)


@pytest.mark.parametrize("content", [b"P3\n1 1\n255\n0 0 0", b"P5\n1 1\n65535\n\0\0", b"P5\n4 4\n255\n\0"])
def test_unsupported_pnm(tmp_path, content):
    p = tmp_path / "x.pgm"
    p.write_bytes(content)
    with pytest.raises(ImageFormatError):
        read_image(p)


def test_png_and_pnm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    save_png(tmp_path / "a.png", img)
    save_ppm(tmp_path / "a.ppm", img)
    save_pgm(tmp_path / "a.pgm", img[..., 0])
    assert np.array_equal(read_image(tmp_path / "a.png"), img)
    assert np.array_equal(read_image(tmp_path / "a.ppm"), img)
    assert np.array_equal(read_image(tmp_path / "a.pgm"), img[..., 0])


def _interlaced_png(path):
    # Pillow cannot write Adam7, so flip the IHDR interlace byte and fix its CRC
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(path)
    raw = bytearray(path.read_bytes())
    ihdr = raw.index(b"IHDR")
    raw[ihdr + 16] = 1
    raw[ihdr + 17 : ihdr + 21] = zlib.crc32(bytes(raw[ihdr : ihdr + 17])).to_bytes(4, "big")
    path.write_bytes(bytes(raw))


def test_rejects_interlaced_and_16bit_png(tmp_path):
    _interlaced_png(tmp_path / "i.png")
    with pytest.raises(ImageFormatError, match="interlaced"):
        read_image(tmp_path / "i.png")
    Image.fromarray(np.zeros((4, 4), np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "d.png")
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "x.jpg")


def test_mask_threshold_after_resize(tmp_path):
    m = np.zeros((4, 4), np.uint8)
    m[:2, :2] = 255
    save_png(tmp_path / "m.png", m)
    assert load_mask(tmp_path / "m.png").sum() == 4
    assert load_mask(tmp_path / "m.png", 8).sum() == 16


def test_striped_dataset_layout(tmp_path):
    idx = make_striped_dataset(tmp_path, n_train=3, n_test_good=2, n_test_defect=4, size=32, seed=1)
    assert list_classes(tmp_path) == ["stripes"]
    assert len(idx.train) == 3 and len(idx.test) == 6
    defects = [s for s in idx.test if s.is_anomalous]
    assert {s.label for s in defects} == {"square", "blob"}
    for s in defects:
        assert load_mask(s.mask).any()
    again = make_striped_dataset(tmp_path / "again", n_train=3, n_test_good=2, n_test_defect=4, size=32, seed=1)
    assert read_image(again.test[-1].image).tobytes() == read_image(idx.test[-1].image).tobytes()


def test_missing_mask_and_empty_split(tmp_path):
    make_striped_dataset(tmp_path, n_train=1, n_test_good=1, n_test_defect=2, size=16)
    next((tmp_path / "stripes/ground_truth/square").iterdir()).unlink()
    with pytest.raises(DatasetError, match="no mask"):
        index_dataset(tmp_path, "stripes")
    with pytest.raises(DatasetError, match="not found"):
        index_dataset(tmp_path, "nothing")
    (tmp_path / "empty/train/good").mkdir(parents=True)
    with pytest.raises(DatasetError, match="empty training"):
        index_dataset(tmp_path, "empty")


def test_decoders_agree_with_reference_decoders(tmp_path):
    cv2 = pytest.importorskip("cv2")
    rng = np.random.default_rng(3)
    for i in range(5):
        img = rng.integers(0, 256, (int(rng.integers(1, 20)), int(rng.integers(1, 20)), 3), dtype=np.uint8)
        Image.fromarray(img).save(tmp_path / f"{i}.ppm")
        Image.fromarray(img[..., 1]).save(tmp_path / f"{i}.pgm")
        Image.fromarray(img).save(tmp_path / f"{i}.png")
        assert np.array_equal(read_image(tmp_path / f"{i}.ppm"), np.asarray(Image.open(tmp_path / f"{i}.ppm")))
        assert np.array_equal(read_image(tmp_path / f"{i}.pgm"), np.asarray(Image.open(tmp_path / f"{i}.pgm")))
        ref = cv2.imread(str(tmp_path / f"{i}.png"), cv2.IMREAD_COLOR)[..., ::-1]
        assert np.array_equal(read_image(tmp_path / f"{i}.png"), ref)


def test_save_pgm_roundtrip_bitwise(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (6, 9), dtype=np.uint8)
    save_pgm(tmp_path / "a.pgm", img)
    save_pgm(tmp_path / "b.pgm", read_image(tmp_path / "a.pgm"))
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_small_fixture_tree_index(tmp_path):
    base = tmp_path / "obj"
    for sub in ("train/good", "test/good", "test/crack", "ground_truth/crack"):
        (base / sub).mkdir(parents=True)
    px = np.zeros((4, 4, 3), np.uint8)
    for name in ("b.png", "a.png"):
        save_png(base / "train/good" / name, px)
    save_png(base / "test/good/000.png", px)
    for stem in ("001", "000"):
        save_png(base / "test/crack" / f"{stem}.png", px)
        save_png(base / "ground_truth/crack" / f"{stem}_mask.png", px[..., 0])
    idx = index_dataset(tmp_path, "obj")
    assert [s.image.name for s in idx.train] == ["a.png", "b.png"]
    assert [(s.label, s.image.name) for s in idx.test] == [("crack", "000.png"), ("crack", "001.png"), ("good", "000.png")]
    assert idx.test[1].mask.name == "001_mask.png"
    assert index_dataset(tmp_path, "obj") == idx
