import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from pyramid_mamba import pipeline
from pyramid_mamba.data import DatasetError, index_dataset, load_image, make_striped_dataset, read_image, save_png
from pyramid_mamba.pipeline import TrainingError
from pyramid_mamba.toy import make_toy_dataset, toy_config


def small_cfg(root, seed=0, *overrides):
    return toy_config(root, seed, ("pyramid_levels=1",) + overrides)


@pytest.fixture(scope="module")
def ten_images(tmp_path_factory):
    root = tmp_path_factory.mktemp("ten")
    make_striped_dataset(root, n_train=10, n_test_good=2, n_test_defect=2, seed=3, period=16)
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(root, seed=0)
    cfg = toy_config(root, 0, ("epochs=20",))
    out = root / "run"
    result = pipeline.train(cfg, out)
    return root, cfg, result


def test_loss_decreases_over_first_five_epochs(ten_images):
    decreasing = 0
    for seed in range(5):
        cfg = toy_config(ten_images, seed, ("epochs=5",))
        losses = pipeline.train(cfg).losses
        decreasing += all(b < a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 4


def test_noise_toggle_reaches_the_generator(ten_images):
    cfg = small_cfg(ten_images, 0, "epochs=1", "use_noise=false")
    assert pipeline.train(cfg).model.noise_calls == 0
    cfg = small_cfg(ten_images, 0, "epochs=1")
    assert pipeline.train(cfg).model.noise_calls == 5  # one per batch of two


def test_same_seed_gives_identical_checkpoints(ten_images, tmp_path):
    blobs = []
    for run in ("a", "b"):
        res = pipeline.train(small_cfg(ten_images, 7, "epochs=2"), tmp_path / run)
        blobs.append(res.checkpoint.read_bytes())
        assert (tmp_path / run / "loss.log").read_text().count("\n") == 2
    assert blobs[0] == blobs[1]


def test_loss_log_format(ten_images, tmp_path):
    res = pipeline.train(small_cfg(ten_images, 0, "epochs=2"), tmp_path)
    rows = [line.split("\t") for line in (tmp_path / "loss.log").read_text().splitlines()]
    assert [int(r[0]) for r in rows] == [1, 2]
    np.testing.assert_allclose([float(r[1]) for r in rows], res.losses, rtol=1e-7)


def test_periodic_checkpoints(ten_images, tmp_path):
    pipeline.train(small_cfg(ten_images, 0, "epochs=3", "checkpoint_every=1"), tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*.pmwa"))
    assert names == ["checkpoint.pmwa", "checkpoint_epoch0001.pmwa", "checkpoint_epoch0002.pmwa"]


def test_checkpoint_roundtrip_reproduces_maps(ten_images, tmp_path):
    cfg = small_cfg(ten_images, 1, "epochs=1")
    res = pipeline.train(cfg, tmp_path)
    images = pipeline.load_images([s.image for s in index_dataset(ten_images, "stripes").test], cfg)
    before = pipeline.predict(res.model, images, cfg)
    model, opt, stored = pipeline.load_checkpoint(res.checkpoint)
    after = pipeline.predict(model, images, stored)
    for a, b in zip(before, after):
        assert np.array_equal(a.pixel_map, b.pixel_map) and a.image_score == b.image_score
    assert opt.step_count == res.optimizer.step_count
    for m0, m1 in zip(res.optimizer.first_moment, opt.first_moment):
        assert np.array_equal(m0, m1)


def test_checkpoint_for_other_model_rejected(ten_images, tmp_path):
    res = pipeline.train(small_cfg(ten_images, 0, "epochs=1"), tmp_path)
    with pytest.raises(pipeline.ArchiveError):
        pipeline.load_checkpoint(res.checkpoint, small_cfg(ten_images, 0, "decoder_depths=2,1,1"))


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_nonfinite_loss_aborts_with_dump(ten_images, tmp_path):
    cfg = small_cfg(ten_images, 0, "epochs=1", "use_noise=false")
    images = pipeline.load_images([s.image for s in index_dataset(ten_images, "stripes").train], cfg)
    images[3, 0, 5, 5] = np.nan
    with pytest.raises(TrainingError, match="non-finite loss at epoch 1") as err:
        pipeline.train_model(pipeline.build_model(cfg), images, cfg, tmp_path)
    dumps = list(tmp_path.glob("nonfinite_*.npz"))
    assert len(dumps) == 1 and str(dumps[0]) in str(err.value)
    assert 3 in np.load(dumps[0])["indices"]


def test_multi_class_trains_on_every_class(tmp_path, monkeypatch):
    make_striped_dataset(tmp_path, "a", n_train=2, n_test_good=1, n_test_defect=1, seed=0, period=16)
    make_striped_dataset(tmp_path, "b", n_train=3, n_test_good=1, n_test_defect=1, seed=1, period=16, angle=90)
    seen = []
    monkeypatch.setattr(pipeline, "train_model", lambda model, images, cfg, *a, **k: seen.append(images.shape[0]))
    pipeline.train(small_cfg(tmp_path, 0, "epochs=1"))
    pipeline.train(small_cfg(tmp_path, 0, "epochs=1", "multi_class=false"))
    pipeline.train(small_cfg(tmp_path, 0, "epochs=1", "classes=b"))
    assert seen == [5, 2, 3]


def test_eval_report_has_classes_and_mean(ten_images, tmp_path):
    res = pipeline.train(small_cfg(ten_images, 0, "epochs=1"), tmp_path)
    text = pipeline.run_eval(small_cfg(ten_images, 0), res.checkpoint, tmp_path / "eval")
    doc = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert doc == json.loads(text)
    assert set(doc["classes"]) == {"stripes"}
    assert set(doc["mean"]["image"]) == {"auroc", "ap", "f1max"}
    assert set(doc["mean"]["pixel"]) == {"auroc", "ap", "f1max", "aupro"}
    assert doc["mean"] == doc["classes"]["stripes"]


def test_eval_missing_class(ten_images, tmp_path):
    res = pipeline.train(small_cfg(ten_images, 0, "epochs=1"), tmp_path)
    with pytest.raises(DatasetError, match="carpet"):
        pipeline.run_eval(small_cfg(ten_images, 0, "classes=carpet"), res.checkpoint, tmp_path / "eval")
    assert not (tmp_path / "eval" / "report.json").exists()


def test_infer_heatmap_matches_input_size_and_repeats(trained, tmp_path):
    root, cfg, result = trained
    src = read_image(index_dataset(root, "stripes").test[0].image)
    odd = tmp_path / "in" / "odd.png"
    odd.parent.mkdir()
    save_png(odd, np.ascontiguousarray(src[:40, :50]))
    first = pipeline.run_infer(cfg, result.checkpoint, odd, tmp_path / "o1")
    second = pipeline.run_infer(cfg, result.checkpoint, odd.parent, tmp_path / "o2")
    heat1 = read_image(tmp_path / "o1" / "odd_amap.pgm")
    assert heat1.shape[:2] == (40, 50)
    assert first[0][1] == second[0][1]
    assert (tmp_path / "o1" / "odd_amap.pgm").read_bytes() == (tmp_path / "o2" / "odd_amap.pgm").read_bytes()
    sidecar = (tmp_path / "o1" / "odd_amap.txt").read_text()
    assert f"score {first[0][1]!r}" in sidecar


def test_infer_png_option(trained, tmp_path):
    root, cfg, result = trained
    target = index_dataset(root, "stripes").test[0].image
    pipeline.run_infer(dataclasses.replace(cfg, save_png=True), result.checkpoint, target, tmp_path)
    assert (tmp_path / f"{Path(target).stem}_amap.png").exists()


def test_training_images_score_below_defects(trained):
    root, cfg, result = trained
    index = index_dataset(root, "stripes")
    train_imgs = pipeline.load_images([s.image for s in index.train[:8]], cfg)
    defect_imgs = pipeline.load_images([s.image for s in index.test if s.is_anomalous], cfg)
    train_scores = [r.image_score for r in pipeline.predict(result.model, train_imgs, cfg)]
    defect_scores = [r.image_score for r in pipeline.predict(result.model, defect_imgs, cfg)]
    assert np.median(train_scores) < np.median(defect_scores)
    assert np.mean(train_scores) < np.mean(defect_scores)


def test_unreadable_image_in_infer(trained, tmp_path):
    root, cfg, result = trained
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    with pytest.raises(Exception) as err:
        pipeline.run_infer(cfg, result.checkpoint, bad, tmp_path / "out")
    assert type(err.value).__name__ == "ImageFormatError"


def test_load_image_matches_training_preprocessing(trained):
    root, cfg, _ = trained
    path = index_dataset(root, "stripes").train[0].image
    a = pipeline.load_images([path], cfg)[0]
    b = load_image(path, cfg.image_size, cfg.norm_mean, cfg.norm_std)
    assert np.array_equal(a, b.astype(np.float32))
