"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest -v -s tests/test_acceptance.py``; the lines are also
collected into an "acceptance criteria" section of the terminal summary.
The end-to-end toy run trains ten models and takes several minutes.
"""

import json
import re
import time

import numpy as np
import pytest

from pyramid_mamba import metrics, oracles, pipeline
from pyramid_mamba import tensor as T
from pyramid_mamba.gradcheck import CASES, STEP, TOLERANCE, check_all
from pyramid_mamba.pyramid import PyramidSpec, cat, ps_recursive, split
from pyramid_mamba.selftest import random_metric_instance, random_pro_instance, random_stable_ssm
from pyramid_mamba.ssm import discretize_zoh, make_params, ssm_conv, ssm_kernel, ssm_recurrent
from pyramid_mamba.toy import make_toy_dataset, toy_config, toy_run

SEEDS = range(5)
PRIMARY_SEED = 0


def test_criterion_1_scan_equivalence(verdict):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        n, L, c = int(rng.integers(1, 9)), int(rng.integers(1, 65)), int(rng.integers(1, 4))
        d = discretize_zoh(random_stable_ssm(rng, c, n))
        x = rng.standard_normal((c, L))
        worst = max(worst, float(np.abs(ssm_recurrent(d, x) - ssm_conv(x, ssm_kernel(d, L))).max()))
    seconds = time.perf_counter() - t0
    verdict(1, "recurrent == kernel form", worst < 1e-5 and seconds < 1.0,
            f"max abs diff {worst:.2e} over 20 draws (N<=8, L<=64), {seconds:.3f}s")


def test_criterion_2_zoh(verdict):
    d = discretize_zoh(make_params(-1.0, 1.0, 1.0, np.log(2.0)))
    scalar = max(abs(d.A_bar.item() - 0.5), abs(d.B_bar.item() - 0.5))
    # small-step limits: A_bar -> 1 (at rate -A) and B_bar / delta -> B
    limits_hold = True
    for delta in (1e-6, 1e-9, 1e-12):
        s = discretize_zoh(make_params(-3.0, 2.0, 1.0, delta))
        a = s.A_bar.item()
        limits_hold &= abs(a - 1.0) <= 3 * delta + np.spacing(1.0) and abs(a - np.exp(-3 * delta)) <= np.spacing(1.0)
        limits_hold &= abs(s.B_bar.item() / delta - 2.0) < 1e-5
    series = 0.0
    # every z = delta * A below the series threshold, reached with unit delta
    for z in -np.logspace(-12, np.log10(9.99e-5), 40):
        got = discretize_zoh(make_params(z, 1.0, 1.0, 1.0)).B_bar.item()
        exact = np.expm1(z) / z
        series = max(series, abs(got - exact) / abs(exact))
    ok = scalar < 1e-6 and limits_hold and series < 1e-6
    verdict(2, "ZOH discretisation", ok,
            f"scalar err {scalar:.1e}, small-step limits hold: {limits_hold}, series rel err {series:.1e}")


def test_criterion_3_pyramid(verdict):
    rng = np.random.default_rng(3)
    bitwise = True
    for _ in range(50):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), 2 * int(rng.integers(1, 9)),
                 2 * int(rng.integers(1, 9)))
        x = T.tensor(rng.standard_normal(shape).astype(np.float32))
        bitwise &= np.array_equal(cat(split(x)).data, x.data)
    spec = PyramidSpec(levels=2, chain=1)
    x = T.tensor(rng.standard_normal((2, 3, 8, 12)))
    identity = np.array_equal(ps_recursive(x, 0, spec, lambda r, p: r).data, x.data)
    gains = rng.uniform(0.5, 2.0, 3)

    def scan_np(r, p):
        # position dependent, so a wrong region boundary cannot cancel out
        ramp = np.arange(r.shape[2] * r.shape[3]).reshape(r.shape[2:]) / 10.0
        return np.tanh(r * gains[p]) + ramp + p * r[:, :, :1, :1]

    got = ps_recursive(x, 0, spec, lambda r, p: T.tensor(scan_np(r.data, p))).data
    err = float(np.abs(got - oracles.pyramid_unrolled(x.data, 2, scan_np)).max())
    verdict(3, "pyramid partition", bitwise and identity and err < 1e-6,
            f"cat(split) bitwise on 50 shapes: {bitwise}; identity scan: {identity}; 3-level oracle err {err:.1e}")


def test_criterion_4_gradients(verdict):
    t0 = time.perf_counter()
    results = check_all(seed=0)
    seconds = time.perf_counter() - t0
    bad = [r.name for r in results if not r.ok]
    worst = max(results, key=lambda r: r.error)
    ok = not bad and seconds < 30 and "css_block" in {r.name for r in results} and len(results) == len(CASES)
    verdict(4, "finite-difference gradients", ok,
            f"{len(results)} cases at h={STEP:g}, worst {worst.name} {worst.error:.1e} (< {TOLERANCE:g}), "
            f"{seconds:.1f}s" + (f", failing {bad}" if bad else ""))


def test_criterion_5_metric_oracles(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
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
    a = metrics.auroc([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    ap = metrics.average_precision([0.9, 0.8, 0.7], [1, 0, 1])
    f1 = metrics.f1max([0.9, 0.8, 0.1], [1, 0, 1])
    examples = a == 0.75 and abs(ap - 5 / 6) < 1e-12 and abs(f1 - 0.8) < 1e-12
    verdict(5, "metric oracles", worst < 1e-9 and examples,
            f"max deviation {worst:.1e} over 200 instances; examples auroc {a} ap {ap:.4f} f1max {f1:.4f}")


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    runs = {}
    for seed in SEEDS:
        root = tmp_path_factory.mktemp(f"toy{seed}")
        make_toy_dataset(root, seed)
        runs[seed] = (toy_run(root, seed), toy_run(root, seed, ablate=True))
    return runs


def test_criterion_6a_toy_detection(toy_runs, verdict):
    full, _ = toy_runs[PRIMARY_SEED]
    img, pix = full.report.image["auroc"], full.report.pixel["auroc"]
    per_seed = ", ".join(
        f"s{s} {100 * f.report.image['auroc']:.1f}/{100 * f.report.pixel['auroc']:.1f}" for s, (f, _) in toy_runs.items()
    )
    ok = img >= 0.90 and pix >= 0.90 and full.seconds < 300
    verdict(6, "toy run AU-ROC (primary seed)", ok,
            f"seed {PRIMARY_SEED}: image {img:.3f} pixel {pix:.3f} in {full.seconds:.0f}s; "
            f"image/pixel by seed: {per_seed}")


def test_criterion_6b_toy_ablation_direction(toy_runs, verdict):
    wins = sum(f.report.pixel["ap"] >= a.report.pixel["ap"] for f, a in toy_runs.values())
    pairs = ", ".join(f"s{s} {f.report.pixel['ap']:.3f} vs {a.report.pixel['ap']:.3f}" for s, (f, a) in toy_runs.items())
    verdict(6, "pixel AP full >= no-pyramid-no-noise", wins >= 3, f"{wins}/5 seeds ({pairs})")


ABLATIONS = {
    "full": (),
    "no_global": ("use_global=false",),
    "no_local": ("use_local=false",),
    "pyramid_only": ("use_noise=false",),
    "noise_only": ("use_pyramid=false",),
    "neither": ("use_pyramid=false", "use_noise=false"),
    "P0": ("pyramid_levels=0",),
    "P1": ("pyramid_levels=1",),
    "P2": ("pyramid_levels=2",),
}


def _pyramid_depth(model) -> int:
    levels = {int(m.group(1)) for n, _ in model.named_parameters() if (m := re.search(r"pyramid\.scans\.(\d+)", n))}
    return len(levels) - 1 if levels else -1


def test_criterion_7_ablation_wiring(tmp_path, verdict):
    make_toy_dataset(tmp_path, seed=0, n_train=4)
    reports, structure = {}, {}
    for name, overrides in ABLATIONS.items():
        cfg = toy_config(tmp_path, 0, ("epochs=1",) + overrides)
        result = pipeline.train(cfg, tmp_path / name)
        reports[name] = pipeline.run_eval(cfg, result.checkpoint, tmp_path / name)
        names = [n for n, _ in result.model.named_parameters()]
        structure[name] = (
            any(".pss." in n for n in names),
            any(".lecs." in n for n in names),
            _pyramid_depth(result.model),
            result.model.noise_calls > 0,
        )
    keys = {name: _report_keys(text) for name, text in reports.items()}
    comparable = len(set(keys.values())) == 1
    expected = {
        "full": (True, True, 2, True),
        "no_global": (False, True, -1, True),
        "no_local": (True, False, 2, True),
        "pyramid_only": (True, True, 2, False),
        "noise_only": (True, True, 0, True),
        "neither": (True, True, 0, False),
        "P0": (True, True, 0, True),
        "P1": (True, True, 1, True),
        "P2": (True, True, 2, True),
    }
    wired = structure == expected
    verdict(7, "ablation toggles", comparable and wired,
            f"{len(reports)} configurations completed; identical report layout: {comparable}; "
            f"branches/levels/noise as configured: {wired}")


def _report_keys(text: str):
    doc = json.loads(text)
    return tuple(sorted((k, tuple(sorted(v))) for k, v in doc["mean"].items())), tuple(sorted(doc["classes"]))


def test_criterion_8_determinism(tmp_path, verdict):
    make_toy_dataset(tmp_path, seed=2, n_train=6)
    blobs, texts = [], []
    for run in ("first", "second"):
        cfg = toy_config(tmp_path, 2, ("epochs=3",))
        result = pipeline.train(cfg, tmp_path / run)
        pipeline.run_eval(cfg, result.checkpoint, tmp_path / run)
        blobs.append(result.checkpoint.read_bytes())
        texts.append((tmp_path / run / "report.json").read_bytes())
    same_ckpt, same_report = blobs[0] == blobs[1], texts[0] == texts[1]
    verdict(8, "bitwise determinism", same_ckpt and same_report,
            f"checkpoints identical: {same_ckpt} ({len(blobs[0])} bytes); reports identical: {same_report}")
