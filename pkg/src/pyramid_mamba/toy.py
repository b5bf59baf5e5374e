"""Desk-scale end-to-end run on the procedurally generated striped texture."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, parse_config_text
from .data import make_striped_dataset
from .metrics import MetricsReport
from .pipeline import evaluate_model, train

TOY_SETTINGS = {
    "image_size": 64,
    "encoder": "tiny",
    "decoder_depths": "1,1,1",
    "pss_chain": 2,
    "pyramid_levels": 2,
    "epochs": 50,
    "batch_size": 2,
    # 50 epochs of 8 steps is a short schedule, so the step size is raised
    "learning_rate": 2e-3,
}
ABLATION = ("use_pyramid=false", "use_noise=false")
STRIPE_PERIOD = 16.0


@dataclass
class ToyOutcome:
    seed: int
    variant: str
    report: MetricsReport
    seconds: float
    losses: list[float]


def toy_config(root: str | Path, seed: int, overrides=()) -> RunConfig:
    text = "\n".join(f"{k} = {v}" for k, v in {**TOY_SETTINGS, "data_root": root, "seed": seed}.items())
    return parse_config_text(text, list(overrides))


def make_toy_dataset(root: str | Path, seed: int, n_train: int = 16):
    return make_striped_dataset(root, n_train=n_train, n_test_good=8, n_test_defect=8, seed=seed,
                                period=STRIPE_PERIOD)


def toy_run(root: str | Path, seed: int, ablate: bool = False, overrides=()) -> ToyOutcome:
    """Generate the dataset for ``seed`` under ``root`` (if absent), train, and evaluate."""
    root = Path(root)
    if not (root / "stripes").is_dir():
        make_toy_dataset(root, seed)
    cfg = toy_config(root, seed, (ABLATION if ablate else ()) + tuple(overrides))
    t0 = time.perf_counter()
    result = train(cfg)
    report = evaluate_model(result.model, cfg)["stripes"]
    return ToyOutcome(seed, "ablation" if ablate else "full", report, time.perf_counter() - t0, result.losses)
