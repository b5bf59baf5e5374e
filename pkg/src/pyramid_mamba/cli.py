"""``pyramid-mamba {train,eval,infer,selftest,bench}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .archive import ArchiveError
from .bench import HEADER, run_bench
from .config import ConfigError, parse_config
from .data import DatasetError, ImageFormatError
from .metrics import MetricError
from .selftest import run_selftest
from .tensor import ShapeError

FAILURES = (ConfigError, DatasetError, ImageFormatError, ArchiveError, MetricError, ShapeError,
            pipeline.TrainingError, FileNotFoundError)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--class", dest="classes", action="append", default=[], metavar="NAME",
                        help="restrict to these classes (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pyramid-mamba", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one model over all configured classes")
    ev = sub.add_parser("eval", parents=[common], help="per-class and mean metrics as JSON")
    ev.add_argument("--checkpoint", required=True)
    inf = sub.add_parser("infer", parents=[common], help="anomaly heatmaps for an image or a directory")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("target", help="image file or directory of images")
    sub.add_parser("selftest", help="run the oracle and invariant suite")
    bench = sub.add_parser("bench", help="scan kernel throughput table")
    bench.add_argument("--repeats", type=int, default=3)
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.classes:
        overrides.append("classes=" + ",".join(args.classes))
    return parse_config(args.config, overrides)


def _train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or "run")
    result = pipeline.train(cfg, out, on_epoch=lambda e, loss: logging.info("epoch %d loss %.6f", e, loss))
    print(result.checkpoint)
    return 0


def _eval(args) -> int:
    cfg = _config(args)
    print(pipeline.run_eval(cfg, args.checkpoint, args.out))
    return 0


def _infer(args) -> int:
    cfg = _config(args)
    for path, score in pipeline.run_infer(cfg, args.checkpoint, args.target, args.out or "."):
        print(f"{path} {score:.6f}")
    return 0


def _selftest(args) -> int:
    results = run_selftest()
    for r in results:
        print(r.line())
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def _bench(args) -> int:
    print(HEADER)
    for row in run_bench(args.repeats):
        print(row.line())
    return 0


COMMANDS = {"train": _train, "eval": _eval, "infer": _infer, "selftest": _selftest, "bench": _bench}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
