"""``verifuse`` command-line entry point.

Exit codes: 0 success, 1 unexpected failure or busy output directory,
2 missing prerequisite (the message names the stage to run first),
3 configuration violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import pipeline
from .config import FIELD_TYPES, ConfigError, load_config_file, parse_value, resolve_config
from .pipeline import EXIT_CONFIG, StageError
from .synthetic import KINDS, make_corpus

logger = logging.getLogger("verifuse")

STAGE_HELP = {
    "ingest": "load the manifest, fetch images, clean and split the corpus",
    "extract": "encode text and images with the frozen encoders and fit the scalers",
    "train": "train the fusion classifier",
    "evaluate": "write test/validation metrics and the accuracy, loss and ROC plots",
    "sweep": "evaluate a late-fusion checkpoint over several weight pairs",
    "predict": "classify one text and image pair",
}


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags take precedence over it")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    for name in FIELD_TYPES:
        flags = [f"--{name.replace('_', '-')}"]
        if "_" in name:
            flags.append(f"--{name}")
        common.add_argument(*flags, dest=name, default=argparse.SUPPRESS, metavar=name.upper())
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="verifuse", description="Multimodal fake news detection pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_options()
    for stage, text in STAGE_HELP.items():
        p = sub.add_parser(stage, parents=[common], help=text, description=text)
        if stage == "predict":
            p.add_argument("--text", required=True, help="news text (title and body)")
            p.add_argument("--image", required=True, help="path to the news image")
    synth = sub.add_parser("synth", help="write a small synthetic corpus (manifest.csv + images/)")
    synth.add_argument("--out", required=True, help="directory to write into")
    synth.add_argument("--kind", choices=KINDS, default="separable")
    synth.add_argument("--n", type=int, default=200)
    synth.add_argument("--seed", type=int, default=0)
    return parser


def _flag_values(args: argparse.Namespace) -> dict:
    return {name: parse_value(name, getattr(args, name)) for name in FIELD_TYPES if hasattr(args, name)}


def _run_stage(args: argparse.Namespace) -> int:
    cfg = resolve_config(load_config_file(args.config) if args.config else None, _flag_values(args))
    cfg.out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(cfg.out / ".verifuse.lock"))
    try:
        with lock.acquire(timeout=0):
            if args.command == "predict":
                print(json.dumps(pipeline.run_predict(cfg, args.text, args.image), sort_keys=True))
            else:
                pipeline.STAGES[args.command](cfg)
    except Timeout:
        logger.error("another verifuse process is working in %s", cfg.out)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "synth":
        path = make_corpus(args.out, n=args.n, kind=args.kind, seed=args.seed)
        logger.info("wrote %s", path)
        return 0
    try:
        return _run_stage(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except StageError as exc:
        logger.error("%s", exc)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
