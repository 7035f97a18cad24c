from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from app import __version__
from app.config import ExperimentConfig
from app.exceptions import (
    ArtifactError,
    PredictorError,
    SimulatorError,
    TrainingError,
    ValidationError,
)
from app.harness import (
    EVAL_MODELS,
    cmd_evaluate,
    cmd_generate,
    cmd_report,
    cmd_run,
    cmd_train,
    parse_condition,
)
from app.predictors import PREDICTOR_NAMES

EXIT_OK, EXIT_VALIDATION, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3

logger = logging.getLogger("subretinal")


# ────────────────────────── Helpers ──────────────────────────
def _configure_logging(out_dir: Path, verbose: bool) -> None:
    """Console handler plus <out>/logs/subretinal.log (one handler per path)."""
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in logger.handlers):
        console = logging.StreamHandler()
        console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(console)
    for h in logger.handlers:
        if not isinstance(h, logging.FileHandler):
            h.setLevel(logging.DEBUG if verbose else logging.INFO)

    log_path = (out_dir / "logs" / "subretinal.log").resolve()
    log_path.parent.mkdir(parents=True, exist_ok=True)
    existing = {getattr(h, "baseFilename", None) for h in logger.handlers}
    if str(log_path) not in existing:
        handler = logging.FileHandler(log_path, encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(message)s"))
        logger.addHandler(handler)


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file, then environment, then command-line flags."""
    environ = dict(os.environ)
    flags = {
        "RUN_SEED": args.seed,
        "RUN_SEEDS": args.seeds,
        "RUN_OUT_DIR": args.out,
        "RUN_DURATION_S": getattr(args, "duration", None),
        "RUN_SAMPLE_RATE_HZ": getattr(args, "rate", None),
    }
    environ.update({key: str(value) for key, value in flags.items() if value is not None})
    return ExperimentConfig.load(args.config, environ)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="dotenv-format experiment config")
    common.add_argument("--seed", type=int, help="base seed (RUN_SEED)")
    common.add_argument("--seeds", type=int, help="number of seeds for batch runs (RUN_SEEDS)")
    common.add_argument("--out", type=Path, help="output directory (RUN_OUT_DIR)")
    common.add_argument("--condition", help="single grid condition, e.g. 0.1x8")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="subretinal", description="Autonomous subretinal injection simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="write synthetic traces for the grid")
    gen.add_argument("--duration", type=float, help="trace length in seconds (RUN_DURATION_S)")
    gen.add_argument("--rate", type=float, help="sample rate in Hz (RUN_SAMPLE_RATE_HZ)")

    sub.add_parser("train", parents=[common], help="train per-condition and pooled LSTM models")

    ev = sub.add_parser("evaluate", parents=[common], help="held-out LSTM vs FFT grid report")
    ev.add_argument("--model", choices=PREDICTOR_NAMES, help="evaluate only this predictor")

    run = sub.add_parser("run", parents=[common], help="closed-loop procedure over seeds")
    run.add_argument("--model", choices=PREDICTOR_NAMES, help="predictor (RUN_PREDICTOR)")

    rep = sub.add_parser("report", parents=[common], help="merge output directories into tables")
    rep.add_argument("run_dirs", nargs="+", type=Path)
    return parser


# ────────────────────────── Commands ──────────────────────────
def dispatch(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    _configure_logging(cfg.out_dir, args.verbose)
    logger.debug("%s", cfg)
    conditions = [parse_condition(args.condition)] if args.condition else None

    if args.command == "generate":
        print(f"Manifest written to {cmd_generate(cfg, conditions)}")
    elif args.command == "train":
        for path in cmd_train(cfg, conditions):
            print(f"Model written to {path}")
    elif args.command == "evaluate":
        models = (args.model,) if args.model else EVAL_MODELS
        print(f"Grid report written to {cmd_evaluate(cfg, models, conditions)}")
    elif args.command == "run":
        batch = cmd_run(cfg, args.model, conditions[0] if conditions else None)
        ok = int(batch["injection_success"].sum())
        print(f"{ok}/{len(batch)} successful injections")
        if ok < len(batch):
            return EXIT_ABORT
    elif args.command == "report":
        for path in cmd_report(args.run_dirs, cfg.out_dir / "report"):
            print(f"Table written to {path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except ValidationError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingError as exc:
        print(f"Training failed: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ArtifactError, PredictorError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SimulatorError as exc:  # pragma: no cover
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_ABORT


# ────────────────────────── Entrypoint ──────────────────────────
if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n Exiting…")
        sys.exit(130)
