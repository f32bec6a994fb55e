"""Command-line interface for the pipeline stages.

Exit codes: 0 success, 1 validation/config error, 2 missing-stage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .adversarial import AdvConfigError
from .control import ControllerConfigError
from .dataset import DatasetError
from .detector import DetectorConfigError
from .diffusion import DiffusionConfigError
from .metrics import MetricsError
from .pipeline import (
    ConfigError,
    MissingStageError,
    PipelineConfig,
    RunDirError,
    cmd_evaluate,
    cmd_gen_scenes,
    cmd_run_grasp,
    cmd_synthesize,
    cmd_train_detector,
    cmd_train_diffusion,
    default_config,
    run_all,
)
from .scenes import SceneSpecError

_VALIDATION_ERRORS = (ConfigError, RunDirError, SceneSpecError, DiffusionConfigError,
                      AdvConfigError, DetectorConfigError, ControllerConfigError,
                      MetricsError, DatasetError, ValueError)


def _load_config(args) -> PipelineConfig:
    if args.config:
        config = PipelineConfig.from_json(json.loads(Path(args.config).read_text()))
    else:
        config = default_config("smoke")
    config = config.with_overrides(seed=args.seed, variant=args.variant)
    config.validate()
    return config


def _add_common(parser: argparse.ArgumentParser, run_dir: bool = True) -> None:
    parser.add_argument("--config", type=str, default=None, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the global seed")
    parser.add_argument("--variant", type=str, default=None,
                        help="method variant: sim_only | no_adv | adversarial")
    parser.add_argument("--force", action="store_true",
                        help="overwrite existing artifacts / break stale locks")
    if run_dir:
        parser.add_argument("--run-dir", type=str, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simgrasp",
        description="Sim-to-real grasping pipeline: scenes, adversarial layout "
                    "diffusion, detector, grasp trials, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("gen-scenes", "train-diffusion", "synthesize", "train-detector",
                 "run-grasp", "run"):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "train-diffusion":
            p.add_argument("--resume", action="store_true",
                           help="continue from the existing checkpoint")
        if name == "run-grasp":
            p.add_argument("--oracle", action="store_true",
                           help="use ground-truth detections instead of the detector")

    p = sub.add_parser("evaluate")
    p.add_argument("run_dirs", nargs="*", help="completed run directories to compare")
    p.add_argument("--run-dir", type=str, default=None, help="single run directory")
    p.add_argument("--out", type=str, default=None, help="report output directory")

    p = sub.add_parser("init-config", help="write a default config JSON")
    p.add_argument("--scale", type=str, default="smoke", choices=("smoke", "efficacy"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", type=str, default="adversarial")
    p.add_argument("--out", type=str, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "init-config":
            config = default_config(args.scale, seed=args.seed, variant=args.variant)
            Path(args.out).write_text(json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n")
            print(f"wrote {args.out}")
            return 0
        if args.command == "evaluate":
            run_dirs = [Path(d) for d in args.run_dirs]
            if args.run_dir:
                run_dirs.insert(0, Path(args.run_dir))
            result = cmd_evaluate(run_dirs, Path(args.out) if args.out else None)
            print(f"report written to {result['out_dir']}")
            return 0

        config = _load_config(args)
        run_dir = Path(args.run_dir)
        if args.command == "gen-scenes":
            cmd_gen_scenes(config, run_dir, args.force)
        elif args.command == "train-diffusion":
            cmd_train_diffusion(config, run_dir, args.force, resume=args.resume)
        elif args.command == "synthesize":
            cmd_synthesize(config, run_dir, args.force)
        elif args.command == "train-detector":
            cmd_train_detector(config, run_dir, args.force)
        elif args.command == "run-grasp":
            cmd_run_grasp(config, run_dir, args.force, oracle=args.oracle)
        elif args.command == "run":
            run_all(config, run_dir, args.force)
        print(f"{args.command} completed in {run_dir}")
        return 0
    except MissingStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
