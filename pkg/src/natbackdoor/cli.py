"""Command-line entry point: ``natbackdoor <command> --config exp.yaml [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ExperimentConfig, load_config
from .errors import ConfigurationError

log = logging.getLogger("natbackdoor")

COMMANDS = ("train-substitutes", "gen-trigger", "eval-attack", "eval-defense", "split-data", "plot", "run")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output root; each invocation writes a new run-NNN directory")
    common.add_argument("--verify-fp64", action="store_true",
                        help="float64, single-threaded deterministic numerics")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="natbackdoor", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-substitutes", parents=[common], help="competitive-distillation ensemble only")
    sub.add_parser("gen-trigger", parents=[common], help="generate a trigger (trains substitutes alongside)")
    for name, what in (("eval-attack", "attack metrics"), ("eval-defense", "defense battery")):
        p = sub.add_parser(name, parents=[common], help=f"{what} for a trigger from an earlier run")
        p.add_argument("--from", dest="source", type=Path, required=True,
                       help="run directory holding trigger.npz (and optionally targets/)")
    sub.add_parser("split-data", parents=[common], help="write the attacker/owner split plan")
    p = sub.add_parser("plot", parents=[common], help="render figures for a run directory")
    p.add_argument("artifact_dir", type=Path)
    sub.add_parser("run", parents=[common], help="full pipeline with checks and figures")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = str(args.out)
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _load(args)
    except (ConfigurationError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    pipeline.configure_numerics(args.verify_fp64)

    if args.command == "plot":
        from .plots import emit_plots
        try:
            paths = emit_plots(args.artifact_dir)
        except (FileNotFoundError, FileExistsError) as exc:
            print(str(exc), file=sys.stderr)
            return 2
        for p in paths:
            print(p)
        return 0

    if args.command == "run":
        try:
            run_dir, summary = pipeline.run_experiment(cfg)
        except Exception as exc:  # noqa: BLE001 - failure record already written
            print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 2
        print(run_dir)
        for name, check in summary["checks"].items():
            print(f"{'PASS' if check['passed'] else 'FAIL'} {name} value={check['value']}")
        return 0 if summary["passed"] else 1

    run_dir = pipeline.new_run_dir(cfg.output_dir)
    (run_dir / "config.yaml").write_text(cfg.dump())
    try:
        ws = pipeline.load_workspace(cfg)
        if args.command == "split-data":
            pipeline.write_json(run_dir / "split.json", ws.plan.to_dict())
        elif args.command == "train-substitutes":
            report = pipeline.stage_train_substitutes(cfg, ws, run_dir)
            print(json.dumps(report["val_accuracy_history"][-1:] if report["val_accuracy_history"] else []))
        elif args.command == "gen-trigger":
            artifact = pipeline.stage_gen_trigger(cfg, ws, run_dir)
            print(f"ensemble ASR {artifact.provenance['ensemble_asr']}")
        elif args.command == "eval-attack":
            artifact, targets = pipeline.load_artifact_dir(args.source)
            targets = targets or pipeline.obtain_targets(cfg, ws, run_dir)
            substitutes = None
            if cfg.attack.uap.enabled and (args.source / "ensemble").is_dir():
                from .distill import load_ensemble
                substitutes = load_ensemble(args.source / "ensemble").models
            pipeline.stage_eval_attack(cfg, ws, run_dir, artifact, targets, substitutes)
        elif args.command == "eval-defense":
            artifact, targets = pipeline.load_artifact_dir(args.source)
            targets = targets or pipeline.obtain_targets(cfg, ws, run_dir)
            pipeline.stage_eval_defense(cfg, ws, run_dir, artifact, targets)
    except Exception as exc:  # noqa: BLE001
        pipeline.write_json(run_dir / "failure.json", {"stage": args.command,
                                                       "error": f"{type(exc).__name__}: {exc}"})
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
