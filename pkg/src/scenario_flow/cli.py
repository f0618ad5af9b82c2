#!/usr/bin/env python3
"""Scenario Flow CLI entry point.

This module is thin: argparse setup, config merging, command dispatch
and the package's logging config. Per-feature behaviour lives in:

- ``scenario_flow.scenarios``: synthetic PV/load datasets
- ``scenario_flow.agents``: annotator and judge agents
- ``scenario_flow.flow``: training, sampling, checkpoints
- ``scenario_flow.metrics``: generated-vs-real evaluation
- ``scenario_flow.probe``: linear probes on text embeddings
- ``scenario_flow.config``: run configuration and snapshots
"""

import argparse
import logging
import sys
from pathlib import Path

from .common import ConfigError, NumericError, ensure_output_dir, logger
from .config import LOG_LEVELS, RunConfig, load_run_config, override, write_run_snapshot

# argparse dest -> dotted config field, per command.
FLAG_FIELDS = {
    "synth-data": {
        "kind": "synth_data.kind",
        "n": "synth_data.n",
        "length": "synth_data.length",
        "net_levels": "synth_data.net_levels",
    },
    "annotate": {
        "dataset": "annotate.dataset",
        "embedding_dim": "annotate.embedding_dim",
    },
    "train": {
        "dataset": "train.dataset",
        "embeddings": "train.embeddings",
        "resume": "train.resume",
        "epochs": "train.train.epochs",
        "batch_size": "train.train.batch_size",
        "lr": "train.train.learning_rate",
        "mgda_enabled": "train.train.mgda_enabled",
        "static_lambda": "train.train.static_lambda",
        "optimizer": "train.train.optimizer",
        "lr_schedule": "train.train.lr_schedule",
        "max_steps": "train.train.max_steps",
    },
    "sample": {
        "checkpoint": "sample.checkpoint",
        "prompts": "sample.prompts",
        "embeddings": "sample.embeddings",
        "steps": "sample.steps",
        "per_prompt": "sample.per_prompt",
        "workers": "sample.workers",
    },
    "eval": {
        "real": "eval.real",
        "generated": "eval.generated",
    },
    "probe": {
        "dataset": "probe.dataset",
        "embeddings": "probe.embeddings",
    },
    "judge": {
        "generated": "judge.generated",
    },
}
GLOBAL_FIELDS = {
    "seed": "global.seed",
    "output_dir": "global.output_dir",
    "log_level": "global.log_level",
}


def _configure_logging() -> None:
    """Attach a stderr handler to the package logger when run as a CLI.

    Library callers can configure their own handlers by importing
    ``scenario_flow.common.logger``. We only attach a default handler if
    none is configured yet, so re-imports stay idempotent.
    """
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
        logger.addHandler(handler)
        logger.setLevel(logging.INFO)


def _required(value: str | None, flag: str, command: str) -> Path:
    if value is None:
        raise ConfigError(f"{command} needs {flag} (or the matching key in --config)")
    return Path(value).expanduser().resolve()


def _optional(value: str | None) -> Path | None:
    return None if value is None else Path(value).expanduser().resolve()


def _build_parser() -> argparse.ArgumentParser:
    from . import __version__

    parser = argparse.ArgumentParser(
        prog="scenario-flow",
        description=(
            "Generate text-conditioned daily PV and load scenarios with a rectified "
            "flow model, annotate and judge them, and evaluate generated sets."
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Synthesize and annotate a small PV dataset:
  scenario-flow synth-data --kind pv --n 512 --length 64 --output-dir runs/data
  scenario-flow annotate --dataset runs/data/dataset.jsonl --output-dir runs/data

  # Train, then sample 4 scenarios per prompt with 5 Euler steps:
  scenario-flow train --dataset runs/data/annotated.jsonl --epochs 300 --output-dir runs/model
  scenario-flow sample --checkpoint runs/model/checkpoint.pt \\
      --prompts runs/data/annotated.jsonl --per-prompt 4 --steps 5 --output-dir runs/gen

  # Score the generated set:
  scenario-flow eval --real runs/data/dataset.jsonl --generated runs/gen/generated.jsonl
  scenario-flow judge --generated runs/gen/generated.jsonl
  scenario-flow probe --dataset runs/data/annotated.jsonl

Reproducibility:
  Every command writes resolved-config.json and run.json into the output
  directory. Re-running with --config <resolved-config.json> repeats it.
""",
    )

    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {__version__}",
    )

    # Flags shared by every command; None means "keep the config file value".
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON run configuration (e.g. a previous resolved-config.json)")
    common.add_argument("--seed", type=int, default=None, help="Global seed (default: 0)")
    common.add_argument("--output-dir", "-o", type=str, default=None,
                        help="Directory for all outputs (default: out)")
    common.add_argument("--log-level", choices=LOG_LEVELS, default=None,
                        help="Logging level (default: INFO)")

    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    # synth-data command
    synth_parser = subparsers.add_parser(
        "synth-data", parents=[common],
        help="Generate a synthetic dataset with ground-truth labels",
    )
    synth_parser.add_argument("--kind", choices=["pv", "load"], default=None,
                              help="Scenario kind (default: pv)")
    synth_parser.add_argument("--n", type=int, default=None,
                              help="Number of scenarios (default: 512)")
    synth_parser.add_argument("--length", type=int, default=None,
                              help="Steps per day (default: 64)")
    synth_parser.add_argument("--net-levels", type=int, default=None,
                              help="U-Net levels to check length divisibility against (default: 4)")

    # annotate command
    annotate_parser = subparsers.add_parser(
        "annotate", parents=[common],
        help="Write prompts, the vocabulary and reference embeddings for a dataset",
    )
    annotate_parser.add_argument("--dataset", type=str, default=None,
                                 help="Dataset JSONL (from synth-data)")
    annotate_parser.add_argument("--embedding-dim", type=int, default=None,
                                 help="Reference embedding width (default: 64)")

    # train command
    train_parser = subparsers.add_parser(
        "train", parents=[common],
        help="Train the velocity network on an annotated dataset",
    )
    train_parser.add_argument("--dataset", type=str, default=None,
                              help="Annotated dataset JSONL")
    train_parser.add_argument("--embeddings", type=str, default=None,
                              help="Imported embeddings JSONL keyed by id "
                                   "(default: reference-encode the prompts)")
    train_parser.add_argument("--epochs", type=int, default=None, help="Epochs (default: 100)")
    train_parser.add_argument("--batch-size", type=int, default=None,
                              help="Minibatch size (default: 64)")
    train_parser.add_argument("--lr", type=float, default=None,
                              help="Learning rate (default: 0.01)")
    train_parser.add_argument("--no-mgda", dest="mgda_enabled", action="store_const",
                              const=False, default=None,
                              help="Use the static sum L_time + lambda * L_freq instead of MGDA")
    train_parser.add_argument("--static-lambda", type=float, default=None,
                              help="Weight of the frequency loss with --no-mgda (default: 0)")
    train_parser.add_argument("--optimizer", choices=["sgd", "adamw"], default=None,
                              help="Optimizer (default: sgd)")
    train_parser.add_argument("--lr-schedule", choices=["constant", "one_cycle"], default=None,
                              help="Learning-rate schedule (default: constant)")
    train_parser.add_argument("--max-steps", type=int, default=None,
                              help="Stop after this many steps")
    train_parser.add_argument("--resume", type=str, default=None,
                              help="Checkpoint to continue training from")

    # sample command
    sample_parser = subparsers.add_parser(
        "sample", parents=[common],
        help="Generate scenarios for every prompt with the Euler sampler",
    )
    sample_parser.add_argument("--checkpoint", type=str, default=None, help="Checkpoint file")
    sample_parser.add_argument("--prompts", type=str, default=None,
                               help="JSONL of {id, prompt, metadata} records")
    sample_parser.add_argument("--embeddings", type=str, default=None,
                               help="Imported embeddings JSONL keyed by prompt id")
    sample_parser.add_argument("--steps", type=int, default=None,
                               help="Euler steps (default: 50)")
    sample_parser.add_argument("--per-prompt", type=int, default=None,
                               help="Scenarios per prompt (default: 1)")
    sample_parser.add_argument("--workers", type=int, default=None,
                               help="Worker threads over prompts (default: 1)")

    # eval command
    eval_parser = subparsers.add_parser(
        "eval", parents=[common],
        help="Compare a generated dataset against a real one",
    )
    eval_parser.add_argument("--real", type=str, default=None, help="Real dataset JSONL")
    eval_parser.add_argument("--generated", type=str, default=None,
                             help="Generated dataset JSONL")

    # probe command
    probe_parser = subparsers.add_parser(
        "probe", parents=[common],
        help="Linear probes from prompt embeddings to scenario labels",
    )
    probe_parser.add_argument("--dataset", type=str, default=None,
                              help="Annotated dataset JSONL")
    probe_parser.add_argument("--embeddings", type=str, default=None,
                              help="Imported embeddings JSONL (default: reference-encode)")

    # judge command
    judge_parser = subparsers.add_parser(
        "judge", parents=[common],
        help="Score generated scenarios against their prompts' metadata",
    )
    judge_parser.add_argument("--generated", type=str, default=None,
                              help="Generated dataset JSONL")

    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config) if args.config is not None else RunConfig()
    for dest, dotted in (GLOBAL_FIELDS | FLAG_FIELDS[args.command]).items():
        cfg = override(cfg, dotted, getattr(args, dest, None))
    return cfg.resolved()


def _dispatch(command: str, cfg: RunConfig, output_dir: Path) -> int:
    seed = cfg.global_.seed

    if command == "synth-data":
        from .scenarios import run_synth_data

        c = cfg.synth_data
        return run_synth_data(c.kind, c.n, c.length, seed, output_dir,
                              net_levels=c.net_levels, event_probability=c.event_probability)

    elif command == "annotate":
        from .agents import run_annotate

        c = cfg.annotate
        return run_annotate(_required(c.dataset, "--dataset", command), output_dir,
                            embedding_dim=c.embedding_dim, seed=seed)

    elif command == "train":
        from .flow import run_train

        c = cfg.train
        return run_train(
            _required(c.dataset, "--dataset", command),
            output_dir,
            net_cfg=c.net,
            train_cfg=c.train,
            embeddings_path=_optional(c.embeddings),
            resume=_optional(c.resume),
        )

    elif command == "sample":
        from .flow import run_sample

        c = cfg.sample
        return run_sample(
            _required(c.checkpoint, "--checkpoint", command),
            _required(c.prompts, "--prompts", command),
            output_dir,
            steps=c.steps,
            per_prompt=c.per_prompt,
            seed=seed,
            workers=c.workers,
            embeddings_path=_optional(c.embeddings),
        )

    elif command == "eval":
        from .metrics import run_eval

        c = cfg.eval
        return run_eval(_required(c.real, "--real", command),
                        _required(c.generated, "--generated", command),
                        output_dir, c.metrics)

    elif command == "probe":
        from .probe import run_probe

        c = cfg.probe
        return run_probe(_required(c.dataset, "--dataset", command), output_dir,
                         embeddings_path=_optional(c.embeddings),
                         embedding_dim=c.embedding_dim, seed=seed)

    elif command == "judge":
        from .agents import run_judge

        return run_judge(_required(cfg.judge.generated, "--generated", command), output_dir)

    return 0


def main() -> int:
    """Main CLI entrypoint."""
    _configure_logging()

    parser = _build_parser()
    args = parser.parse_args()

    if args.command is None:
        parser.print_help()
        return 1

    try:
        cfg = _resolve_config(args)
        logger.setLevel(cfg.log_level)
        output_dir = ensure_output_dir(Path(cfg.global_.output_dir))
        write_run_snapshot(cfg, args.command, output_dir)
        return _dispatch(args.command, cfg, output_dir)
    except NumericError as e:
        logger.error(str(e))
        return 2
    except (ValueError, OSError) as e:
        logger.error(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
