"""Command-line surface.

Exit codes: 0 success, 2 config validation error, 3 stage failure. Every
invocation appends a machine-readable record to ``<out>/run_log.jsonl``;
re-running a subcommand whose record and artifacts are already present for
the same config hash is a no-op unless --force is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import experiments
from .config import ConfigValidationError, dump_config, validate_config
from .experiments import StageFailure, Workspace, make_workspace

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("ingest", "train-classifier", "train-gan", "select-generator",
               "build-argan", "attack", "evaluate", "sweep", "report",
               "reproduce-paper", "reproduce-desk")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE_FAILURE = 3


def _run_log_path(ws: Workspace) -> Path:
    return ws.out_dir / "run_log.jsonl"


def _log_record(ws: Workspace, record: dict) -> None:
    with open(_run_log_path(ws), "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _previous_success(ws: Workspace, subcommand: str) -> dict | None:
    path = _run_log_path(ws)
    if not path.is_file():
        return None
    last = None
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if (rec.get("subcommand") == subcommand and rec.get("status") == "ok"
                    and rec.get("config_hash") == ws.hash):
                last = rec
    if last and all(Path(p).exists() for p in last.get("artifacts", [])):
        return last
    return None


def _cmd_ingest(ws: Workspace) -> list[str]:
    splits = experiments.prepare_dataset(ws)
    return [str(ws.data_dir / "manifest.csv")] + [s.split_tag for s in splits.values()]


def _cmd_stage(ws: Workspace, stage: str) -> list[str]:
    """Run the training framework through a prefix of its stages."""
    from .framework import run_framework
    splits = experiments.prepare_dataset(ws)
    run_framework(splits["train"], splits["validation"],
                  experiments.gan_config_from(ws.config), experiments.recon_config_from(ws.config),
                  ws.state_dir, experiments.framework_config_from(ws.config),
                  stop_after=stage)
    return [str(ws.state_dir / "stage_log.jsonl")]


def _cmd_build_argan(ws: Workspace) -> list[str]:
    splits = experiments.prepare_dataset(ws)
    experiments.build_defense_suite(ws, splits)
    return [str(ws.state_dir / "stage_log.jsonl"), str(ws.state_dir / "classifier2.pt")]


def _prepared_suite(ws: Workspace):
    splits = experiments.prepare_dataset(ws)
    state, ctx = experiments.build_defense_suite(ws, splits)
    return splits, state, ctx


def _cmd_attack(ws: Workspace) -> list[str]:
    splits, state, ctx = _prepared_suite(ws)
    return [str(p) for p in experiments.run_attack_stage(ws, splits, state, ctx)]


def _cmd_evaluate(ws: Workspace) -> list[str]:
    splits, state, ctx = _prepared_suite(ws)
    return [str(p) for p in experiments.run_evaluate(ws, splits, state, ctx)]


def _cmd_sweep(ws: Workspace) -> list[str]:
    splits, state, ctx = _prepared_suite(ws)
    return [str(experiments.run_sweep(ws, splits, ctx))]


def _cmd_report(ws: Workspace) -> list[str]:
    report = experiments.write_report(ws)
    return [str(report / "table2.csv"), str(report / "table3.csv"),
            str(report / "table4.csv"), str(report / "meta.json")]


def _cmd_reproduce(ws: Workspace) -> list[str]:
    report = experiments.reproduce(ws)
    return [str(report / "table2.csv"), str(report / "meta.json")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="argan",
        description="Reconstruction-defense experiments: train, attack, evaluate, report.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=str, default=None, help="JSON config file")
    parser.add_argument("--out", type=str, default=None, help="output directory override")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--force", action="store_true",
                        help="re-run even if artifacts for this config already exist")
    parser.add_argument("--profile", choices=("paper", "desk"), default=None,
                        help="preset applied beneath explicit config values")
    parser.add_argument("--show-config", action="store_true",
                        help="print the resolved config (with value origins) and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s: %(message)s")

    profile = args.profile
    if profile is None and args.subcommand == "reproduce-desk":
        profile = "desk"
    elif profile is None and args.subcommand == "reproduce-paper":
        profile = "paper"

    try:
        config, cfg_hash, origins = validate_config(args.config, profile=profile)
        if args.seed is not None:
            config["seed"] = args.seed
            config, cfg_hash, origins = validate_config(config, profile=profile)
    except ConfigValidationError as e:
        print(json.dumps({"error": {"kind": "validation", "message": str(e)}}),
              file=sys.stderr)
        return EXIT_VALIDATION

    if args.show_config:
        print(dump_config(config, origins))
        return EXIT_OK

    try:
        ws = make_workspace(config, cfg_hash, out_dir=args.out, force=args.force)
    except StageFailure as e:
        print(json.dumps({"error": {"kind": "workspace", "message": str(e)}}),
              file=sys.stderr)
        return EXIT_VALIDATION

    if not args.force:
        prior = _previous_success(ws, args.subcommand)
        if prior is not None:
            print(f"{args.subcommand}: up to date for config {cfg_hash[:12]} "
                  "(use --force to re-run)")
            return EXIT_OK

    handlers = {
        "ingest": _cmd_ingest,
        "train-classifier": lambda w: _cmd_stage(w, "classifier_1"),
        "train-gan": lambda w: _cmd_stage(w, "gan_set"),
        "select-generator": lambda w: _cmd_stage(w, "selection"),
        "build-argan": _cmd_build_argan,
        "attack": _cmd_attack,
        "evaluate": _cmd_evaluate,
        "sweep": _cmd_sweep,
        "report": _cmd_report,
        "reproduce-paper": _cmd_reproduce,
        "reproduce-desk": _cmd_reproduce,
    }

    record = {"subcommand": args.subcommand, "config_hash": cfg_hash,
              "profile": profile, "started_at": time.time()}
    try:
        artifacts = handlers[args.subcommand](ws)
    except Exception as e:
        record.update({"status": "error", "finished_at": time.time(),
                       "error": {"kind": type(e).__name__, "message": str(e)}})
        _log_record(ws, record)
        print(json.dumps({"error": record["error"]}), file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_STAGE_FAILURE
    record.update({"status": "ok", "finished_at": time.time(),
                   "artifacts": [a for a in artifacts if a and Path(str(a)).exists()]})
    _log_record(ws, record)
    print(f"{args.subcommand}: done ({len(artifacts)} artifacts, config {cfg_hash[:12]})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
