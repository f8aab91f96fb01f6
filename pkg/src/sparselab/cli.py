"""Command line: ``sparselab {run,plan,report,verify}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import ExperimentConfig, parse_config
from .model import ConfigError


def _load(args) -> ExperimentConfig:
    overrides = {}
    if args.seed:
        overrides["seeds"] = ",".join(str(s) for s in args.seed)
    if args.target_sparsity is not None:
        overrides["target_sparsity"] = args.target_sparsity
    if args.technique is not None:
        overrides["technique"] = args.technique
    return parse_config(Path(args.config).read_text(), overrides)


def _cmd_run(args) -> int:
    cfg = _load(args)
    root = harness.output_dir(cfg, args.out)
    try:
        harness.run_experiment(cfg, root)
    except Exception as e:
        logging.getLogger("sparselab").error("run failed: %s (see %s)", e, root / "FAILED")
        return 1
    sys.stdout.write((root / "table.md").read_text())
    print(f"artifacts in {root}")
    return 0


def _cmd_plan(args) -> int:
    cfg = _load(args)
    for t in cfg.technique:
        print(cfg.plan(t).describe())
    return 0


def _cmd_report(args) -> int:
    sys.stdout.write(harness.report(args.dir))
    return 0


def _cmd_verify(args) -> int:
    problems = harness.verify(args.dir)
    for p in problems:
        print(f"FAIL {p}")
    if not problems:
        print(f"OK {args.dir}")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparselab", description="Sparse training experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log run transitions to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="key = value experiment file")
        sp.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
        sp.add_argument("--target-sparsity", help="override target_sparsity")
        sp.add_argument("--technique", help="override technique (comma list)")
        return sp

    run = with_config(sub.add_parser("run", help="train and write artifacts"))
    run.add_argument("--out", help=f"experiment directory (default ${harness.OUT_ENV}/<name>)")
    run.set_defaults(func=_cmd_run)
    with_config(sub.add_parser("plan", help="print the training runs without executing")).set_defaults(
        func=_cmd_plan)
    rep = sub.add_parser("report", help="re-emit the table from an experiment directory")
    rep.add_argument("dir")
    rep.set_defaults(func=_cmd_report)
    ver = sub.add_parser("verify", help="check checksums and mask invariants")
    ver.add_argument("dir")
    ver.set_defaults(func=_cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
