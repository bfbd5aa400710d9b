"""Command-line entry point: every pipeline stage as a subcommand.

Configuration comes from a JSON file (strict keys) plus flag overrides; flags win.
The run directory defaults to the ATM_RUN_DIR environment variable. On failure a
machine-readable error record is printed to stderr and the exit status is nonzero.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import pipeline
from .config import RunConfig
from .util import AtmError, ConfigError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atmlab",
        description="Adversarial tuning laboratory for retrieval-augmented QA: "
                    "corpus generation, agent tuning, the adversarial loop, and "
                    "every evaluation artifact.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    stages = {
        "gen-corpus": "generate the synthetic world, QA splits, and document store",
        "pretrain-attacker": "bootstrap the attacker on entity-swap fabrications",
        "init-tune": "initial supervised tuning of the generator (round 0)",
        "loop": "run the adversarial tuning rounds",
        "eval": "evaluate a round's generator on the clean and attacked benchmarks",
        "sweep": "fabrication-count sweep at a fixed total list size",
        "analyze": "emit density/recall artifacts and print the summary table",
    }
    for name, help_text in stages.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", default=None,
                       help="JSON config file; unknown keys are rejected")
        p.add_argument("--run-dir", metavar="PATH",
                       default=os.environ.get("ATM_RUN_DIR"),
                       help="run directory (default: $ATM_RUN_DIR)")
        p.add_argument("--seed", type=int, default=None,
                       help="override every named seed with this value")
        p.add_argument("--workers", type=int, default=None,
                       help="parallel workers for fabrication/evaluation")
        if name in ("eval", "sweep"):
            p.add_argument("--round", type=int, default=None,
                           help="round checkpoint to target (default: latest)")
    return parser


def _load_config(args: argparse.Namespace) -> tuple[RunConfig, str]:
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.override_seeds(args.seed)
    if args.workers is not None:
        cfg.tree["workers"] = args.workers
    if not args.run_dir:
        raise ConfigError("no run directory: pass --run-dir or set ATM_RUN_DIR")
    return cfg, args.run_dir


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, run_dir = _load_config(args)
        if args.command == "gen-corpus":
            pipeline.stage_gen_corpus(cfg, run_dir)
            print(f"corpus written under {pipeline.corpus_dir(run_dir)}")
        elif args.command == "pretrain-attacker":
            path = pipeline.stage_pretrain_attacker(cfg, run_dir)
            print(f"attacker checkpoint written to {path}")
        elif args.command == "init-tune":
            path = pipeline.stage_init_tune(cfg, run_dir)
            print(f"generator checkpoint written to {path}")
        elif args.command == "loop":
            state = pipeline.stage_loop(cfg, run_dir)
            print(f"loop finished at round {state.round_index}")
        elif args.command == "eval":
            metrics = pipeline.stage_eval(cfg, run_dir, args.round)
            print(json.dumps(metrics["attacked"], sort_keys=True))
        elif args.command == "sweep":
            rows = pipeline.stage_sweep(cfg, run_dir, args.round)
            for row in rows:
                print(f"n_fab={row['n_fab']:>2}  subspan_em={100 * row['subspan_em']:.2f}")
        elif args.command == "analyze":
            summary = pipeline.stage_analyze(cfg, run_dir)
            print(pipeline.format_summary(summary))
    except AtmError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
