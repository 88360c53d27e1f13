"""Command-line entry point.

Subcommands mirror the pipeline stages (`pretrain`, `embed`, `downstream`,
`attack`, `verify`), plus `all` for the whole chain and `report` to render
metrics tables.  Every stage command takes --config and --out; --seed
overrides the config's master seed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import pipeline, report
from .checkpoint import CheckpointError
from .config import ConfigError, load_config

_STAGE_COMMANDS = {
    "pretrain": ("pretrain",),
    "embed": ("embed",),
    "downstream": ("downstream",),
    "attack": ("attack",),
    "verify": ("verify",),
    "all": pipeline.STAGES,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="encwm",
        description="Watermark contrastively pre-trained encoders, attack them, "
                    "and verify ownership by black-box query.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, stages in _STAGE_COMMANDS.items():
        help_text = ("run the full pipeline" if name == "all"
                     else f"run the {stages[0]} stage")
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (default: config / $ENCWM_OUT_ROOT)")
        p.add_argument("--seed", type=int, help="override the config's master seed")
    p = sub.add_parser("report", help="render metrics tables from a run directory")
    p.add_argument("--out", required=True, help="run directory (or parent of run directories)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(report.write_report(args.out), end="")
            return 0
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out_dir = pipeline.resolve_out_dir(args.out, cfg)
        pipeline.run(cfg, out_dir, stages=_STAGE_COMMANDS[args.command])
        if args.command == "all":
            report.write_report(out_dir)
        print(f"done: {out_dir}")
        return 0
    except (ConfigError, CheckpointError, pipeline.PipelineError, report.ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
