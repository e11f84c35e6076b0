"""
Hypocert
Main entry point for the command-line tool.
Parses flags, configures logging and hands the subcommand to the harness.
"""

import argparse
import logging
import sys

from harness import SUBCOMMANDS, emit_report, load_config, run
from hypocert_base import TOOL_VERSION, ConfigError, ExitCode


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; usage errors are 1 here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ExitCode.USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="hypocert",
        description="Verify Harris-theorem conditions for kinetic Langevin dynamics.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS + ("report",))
    parser.add_argument("--config", metavar="PATH", help="INI experiment config")
    parser.add_argument("--seed", type=int, metavar="U64", help="master seed override")
    parser.add_argument("--out", metavar="DIR", help="output directory override")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")
    return parser


def main(argv=None) -> int:
    """Run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")

    if args.subcommand == "report":
        try:
            out = load_config(args.config, args.overrides, args.seed, args.out).out
        except ConfigError as err:
            logging.getLogger("hypocert").error("config error: %s", err)
            return ExitCode.USAGE
        print(emit_report(out))
        return ExitCode.OK

    code = run(args.subcommand, args.config, args.overrides, args.seed, args.out)
    if code != ExitCode.USAGE:
        print(emit_report(load_config(args.config, args.overrides, args.seed, args.out).out))
    return code


if __name__ == '__main__':
    sys.exit(main())
