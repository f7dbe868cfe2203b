"""Main entry point for the gccpm command line.

Set as entrypoint in ``pyproject.toml``
"""
from __future__ import annotations
import os
import sys
import argparse
import importlib
import logging

from gccpm.__about__ import __version__
from gccpm._loggers import setup_logger, print_args

PROFILE_THREADS_ENV = "GCCPM_PROFILE_THREADS"
THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _pin_profile_threads(argv: list[str]) -> None:
    """Fix the BLAS thread count for ``profile`` before numpy is first imported."""
    if "profile" not in argv:
        return
    threads = os.environ.get(PROFILE_THREADS_ENV, "1")
    for name in THREAD_ENV_VARS:
        os.environ[name] = threads


def main(argv: list[str] | None = None) -> None:
    """Main function for entry point of the gccpm commands.

    :param argv: used in tests default None
    :raises SystemExit: Raises a system exit when the command function exits.
    """
    _pin_profile_threads(sys.argv[1:] if argv is None else list(argv))
    parser = argparse.ArgumentParser(
        prog="gccpm",
        epilog="See '<command> --help' to read about a specific sub-command.",
        allow_abbrev=False,
    )
    version = f"gccpm {__version__}"
    parser.add_argument("--version", action="version", version=version)
    subparsers = parser.add_subparsers(dest="command", help="Sub-commands", metavar="")
    # add new entry point here
    cmds = [
        ("synth", "synth"),
        ("train", "train"),
        ("eval", "evaluate"),
        ("analyze", "analyze"),
        ("profile", "profile"),
        ("erf", "erf"),
        ("augment-preview", "augment_preview"),
        ("validate", "validate"),
    ]
    # Entry point is imported during runtime, and added as a sub command to gccpm
    for cmd, module in cmds:
        _module = importlib.import_module(f"gccpm.entry_points.{module}")
        _parser = subparsers.add_parser(
            cmd, help=_module._help, description=_module._help, allow_abbrev=False
        )
        for *flags, opts in _module._cli:
            _parser.add_argument(*flags, **opts)
        _parser.set_defaults(func=_module.run)

    # unknown flags are an error here, before any command has side effects
    args = parser.parse_args(argv)

    if args.command is not None:
        logger = setup_logger(
            "gccpm",
            level=getattr(logging, args.log_level.upper()),
            log_format=args.log_format,
            log_console=True,
            log_file=args.log_file,
        )
        logger.info(" ".join(sys.argv) if argv is None else " ".join(argv))
        print_args(args, printer=logger.info, exclude=["func"])
        raise SystemExit(args.func(parser, args, []))
    else:
        parser.print_help()


if __name__ == "__main__":
    main()
