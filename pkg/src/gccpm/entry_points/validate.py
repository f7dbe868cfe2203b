"""Validate run configuration TOML files.

This script checks that a run configuration can be loaded: every key is known,
every value has the right type, every section invariant holds and the
sections agree on image and heatmap sizes. On success a description of the
run is logged; otherwise every problem is logged as a tree and the first one
is printed on a single ``gccpm: error:`` line.

Example run command::

   gccpm validate my_run.toml
"""

import logging
import sys

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from gccpm._cli_args import BASE_ARGS
from gccpm._config import RunConfig
from gccpm._utils import report_failure

_help = "Run configuration TOML validator"
_cli = BASE_ARGS + (
    ("toml", dict(help="TOML file to validate")),
    (
        "--no-describe",
        dict(
            help="Do not describe the run configuration (default: False)",
            action="store_true",
        ),
    ),
)


def run(parser, args, extras) -> int:
    """Runs the validate entry point"""
    logger = logging.getLogger(f"gccpm.{args.command}")
    try:
        config = RunConfig.from_file(args.toml, logger=logger)
    except (BaseExceptionGroup, ValueError, OSError) as exc:
        logger.error(f"Could not load TOML config ({args.toml}), see below for details:")
        return report_failure(logger, args.command, exc)
    logger.info("Loaded TOML config without error")
    if not args.no_describe:
        logger.info(config.describe())
    return 0
