"""Time every layer of a forward pass.

Profiles the configured model, or with ``--bottleneck`` a stack of residual
bottleneck units on a ``--channels`` × ``--map-size`` feature map. Prints the
per-layer table and the time share of every op kind.

The numeric libraries are held to ``GCCPM_PROFILE_THREADS`` threads (1 unless
set) so timings are comparable between runs.

Example run command::

   gccpm profile --bottleneck --channels 64 --depth 8 --csv bottleneck.csv
"""

import logging
import sys

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from gccpm._cli_args import CONFIG_ARGS
from gccpm._config import load_run_config
from gccpm._utils import report_failure
from gccpm.analyzer import (
    format_op_kind_table,
    format_stats_table,
    group_by_op_kind,
    profile,
    write_stats_csv,
)
from gccpm.model import build_bottleneck_stack, build_model

DEFAULT_CHANNELS = 64
DEFAULT_DEPTH = 8
DEFAULT_MAP_SIZE = 32
DEFAULT_WARMUP = 2
DEFAULT_ITERS = 5

_help = "Per-layer forward timings"
_cli = CONFIG_ARGS + (
    (
        "--bottleneck",
        dict(
            action="store_true",
            help="Profile a residual bottleneck stack instead of the model (default: False)",
        ),
    ),
    (
        "--channels",
        dict(
            metavar="C",
            type=int,
            default=DEFAULT_CHANNELS,
            help=f"Bottleneck stack width (default: {DEFAULT_CHANNELS})",
        ),
    ),
    (
        "--depth",
        dict(
            metavar="N",
            type=int,
            default=DEFAULT_DEPTH,
            help=f"Bottleneck units (default: {DEFAULT_DEPTH})",
        ),
    ),
    (
        "--map-size",
        dict(
            metavar="PX",
            type=int,
            default=DEFAULT_MAP_SIZE,
            help=f"Side of the bottleneck input map (default: {DEFAULT_MAP_SIZE})",
        ),
    ),
    (
        "--warmup",
        dict(
            metavar="N",
            type=int,
            default=DEFAULT_WARMUP,
            help=f"Untimed passes first (default: {DEFAULT_WARMUP})",
        ),
    ),
    (
        "--iters",
        dict(
            metavar="N",
            type=int,
            default=DEFAULT_ITERS,
            help=f"Timed passes (default: {DEFAULT_ITERS})",
        ),
    ),
    (
        "--csv",
        dict(
            metavar="PATH",
            default=None,
            help="Also write the per-layer table as CSV (default: None)",
        ),
    ),
)


def run(parser, args, extras) -> int:
    logger = logging.getLogger(f"gccpm.{args.command}")
    try:
        config = load_run_config(args.config, args.seed, logger)
        seed = config.train.seed
        if args.bottleneck:
            model = build_bottleneck_stack(args.channels, args.depth, seed=seed)
            shape = (1, args.channels, args.map_size, args.map_size)
        else:
            model = build_model(config.model, seed=seed)
            size = config.model.input_size
            shape = (1, 3, size, size)
        stats = profile(model, shape, warmup=args.warmup, iters=args.iters, seed=seed)
        if args.csv is not None:
            write_stats_csv(stats, args.csv)
    except (BaseExceptionGroup, ValueError, OSError) as exc:
        return report_failure(logger, args.command, exc)
    print(format_stats_table(stats))
    print()
    print(format_op_kind_table(group_by_op_kind(stats)))
    return 0
