"""Count parameters and multiply-accumulates.

Without flags the configured model is counted layer by layer at its input
size. ``--table3`` instead counts the three context modules at the published
reference geometry (128 input and output channels on 32×32 maps) and prints
them next to the published parameter and MAC figures, with the check that
aspp > u_shaped > pyramid_pooling holds in both columns. Module settings come
from ``--config`` when given, otherwise from the reference settings.

Nothing is run, networks are built shape-only, so the command finishes in well
under a second.

Example run command::

   gccpm analyze --table3
   gccpm analyze --config c.toml --input-size 368 --csv layers.csv
"""

import logging
import sys

import attrs

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from gccpm._cli_args import CONFIG_ARGS
from gccpm._config import load_run_config
from gccpm._utils import format_count, report_failure
from gccpm.analyzer import (
    context_complexity_report,
    count_macs,
    format_stats_table,
    write_stats_csv,
)
from gccpm.model import build_model
from gccpm.tensor import shape_only

_help = "Parameter and MAC counts"
_cli = CONFIG_ARGS + (
    (
        "--table3",
        dict(
            action="store_true",
            help="Compare the three context modules with their published complexity (default: False)",
        ),
    ),
    (
        "--input-size",
        dict(
            metavar="PX",
            type=int,
            default=None,
            help="Count at this input size instead of model.input_size (default: None)",
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
        if args.table3:
            context = config.model.context if args.config is not None else None
            report = context_complexity_report(context)
            print(report.format())
            if not report.ordering_holds:
                logger.warning("Context module ordering does not match the published one")
            return 0
        model_cfg = config.model
        if args.input_size is not None:
            model_cfg = attrs.evolve(
                model_cfg,
                input_size=args.input_size,
                heatmap_size=args.input_size // model_cfg.output_stride,
            )
        with shape_only():
            model = build_model(model_cfg)
        size = model_cfg.input_size
        complexity = count_macs(model, (1, 3, size, size))
        if args.csv is not None:
            write_stats_csv(complexity.layers, args.csv)
    except (BaseExceptionGroup, ValueError, OSError) as exc:
        return report_failure(logger, args.command, exc)
    print(format_stats_table(complexity.layers))
    print(
        f"params: {format_count(complexity.params)} "
        f"({format_count(complexity.params_without_bias)} without bias), "
        f"MACs: {format_count(complexity.macs, suffix='MAC')} at {size}x{size}"
    )
    return 0
