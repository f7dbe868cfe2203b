"""Train a pose machine.

Trains on the dataset in ``--data-dir`` or, without one, on ``--count``
synthetic samples drawn from the configuration's ``synth`` section. The output
directory receives ``history.csv``, ``report.txt``, the ``best`` and ``final``
checkpoints and the ``run_config.toml`` of the run, so any run can be repeated
from its own output.

Example run command::

   gccpm train --config tiny.toml --seed 1 --max-iters 500 --out-dir runs/tiny
"""

import logging
import sys
from pathlib import Path

import attrs

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from gccpm._cli_args import CONFIG_ARGS, out_dir_arg
from gccpm._config import RUN_CONFIG_FILE, load_run_config
from gccpm._utils import report_failure
from gccpm.data import load_or_generate
from gccpm.trainer import TrainingDivergedError, train

DEFAULT_COUNT = 50

_help = "Train a model"
_cli = CONFIG_ARGS + (
    out_dir_arg("train_out"),
    (
        "--data-dir",
        dict(
            metavar="DIR",
            default=None,
            help="Dataset directory with annotations.toml, synthetic data is generated when omitted (default: None)",
        ),
    ),
    (
        "--count",
        dict(
            metavar="N",
            type=int,
            default=DEFAULT_COUNT,
            help=f"Synthetic samples to generate without --data-dir (default: {DEFAULT_COUNT})",
        ),
    ),
    (
        "--max-iters",
        dict(
            metavar="N",
            type=int,
            default=None,
            help="Overrides train.max_iters of the configuration (default: None)",
        ),
    ),
)


def run(parser, args, extras) -> int:
    logger = logging.getLogger(f"gccpm.{args.command}")
    out_dir = Path(args.out_dir)
    try:
        config = load_run_config(args.config, args.seed, logger)
        if args.max_iters is not None:
            config = attrs.evolve(
                config, train=attrs.evolve(config.train, max_iters=args.max_iters)
            )
        logger.info(config.describe())
        dataset = load_or_generate(
            args.data_dir, config.synth, args.count, config.model.num_keypoints
        )
        config.to_file(out_dir / RUN_CONFIG_FILE)
        _, history = train(
            config.model,
            config.train,
            dataset,
            codec_cfg=config.codec,
            augment_cfg=config.augment,
            out_dir=out_dir,
        )
    except (BaseExceptionGroup, TrainingDivergedError, ValueError, OSError) as exc:
        return report_failure(logger, args.command, exc)
    if history.losses:
        logger.info(
            "Train loss %.6g -> %.6g over %d iterations",
            history.losses[0],
            history.losses[-1],
            len(history.losses),
        )
    logger.info("Outputs written to %s", out_dir)
    return 0
