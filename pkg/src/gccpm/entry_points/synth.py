"""Generate a synthetic stick figure dataset.

Every image is drawn from its own stream of the seed, so the first ``N``
samples of a larger run are identical to a run of ``N``. The directory gets
``images/NNNNN.png``, ``annotations.toml`` and the ``run_config.toml`` used.

Example run command::

   gccpm synth --count 50 --seed 3 --out-dir data/train
"""

import logging
import sys
from pathlib import Path

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from gccpm._cli_args import CONFIG_ARGS, out_dir_arg
from gccpm._config import RUN_CONFIG_FILE, load_run_config
from gccpm._utils import report_failure
from gccpm.data import generate_dataset, write_dataset

DEFAULT_COUNT = 50

_help = "Generate a synthetic dataset"
_cli = CONFIG_ARGS + (
    out_dir_arg("synth_data"),
    (
        "--count",
        dict(
            metavar="N",
            type=int,
            default=DEFAULT_COUNT,
            help=f"Number of images (default: {DEFAULT_COUNT})",
        ),
    ),
)


def run(parser, args, extras) -> int:
    logger = logging.getLogger(f"gccpm.{args.command}")
    try:
        config = load_run_config(args.config, args.seed, logger)
        samples = generate_dataset(config.synth.seed, config.synth, args.count)
        out_dir = Path(args.out_dir)
        path = write_dataset(out_dir, samples)
        config.to_file(out_dir / RUN_CONFIG_FILE)
    except (BaseExceptionGroup, ValueError, OSError) as exc:
        return report_failure(logger, args.command, exc)
    logger.info("Wrote %d samples and %s", len(samples), path)
    return 0
