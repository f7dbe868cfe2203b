"""Score a checkpoint with PCKh and AUC.

The model is rebuilt from the checkpoint manifest alone. Predictions come from
the final stage; ``--flip`` averages them with the mirrored prediction and
``--scales`` with zoomed copies of the input (``0.75,1.0,1.25`` for the three
scale protocol). The table is printed and ``eval.csv`` written to ``--out-dir``.

Example run command::

   gccpm eval --checkpoint runs/tiny/best.toml --data-dir data/val --flip --scales 0.75,1.0,1.25
"""

import argparse
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
from gccpm.model import load_checkpoint
from gccpm.trainer import evaluate

DEFAULT_COUNT = 50
DEFAULT_SCALES = "1.0"


def parse_scales(text: str) -> list[float]:
    """Comma separated positive zoom factors

    >>> parse_scales("0.75,1.0,1.25")
    [0.75, 1.0, 1.25]
    """
    try:
        scales = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid scales {text!r}") from None
    if not scales or min(scales) <= 0:
        raise argparse.ArgumentTypeError(f"scales must be positive numbers, got {text!r}")
    return scales


_help = "Evaluate a checkpoint"
_cli = CONFIG_ARGS + (
    out_dir_arg("eval_out"),
    (
        "--checkpoint",
        dict(metavar="TOML", required=True, help="Checkpoint manifest to evaluate"),
    ),
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
        "--flip",
        dict(action="store_true", help="Average with the mirrored image (default: False)"),
    ),
    (
        "--scales",
        dict(
            metavar="SCALES",
            type=parse_scales,
            default=DEFAULT_SCALES,
            help=f"Comma separated zoom factors averaged at test time (default: {DEFAULT_SCALES})",
        ),
    ),
)


def run(parser, args, extras) -> int:
    logger = logging.getLogger(f"gccpm.{args.command}")
    out_dir = Path(args.out_dir)
    try:
        config = load_run_config(args.config, args.seed, logger)
        model = load_checkpoint(args.checkpoint)
        geometry = model.config
        codec = attrs.evolve(
            config.codec,
            heatmap_size=geometry.heatmap_size,
            output_stride=geometry.output_stride,
        )
        synth = attrs.evolve(config.synth, image_size=geometry.input_size)
        dataset = load_or_generate(args.data_dir, synth, args.count, geometry.num_keypoints)
        result = evaluate(
            model,
            dataset,
            codec,
            use_flip=args.flip,
            scales=args.scales,
            fill_color=config.augment.fill_color,
        )
        out_dir.mkdir(parents=True, exist_ok=True)
        result.write_csv(out_dir / "eval.csv")
        config.to_file(out_dir / RUN_CONFIG_FILE)
    except (BaseExceptionGroup, ValueError, OSError) as exc:
        return report_failure(logger, args.command, exc)
    print(result.format_table())
    logger.info("mean PCKh %.4f, AUC %.4f on %d samples", result.mean_pckh, result.auc, result.num_samples)
    return 0
