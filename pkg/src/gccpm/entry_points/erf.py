"""Estimate the empirical receptive field of one keypoint.

An 11×11 patch of random pixels is slid over the image; at every position the
heatmaps are compared with those of the clean image. Positions whose patch
moves the chosen keypoint's heatmap form the empirical receptive field.
Outputs are ``erf_map.png`` (importance as grey levels), ``erf_overlay.png``
(the image with the box holding 95% of the importance) and ``erf.csv``.

Without ``--checkpoint`` an untrained model is built from the configuration;
without ``--data-dir`` the image is a synthetic sample.

Example run command::

   gccpm erf --checkpoint runs/tiny/best.toml --keypoint 9 --window 11 --stride 4 --out-dir erf/head
"""

import logging
import sys
from pathlib import Path

import attrs

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from gccpm._cli_args import CONFIG_ARGS, out_dir_arg
from gccpm._config import RUN_CONFIG_FILE, load_run_config
from gccpm._keypoints import HEAD_TOP, KEYPOINT_NAMES
from gccpm._utils import report_failure
from gccpm.augment import letterbox
from gccpm.data import load_or_generate
from gccpm.erf import Aggregation, erf_stats, estimate_erf, write_erf_outputs
from gccpm.model import build_model, load_checkpoint

DEFAULT_WINDOW = 11
DEFAULT_STRIDE = 4
DEFAULT_MASS = 0.95

_help = "Empirical receptive field by occlusion"
_cli = CONFIG_ARGS + (
    out_dir_arg("erf_out"),
    (
        "--checkpoint",
        dict(
            metavar="TOML",
            default=None,
            help="Checkpoint manifest, an untrained model is used when omitted (default: None)",
        ),
    ),
    (
        "--data-dir",
        dict(
            metavar="DIR",
            default=None,
            help="Dataset directory with annotations.toml, a synthetic image is used when omitted (default: None)",
        ),
    ),
    (
        "--image-index",
        dict(
            metavar="I",
            type=int,
            default=0,
            help="Which image of the dataset to occlude (default: 0)",
        ),
    ),
    (
        "--keypoint",
        dict(
            metavar="K",
            type=int,
            default=HEAD_TOP,
            help=f"Heatmap channel to compare (default: {HEAD_TOP}, {KEYPOINT_NAMES[HEAD_TOP]})",
        ),
    ),
    (
        "--window",
        dict(
            metavar="PX",
            type=int,
            default=DEFAULT_WINDOW,
            help=f"Side of the random patch (default: {DEFAULT_WINDOW})",
        ),
    ),
    (
        "--stride",
        dict(
            metavar="PX",
            type=int,
            default=DEFAULT_STRIDE,
            help=f"Spacing of patch positions (default: {DEFAULT_STRIDE})",
        ),
    ),
    (
        "--aggregation",
        dict(
            default=Aggregation.sum_abs.value,
            choices=[a.value for a in Aggregation],
            help=f"Reduction of the heatmap difference (default: {Aggregation.sum_abs.value})",
        ),
    ),
    (
        "--all-channels",
        dict(
            action="store_true",
            help="Compare every heatmap channel, not only --keypoint (default: False)",
        ),
    ),
    (
        "--mass-fraction",
        dict(
            metavar="F",
            type=float,
            default=DEFAULT_MASS,
            help=f"Importance share the reported box must hold (default: {DEFAULT_MASS})",
        ),
    ),
)


def run(parser, args, extras) -> int:
    logger = logging.getLogger(f"gccpm.{args.command}")
    out_dir = Path(args.out_dir)
    try:
        config = load_run_config(args.config, args.seed, logger)
        if args.checkpoint is not None:
            model = load_checkpoint(args.checkpoint)
        else:
            model = build_model(config.model, seed=config.train.seed)
        size = model.config.input_size
        synth = attrs.evolve(config.synth, image_size=size)
        dataset = load_or_generate(
            args.data_dir, synth, args.image_index + 1, model.config.num_keypoints
        )
        if not 0 <= args.image_index < len(dataset):
            raise ValueError(
                f"--image-index {args.image_index} is outside a dataset of {len(dataset)}"
            )
        sample = dataset[args.image_index]
        if sample.image.shape[:2] != (size, size):
            sample = letterbox(sample, attrs.evolve(config.augment, input_size=size))
        erf_map = estimate_erf(
            model,
            sample.image,
            args.keypoint,
            window=args.window,
            stride=args.stride,
            aggregation=args.aggregation,
            all_channels=args.all_channels,
            seed=config.train.seed,
        )
        stats = erf_stats(erf_map, args.mass_fraction)
        paths = write_erf_outputs(out_dir, sample.image, erf_map, stats)
        config.to_file(out_dir / RUN_CONFIG_FILE)
    except (BaseExceptionGroup, ValueError, OSError) as exc:
        return report_failure(logger, args.command, exc)
    logger.info(
        "%.0f%% of the importance lies in pixels %s, %.1f%% of the image",
        100 * args.mass_fraction,
        stats.pixel_box,
        100 * stats.area_fraction,
    )
    logger.info("Wrote %s", ", ".join(str(p) for p in paths.values()))
    return 0
