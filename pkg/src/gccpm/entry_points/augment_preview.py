"""Render augmented samples for a visual check.

Writes ``preview_NNN.png`` images with the transformed keypoints drawn on top:
green for visible and red for occluded joints. Sample ``i`` is augmented with
the same stream the trainer would use for slot ``i`` of its first batch.

Example run command::

   gccpm augment-preview --profile body_mask --count 8 --out-dir preview
"""

import logging
import sys
from pathlib import Path

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from gccpm._cli_args import CONFIG_ARGS, out_dir_arg
from gccpm._config import RUN_CONFIG_FILE, load_run_config
from gccpm._keypoints import SKELETON
from gccpm._utils import Stream, derive_rng, report_failure
from gccpm.augment import AugmentationProfile, augment_sample, draw_keypoints
from gccpm.data import load_or_generate, write_image

DEFAULT_COUNT = 8

_help = "Write augmented samples as images"
_cli = CONFIG_ARGS + (
    out_dir_arg("augment_preview"),
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
            help=f"Images to write (default: {DEFAULT_COUNT})",
        ),
    ),
    (
        "--profile",
        dict(
            default=AugmentationProfile.standard.value,
            choices=[p.value for p in AugmentationProfile],
            help=f"Augmentation profile (default: {AugmentationProfile.standard.value})",
        ),
    ),
)


def run(parser, args, extras) -> int:
    logger = logging.getLogger(f"gccpm.{args.command}")
    out_dir = Path(args.out_dir)
    try:
        config = load_run_config(args.config, args.seed, logger)
        dataset = load_or_generate(
            args.data_dir, config.synth, args.count, config.model.num_keypoints
        )
        if not dataset:
            raise ValueError("no samples to preview")
        written = []
        for i in range(args.count):
            sample = augment_sample(
                dataset[i % len(dataset)],
                derive_rng(config.train.seed, Stream.AUGMENT, 1, i),
                config.augment,
                args.profile,
            )
            image = draw_keypoints(sample.image, sample.keypoints, SKELETON)
            written.append(write_image(out_dir / f"preview_{i:03d}.png", image))
        config.to_file(out_dir / RUN_CONFIG_FILE)
    except (BaseExceptionGroup, ValueError, OSError) as exc:
        return report_failure(logger, args.command, exc)
    logger.info("Wrote %d previews to %s", len(written), out_dir)
    return 0
