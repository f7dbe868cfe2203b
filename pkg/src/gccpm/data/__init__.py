"""Synthetic datasets, annotation documents and image files."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Union

from gccpm.augment import Sample
from gccpm.data.annotations import (
    AnnotationError,
    AnnotationRecord,
    load_annotations,
    load_annotations_csv,
    read_dataset,
    save_annotations,
    write_dataset,
)
from gccpm.data.images import read_image, write_image
from gccpm.data.synthetic import SynthConfig, gen_synthetic, generate_dataset

MODULE_LOGGER = logging.getLogger(__name__)


def load_or_generate(
    data_dir: Optional[Union[str, Path]],
    synth_cfg: SynthConfig,
    count: int,
    num_keypoints: int,
) -> List[Sample]:
    """Read the dataset under ``data_dir``, or generate ``count`` synthetic samples when it is None."""
    if data_dir is not None:
        samples = read_dataset(data_dir, num_keypoints)
        MODULE_LOGGER.info("Read %d samples from %s", len(samples), data_dir)
        return samples
    return generate_dataset(synth_cfg.seed, synth_cfg, count)


__all__ = [
    "AnnotationError",
    "AnnotationRecord",
    "SynthConfig",
    "gen_synthetic",
    "generate_dataset",
    "load_annotations",
    "load_annotations_csv",
    "load_or_generate",
    "read_dataset",
    "read_image",
    "save_annotations",
    "write_dataset",
    "write_image",
]
