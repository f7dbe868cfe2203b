"""The run configuration document

One TOML file holds every section a command may need::

    schema_version = 1

    [model]
    input_size = 128
    num_refinement_stages = 1

    [model.context]
    kind = "u_shaped"

    [train]
    max_iters = 500

Sections and keys that are left out take their defaults. The heatmap geometry
of ``codec`` and the image sizes of ``augment`` and ``synth`` follow ``model``
unless given explicitly, in which case they must agree with it.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Optional

import attrs
import cattrs
import rtoml

from gccpm._utils import compress_and_encode_string, drop_none, raise_if_errors
from gccpm.augment import AugmentConfig
from gccpm.codec import CodecConfig
from gccpm.data.synthetic import SynthConfig
from gccpm.model import ModelConfig
from gccpm.trainer import TrainConfig

SCHEMA_VERSION = 1
RUN_CONFIG_FILE = "run_config.toml"


@attrs.define
class RunConfig:
    """Every section of a run

    :param schema_version: Document format version, must be 1
    :param model: Network description
    :param codec: Heatmap target geometry
    :param augment: Training augmentation
    :param train: Optimisation settings
    :param synth: Synthetic data settings

    >>> cfg = RunConfig.from_dict({"schema_version": 1, "model": {"input_size": 128}})
    >>> cfg.codec.heatmap_size, cfg.augment.input_size, cfg.synth.image_size
    (16, 128, 128)
    """

    schema_version: int
    model: ModelConfig = attrs.Factory(ModelConfig)
    codec: CodecConfig = attrs.Factory(CodecConfig)
    augment: AugmentConfig = attrs.Factory(AugmentConfig)
    train: TrainConfig = attrs.Factory(TrainConfig)
    synth: SynthConfig = attrs.Factory(SynthConfig)

    def __attrs_post_init__(self):
        errors = []
        if self.schema_version != SCHEMA_VERSION:
            errors.append(
                ValueError(
                    f"schema_version must be {SCHEMA_VERSION}, got {self.schema_version}"
                )
            )
        model = self.model
        if self.codec.heatmap_size != model.heatmap_size:
            errors.append(
                ValueError(
                    f"codec.heatmap_size ({self.codec.heatmap_size}) must equal "
                    f"model.heatmap_size ({model.heatmap_size})"
                )
            )
        if self.codec.output_stride != model.output_stride:
            errors.append(
                ValueError(
                    f"codec.output_stride ({self.codec.output_stride}) must equal "
                    f"model.output_stride ({model.output_stride})"
                )
            )
        if self.codec.num_keypoints != model.num_keypoints:
            errors.append(
                ValueError(
                    f"codec.num_keypoints ({self.codec.num_keypoints}) must equal "
                    f"model.num_keypoints ({model.num_keypoints})"
                )
            )
        if self.augment.input_size != model.input_size:
            errors.append(
                ValueError(
                    f"augment.input_size ({self.augment.input_size}) must equal "
                    f"model.input_size ({model.input_size})"
                )
            )
        if self.synth.image_size != model.input_size:
            errors.append(
                ValueError(
                    f"synth.image_size ({self.synth.image_size}) must equal "
                    f"model.input_size ({model.input_size})"
                )
            )
        raise_if_errors("Invalid RunConfig", errors)

    @classmethod
    def default(cls) -> RunConfig:
        return cls(schema_version=SCHEMA_VERSION)

    @classmethod
    def from_dict(cls, dict_: Dict[str, Any]) -> RunConfig:
        """Structure a parsed document, rejecting unknown keys

        Missing ``codec``, ``augment`` and ``synth`` sizes are filled in from the
        ``model`` section first.

        :raises BaseExceptionGroup: For unknown keys, wrong types or violated invariants
        """
        conv = cattrs.GenConverter(forbid_extra_keys=True)
        dict_ = dict(dict_)
        model_dict = dict_.get("model", {})
        if isinstance(model_dict, dict):
            model = conv.structure(model_dict, ModelConfig)
            geometry = {
                "codec": {
                    "heatmap_size": model.heatmap_size,
                    "output_stride": model.output_stride,
                    "num_keypoints": model.num_keypoints,
                },
                "augment": {"input_size": model.input_size},
                "synth": {"image_size": model.input_size},
            }
            for section, values in geometry.items():
                given = dict_.get(section, {})
                if isinstance(given, dict):
                    dict_[section] = {**values, **given}
        return conv.structure(dict_, cls)

    @classmethod
    def from_file(cls, path: str | Path, logger: Optional[logging.Logger] = None) -> RunConfig:
        """Create a RunConfig from a TOML file.

        :param path: Path to the toml file
        :param logger: Logger to write out a base64 encoded compressed toml, defaults to None
        :return: The RunConfig as constructed from this toml
        """
        with open(path) as fh:
            text = fh.read()
        if logger is not None:
            logger.info(compress_and_encode_string(text))
        return cls.from_dict(rtoml.loads(text))

    def to_dict(self) -> Dict[str, Any]:
        return drop_none(cattrs.unstructure(self))

    def to_file(self, path: str | Path) -> Path:
        """Write the config as TOML, creating the parent directory."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            rtoml.dump(self.to_dict(), fh, pretty=True)
        return path

    def with_seed(self, seed: Optional[int]) -> RunConfig:
        """Copy with ``train.seed`` and ``synth.seed`` replaced, unchanged for None

        >>> cfg = RunConfig.default().with_seed(7)
        >>> cfg.train.seed, cfg.synth.seed
        (7, 7)
        """
        if seed is None:
            return self
        return attrs.evolve(
            self,
            train=attrs.evolve(self.train, seed=seed),
            synth=attrs.evolve(self.synth, seed=seed),
        )

    def describe(self) -> str:
        """Human readable summary of the run."""
        model, train = self.model, self.train
        context = model.context
        return "\n".join(
            [
                "Configuration description:",
                f"Model: {model.input_size}px input, output stride {model.output_stride}, "
                f"{model.heatmap_size}x{model.heatmap_size} heatmaps, "
                f"{model.num_outputs} channels, "
                f"{model.num_refinement_stages + 1} stages.",
                f"Context module: {context.kind.value}"
                + (
                    f" at {context.placement.value}."
                    if context.kind.value != "none"
                    else "."
                ),
                f"Codec: sigma {self.codec.sigma} cells.",
                f"Augmentation: scale {self.augment.scale_range}, rotation "
                f"+/-{self.augment.rotation_deg} deg, flip {self.augment.flip_prob}, "
                f"body mask {'on' if self.augment.body_mask.enabled else 'off'}, "
                f"keypoint mask {'on' if self.augment.keypoint_mask.enabled else 'off'}.",
                f"Training: lr {train.lr:g}, batch {train.batch_size}, "
                f"{train.max_iters} iterations, profile {train.augmentation.value}, "
                f"seed {train.seed}.",
                f"Synthetic data: {self.synth.figures} figure(s) on "
                f"{self.synth.background.value} background, seed {self.synth.seed}.",
            ]
        )


def load_run_config(
    path: Optional[str | Path],
    seed: Optional[int] = None,
    logger: Optional[logging.Logger] = None,
) -> RunConfig:
    """Read ``path``, or take the defaults when it is None, then apply ``seed``."""
    config = RunConfig.default() if path is None else RunConfig.from_file(path, logger)
    return config.with_seed(seed)
