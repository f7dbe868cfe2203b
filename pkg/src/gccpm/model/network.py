"""The pose machine: a depthwise-separable feature extractor, an initial heatmap
stage and a chain of refinement stages, each optionally preceded by a global
context module.

Layer names follow the extractor's block names (``backbone.conv4_2.dw``) and
the stage index (``stage_3.block_2.trunk_dilated``) so checkpoints and
analyzer reports can be read against the architecture diagram.
"""

from __future__ import annotations

import logging
from typing import Any, Dict, Optional, Sequence

import attrs
import cattrs
import numpy as np

from gccpm.model.context import (
    ContextConfig,
    ContextKind,
    ContextModule,
    ContextPlacement,
    build_context_module,
)
from gccpm.model.layers import Conv2d, Module
from gccpm.tensor import ConvSpec, Tensor, add, concat, default_dtype, relu
from gccpm._utils import Stream, derive_rng, raise_if_errors

MODULE_LOGGER = logging.getLogger(__name__)

SUPPORTED_OUTPUT_STRIDES = (4, 8, 16)

#: Extractor blocks after ``conv1``: (name, output channels, stride)
BACKBONE_BLOCKS = (
    ("conv2_1", 64, 1),
    ("conv2_2", 128, 2),
    ("conv3_1", 128, 1),
    ("conv3_2", 256, 2),
    ("conv4_1", 256, 1),
    ("conv4_2", 512, 2),
    ("conv5_1", 512, 1),
    ("conv5_2", 512, 1),
    ("conv5_3", 512, 1),
    ("conv5_4", 512, 1),
    ("conv5_5", 512, 1),
)
STEM_CHANNELS = 32


@attrs.define
class ModelConfig:
    """Declarative description of a pose machine

    :param input_size: Side of the square input image in pixels
    :param output_stride: Input pixels per heatmap cell, one of 4, 8 or 16
    :param heatmap_size: Side of every heatmap, ``input_size / output_stride``
    :param num_keypoints: Keypoint channels
    :param include_background_map: Add one background channel to every heatmap set
    :param backbone_width: Channel multiplier of the feature extractor
    :param feature_channels: Width of the features shared by all stages
    :param head_channels: Width of the hidden 1×1 layer of the initial stage
    :param num_refinement_stages: Stages after the initial one, 1 gives the two-stage variant
    :param context: Context module settings

    >>> cfg = ModelConfig()
    >>> cfg.heatmap_size, cfg.num_outputs
    (32, 16)
    >>> ModelConfig(output_stride=4).heatmap_size
    64
    """

    input_size: int = 256
    output_stride: int = 8
    heatmap_size: int = attrs.field(
        default=attrs.Factory(
            lambda self: self.input_size // max(self.output_stride, 1), takes_self=True
        )
    )
    num_keypoints: int = 16
    include_background_map: bool = False
    backbone_width: float = 1.0
    feature_channels: int = 128
    head_channels: int = 512
    num_refinement_stages: int = 5
    context: ContextConfig = attrs.Factory(ContextConfig)

    def __attrs_post_init__(self):
        errors = []
        if self.output_stride not in SUPPORTED_OUTPUT_STRIDES:
            errors.append(
                ValueError(
                    f"output_stride must be one of {SUPPORTED_OUTPUT_STRIDES}, got {self.output_stride}"
                )
            )
        if self.heatmap_size * self.output_stride != self.input_size:
            errors.append(
                ValueError(
                    f"heatmap_size * output_stride must equal input_size, got "
                    f"{self.heatmap_size} * {self.output_stride} != {self.input_size}"
                )
            )
        if self.num_refinement_stages < 0:
            errors.append(
                ValueError(
                    f"num_refinement_stages must be >= 0, got {self.num_refinement_stages}"
                )
            )
        for name in ("num_keypoints", "feature_channels", "head_channels"):
            if getattr(self, name) < 1:
                errors.append(ValueError(f"{name} must be >= 1, got {getattr(self, name)}"))
        if self.backbone_width <= 0:
            errors.append(ValueError(f"backbone_width must be > 0, got {self.backbone_width}"))
        errors.extend(self.context.validate(self.heatmap_size))
        raise_if_errors("Invalid ModelConfig", errors)

    @property
    def num_outputs(self) -> int:
        """Channels of every heatmap set."""
        return self.num_keypoints + int(self.include_background_map)

    @classmethod
    def from_dict(cls, dict_: Dict[str, Any]) -> ModelConfig:
        conv = cattrs.GenConverter(forbid_extra_keys=True)
        return conv.structure(dict_, cls)

    def to_dict(self) -> Dict[str, Any]:
        return cattrs.unstructure(self)


def _scaled(channels: int, width: float) -> int:
    return max(8, int(round(channels * width)))


class Backbone(Module):
    """Depthwise-separable extractor cut after ``conv5_5``, then a 1×1 reduction

    Down-sampling blocks whose stride would take the total past ``output_stride``
    keep stride 1 and the following block's depthwise convolution is dilated by 2.
    """

    def __init__(self, name: str, config: ModelConfig, rng):
        super().__init__(name)
        width = config.backbone_width
        cin = _scaled(STEM_CHANNELS, width)
        self.add(
            Conv2d(f"{name}.conv1", ConvSpec.same(3, cin, 3, stride=2), rng, activation=True)
        )
        total_stride, dilation = 2, 1
        self.removed_strides: list[str] = []
        for block, channels, stride in BACKBONE_BLOCKS:
            cout = _scaled(channels, width)
            if stride > 1 and total_stride * stride > config.output_stride:
                self.removed_strides.append(block)
                stride, next_dilation = 1, 2
            else:
                next_dilation = 1
            total_stride *= stride
            self.add(
                Conv2d(
                    f"{name}.{block}.dw",
                    ConvSpec.same(cin, cin, 3, stride=stride, dilation=dilation, groups=cin),
                    rng,
                    activation=True,
                )
            )
            self.add(Conv2d(f"{name}.{block}.pw", ConvSpec(cin, cout, 1), rng, activation=True))
            cin, dilation = cout, next_dilation
        self.output_stride = total_stride
        self.add(
            Conv2d(
                f"{name}.reduce",
                ConvSpec(cin, config.feature_channels, 1),
                rng,
                activation=True,
            )
        )

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.children():
            x = layer(x)
        return x


class InitialStage(Module):
    """Three 3×3 convolutions, a hidden 1×1 layer and the 1×1 heatmap head."""

    def __init__(self, name: str, config: ModelConfig, rng):
        super().__init__(name)
        f = config.feature_channels
        for i in range(1, 4):
            self.add(Conv2d(f"{name}.trunk{i}", ConvSpec.same(f, f, 3), rng, activation=True))
        self.add(Conv2d(f"{name}.hidden", ConvSpec(f, config.head_channels, 1), rng, activation=True))
        self.add(Conv2d(f"{name}.heatmaps", ConvSpec(config.head_channels, config.num_outputs, 1), rng))

    def forward(self, features: Tensor) -> Tensor:
        x = features
        for layer in self.children():
            x = layer(x)
        return x


class RefinementBlock(Module):
    """1×1 projection plus a residual trunk of a 3×3 and a dilated 3×3 convolution

    The trunk sees a 7×7 window of its input, like a single 7×7 convolution.
    """

    def __init__(self, name: str, in_channels: int, channels: int, rng):
        super().__init__(name)
        self.initial = self.add(
            Conv2d(f"{name}.initial", ConvSpec(in_channels, channels, 1), rng, activation=True)
        )
        self.trunk = self.add(
            Conv2d(f"{name}.trunk", ConvSpec.same(channels, channels, 3), rng, activation=True)
        )
        self.trunk_dilated = self.add(
            Conv2d(
                f"{name}.trunk_dilated",
                ConvSpec.same(channels, channels, 3, dilation=2),
                rng,
                activation=True,
            )
        )

    def forward(self, x: Tensor) -> Tensor:
        initial = self.initial(x)
        return add(initial, self.trunk_dilated(self.trunk(initial)))


class RefinementStage(Module):
    """Concatenates features with the previous heatmaps, optionally adds context, and refines."""

    def __init__(
        self,
        name: str,
        config: ModelConfig,
        rng,
        with_context: bool,
    ):
        super().__init__(name)
        f, k = config.feature_channels, config.num_outputs
        self.context: Optional[ContextModule] = None
        if with_context:
            self.context = self.add(
                build_context_module(
                    config.context.kind,
                    config.context,
                    f + k,
                    f,
                    config.heatmap_size,
                    rng,
                    name=f"{name}.context",
                )
            )
        block_in = f if with_context else f + k
        self.blocks = [
            self.add(RefinementBlock(f"{name}.block{i}", block_in if i == 1 else f, f, rng))
            for i in range(1, 4)
        ]
        self.hidden = self.add(Conv2d(f"{name}.hidden", ConvSpec(f, f, 1), rng, activation=True))
        self.heatmaps = self.add(Conv2d(f"{name}.heatmaps", ConvSpec(f, k, 1), rng))

    def forward(self, features: Tensor, heatmaps: Tensor) -> Tensor:
        x = concat([features, heatmaps], axis=1)
        if self.context is not None:
            x = self.context(x)
        for block in self.blocks:
            x = block(x)
        return self.heatmaps(self.hidden(x))


class PoseMachine(Module):
    """A built network

    :param config: The description it was built from
    :param rng: Weight initialisation source
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator]):
        super().__init__("model")
        self.config = config
        self.backbone = self.add(Backbone("backbone", config, rng))
        context = config.context
        self.global_context: Optional[ContextModule] = None
        if (
            context.kind is not ContextKind.none
            and context.placement is ContextPlacement.backbone_output
        ):
            f = config.feature_channels
            self.global_context = self.add(
                build_context_module(
                    context.kind, context, f, f, config.heatmap_size, rng, name="context"
                )
            )
        self.initial = self.add(InitialStage("stage_0", config, rng))
        per_stage = (
            context.kind is not ContextKind.none
            and context.placement is ContextPlacement.stage_input
        )
        self.stages = [
            self.add(RefinementStage(f"stage_{i}", config, rng, per_stage))
            for i in range(1, config.num_refinement_stages + 1)
        ]
        self.check_registry()

    def stage_slices(self) -> Dict[str, slice]:
        """Index range of each top level part within :meth:`layers`."""
        bounds, start = {}, 0
        for child in self.children():
            stop = start + len(child.layers())
            bounds[child.name] = slice(start, stop)
            start = stop
        return bounds

    def features(self, batch: Tensor) -> Tensor:
        expected = (3, self.config.input_size, self.config.input_size)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
            raise ValueError(
                f"model expects a N×{expected[0]}×{expected[1]}×{expected[2]} batch, got {batch.shape}"
            )
        feats = self.backbone(batch)
        if self.global_context is not None:
            feats = self.global_context(feats)
        return feats

    def forward(self, batch: Tensor) -> list[Tensor]:
        """Heatmaps of the initial stage followed by every refinement stage."""
        feats = self.features(batch)
        heatmaps = [self.initial(feats)]
        for stage in self.stages:
            heatmaps.append(stage(feats, heatmaps[-1]))
        return heatmaps


def build_model(config: ModelConfig, seed: int = 0) -> PoseMachine:
    """Build and initialise a network

    :param config: A validated :class:`ModelConfig`
    :param seed: Seed of the weight initialisation stream

    >>> from gccpm.tensor import shape_only
    >>> with shape_only():
    ...     model = build_model(ModelConfig(num_refinement_stages=1))
    >>> list(model.stage_slices())
    ['backbone', 'stage_0', 'stage_1']
    """
    model = PoseMachine(config, derive_rng(seed, Stream.MODEL_INIT))
    MODULE_LOGGER.debug(
        "Built model with %d layers and %d parameters (context %s)",
        len(model.layers()),
        model.param_count(),
        config.context.kind.value,
    )
    return model


def images_to_batch(images: Sequence[np.ndarray]) -> Tensor:
    """Stack H×W×3 8-bit images into a normalised N×3×H×W tensor, ``(x - 128) / 256``."""
    array = np.stack([np.asarray(img) for img in images]).astype(default_dtype())
    return Tensor(np.ascontiguousarray(((array - 128.0) / 256.0).transpose(0, 3, 1, 2)))


class BottleneckStack(Module):
    """Residual bottleneck units, 1×1 reduce, 3×3 and 1×1 expand, used as a profiling subject."""

    def __init__(self, channels: int, depth: int, rng, name: str = "bottleneck"):
        super().__init__(name)
        if depth < 1:
            raise ValueError(f"bottleneck depth must be >= 1, got {depth}")
        if channels < 4 or channels % 4:
            raise ValueError(f"bottleneck channels must be a positive multiple of 4, got {channels}")
        self.channels, self.depth = channels, depth
        mid = channels // 4
        self.units = [
            (
                self.add(Conv2d(f"{name}.unit{i}.reduce", ConvSpec(channels, mid, 1), rng, activation=True)),
                self.add(Conv2d(f"{name}.unit{i}.conv", ConvSpec.same(mid, mid, 3), rng, activation=True)),
                self.add(Conv2d(f"{name}.unit{i}.expand", ConvSpec(mid, channels, 1), rng)),
            )
            for i in range(1, depth + 1)
        ]
        self.check_registry()

    def forward(self, x: Tensor) -> Tensor:
        for reduce, conv, expand in self.units:
            x = relu(add(x, expand(conv(reduce(x)))))
        return x

    @staticmethod
    def closed_form_params(channels: int, depth: int, with_bias: bool = True) -> int:
        """``depth * (C*C/4 + 9*(C/4)^2 + C/4*C)`` plus biases

        >>> BottleneckStack.closed_form_params(64, 1, with_bias=False)
        4352
        """
        mid = channels // 4
        weights = channels * mid + 9 * mid * mid + mid * channels
        biases = mid + mid + channels if with_bias else 0
        return depth * (weights + biases)


def build_bottleneck_stack(channels: int, depth: int, seed: int = 0) -> BottleneckStack:
    return BottleneckStack(channels, depth, derive_rng(seed, Stream.MODEL_INIT))
