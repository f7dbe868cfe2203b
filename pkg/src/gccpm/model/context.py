"""Global context modules inserted in front of the refinement stages

Three kinds are available, each mapping ``in_channels`` to ``out_channels``
while keeping the spatial extent of the map:

- :class:`AtrousPyramid`: parallel dilated 3×3 branches, summed.
- :class:`PyramidPooling`: average pooling at several grid sizes, upsampled and
  concatenated with the input, then fused.
- :class:`UShaped`: an encoder of stride-2 convolutions and a decoder that
  upsamples and concatenates the matching encoder map at every level.
"""

from __future__ import annotations

import logging
import sys
from enum import Enum, unique
from typing import List, Optional

import attrs
import numpy as np

from gccpm.model.layers import Conv2d, Module, Pool2d, Upsample
from gccpm.tensor import ConvSpec, Tensor, add, concat, relu
from gccpm._utils import nice_join

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

MODULE_LOGGER = logging.getLogger(__name__)


@unique
class ContextKind(str, Enum):
    #: No context module, the plain baseline
    none = "none"
    #: Atrous spatial pyramid pooling
    aspp = "aspp"
    #: Pyramid pooling module
    pyramid_pooling = "pyramid_pooling"
    #: Encoder-decoder with skip connections
    u_shaped = "u_shaped"


@unique
class ContextPlacement(str, Enum):
    #: One module per refinement stage, applied to its concatenated input
    stage_input = "stage_input"
    #: A single module applied to the backbone features
    backbone_output = "backbone_output"


@attrs.define
class AsppConfig:
    """Atrous pyramid settings

    :param mid_channels: Width of every branch
    :param rates: Dilation of each branch's 3×3 convolution, strictly increasing
    """

    mid_channels: int = 1024
    rates: List[int] = attrs.Factory(lambda: [3, 6, 9, 12])

    def validate(self) -> list[Exception]:
        errors = []
        if self.mid_channels < 1:
            errors.append(ValueError(f"aspp.mid_channels must be >= 1, got {self.mid_channels}"))
        if not self.rates:
            errors.append(ValueError("aspp.rates must not be empty"))
        elif min(self.rates) < 1:
            errors.append(ValueError(f"aspp.rates must all be >= 1, got {self.rates}"))
        elif any(b <= a for a, b in zip(self.rates, self.rates[1:])):
            errors.append(ValueError(f"aspp.rates must be strictly increasing, got {self.rates}"))
        return errors


@attrs.define
class PyramidPoolingConfig:
    """Pyramid pooling settings

    Level ``d`` average-pools the map down to a ``d×d`` grid, with a kernel (and
    stride) of ``map_size / d``.

    :param level_divisors: Grid size of each level
    :param branch_channels: Channels each level is projected to
    :param branch_kernel: Kernel of the per-level convolution, run at pooled resolution
    :param fusion_kernel: Kernel of the convolution fusing the concatenation
    """

    level_divisors: List[int] = attrs.Factory(lambda: [2, 4, 8, 16])
    branch_channels: int = 32
    branch_kernel: int = 1
    fusion_kernel: int = 1

    def validate(self, map_size: Optional[int] = None) -> list[Exception]:
        errors = []
        if not self.level_divisors:
            errors.append(ValueError("ppm.level_divisors must not be empty"))
        if self.branch_channels < 1:
            errors.append(
                ValueError(f"ppm.branch_channels must be >= 1, got {self.branch_channels}")
            )
        for name in ("branch_kernel", "fusion_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                errors.append(ValueError(f"ppm.{name} must be a positive odd number, got {k}"))
        for d in self.level_divisors:
            if d < 1:
                errors.append(ValueError(f"ppm.level_divisors must be >= 1, got {d}"))
            elif map_size is not None and (d > map_size or map_size % d):
                errors.append(
                    ValueError(
                        f"ppm level {d} needs the map size ({map_size}) to be a multiple of it"
                    )
                )
        return errors


@attrs.define
class UShapedConfig:
    """Encoder-decoder settings

    :param depth: Number of halvings
    :param channels: Width at full resolution followed by the width after each halving,
        ``depth + 1`` entries
    """

    depth: int = 3
    channels: List[int] = attrs.Factory(lambda: [256, 256, 256, 384])

    def validate(self, map_size: Optional[int] = None) -> list[Exception]:
        errors = []
        if self.depth < 1:
            errors.append(ValueError(f"u_shaped.depth must be >= 1, got {self.depth}"))
        if len(self.channels) != self.depth + 1:
            errors.append(
                ValueError(
                    f"u_shaped.channels needs depth + 1 = {self.depth + 1} entries, "
                    f"got {len(self.channels)}"
                )
            )
        if any(c < 1 for c in self.channels):
            errors.append(ValueError(f"u_shaped.channels must be positive, got {self.channels}"))
        if map_size is not None and self.depth >= 1 and map_size % (2**self.depth):
            errors.append(
                ValueError(
                    f"u_shaped depth {self.depth} needs the map size ({map_size}) "
                    f"to be divisible by {2 ** self.depth}"
                )
            )
        return errors


@attrs.define
class ContextConfig:
    """Which context module to use and how it is shaped

    :param kind: One of ``none``, ``aspp``, ``pyramid_pooling`` or ``u_shaped``
    :param placement: ``stage_input`` or ``backbone_output``
    :param aspp: Settings used when ``kind`` is ``aspp``
    :param ppm: Settings used when ``kind`` is ``pyramid_pooling``
    :param u_shaped: Settings used when ``kind`` is ``u_shaped``

    >>> ContextConfig(kind="aspp").kind
    <ContextKind.aspp: 'aspp'>
    """

    kind: ContextKind = attrs.field(default=ContextKind.none, converter=ContextKind)
    placement: ContextPlacement = attrs.field(
        default=ContextPlacement.stage_input, converter=ContextPlacement
    )
    aspp: AsppConfig = attrs.Factory(AsppConfig)
    ppm: PyramidPoolingConfig = attrs.Factory(PyramidPoolingConfig)
    u_shaped: UShapedConfig = attrs.Factory(UShapedConfig)

    def validate(self, map_size: Optional[int] = None) -> list[Exception]:
        """Errors for the selected kind only; unused sections are not checked."""
        if self.kind is ContextKind.aspp:
            return self.aspp.validate()
        if self.kind is ContextKind.pyramid_pooling:
            return self.ppm.validate(map_size)
        if self.kind is ContextKind.u_shaped:
            return self.u_shaped.validate(map_size)
        return []


class ContextModule(Module):
    """Common input checks for the context modules."""

    def __init__(self, name: str, in_channels: int, out_channels: int, map_size: int):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.map_size = map_size

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != (
            self.map_size,
            self.map_size,
        ):
            raise ValueError(
                f"{self.name} expects N×{self.in_channels}×{self.map_size}×{self.map_size}, "
                f"got {x.shape}"
            )


class AtrousPyramid(ContextModule):
    """Parallel branches of dilated 3×3, 1×1 and 1×1 convolutions, summed then rectified."""

    def __init__(self, name, cfg: AsppConfig, in_channels, out_channels, map_size, rng):
        super().__init__(name, in_channels, out_channels, map_size)
        self.branches: list[list[Conv2d]] = []
        for rate in cfg.rates:
            prefix = f"{name}.rate{rate}"
            self.branches.append(
                [
                    self.add(
                        Conv2d(
                            f"{prefix}.atrous",
                            ConvSpec.same(in_channels, cfg.mid_channels, 3, dilation=rate),
                            rng,
                            activation=True,
                        )
                    ),
                    self.add(
                        Conv2d(
                            f"{prefix}.mix",
                            ConvSpec(cfg.mid_channels, cfg.mid_channels, 1),
                            rng,
                            activation=True,
                        )
                    ),
                    self.add(
                        Conv2d(
                            f"{prefix}.project",
                            ConvSpec(cfg.mid_channels, out_channels, 1),
                            rng,
                        )
                    ),
                ]
            )

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        total = None
        for branch in self.branches:
            y = x
            for layer in branch:
                y = layer(y)
            total = y if total is None else add(total, y)
        return relu(total)


class PyramidPooling(ContextModule):
    """Average pooling to several grid sizes, projected, upsampled and concatenated with the input."""

    def __init__(
        self, name, cfg: PyramidPoolingConfig, in_channels, out_channels, map_size, rng
    ):
        super().__init__(name, in_channels, out_channels, map_size)
        self.levels: list[tuple[Pool2d, Conv2d, Upsample]] = []
        for d in cfg.level_divisors:
            kernel = map_size // d
            prefix = f"{name}.level{d}"
            self.levels.append(
                (
                    self.add(Pool2d(f"{prefix}.pool", "avg", kernel)),
                    self.add(
                        Conv2d(
                            f"{prefix}.conv",
                            ConvSpec.same(in_channels, cfg.branch_channels, cfg.branch_kernel),
                            rng,
                            activation=True,
                        )
                    ),
                    self.add(Upsample(f"{prefix}.upsample", kernel, "bilinear")),
                )
            )
        fused = in_channels + cfg.branch_channels * len(cfg.level_divisors)
        self.fusion = self.add(
            Conv2d(
                f"{name}.fusion",
                ConvSpec.same(fused, out_channels, cfg.fusion_kernel),
                rng,
                activation=True,
            )
        )

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        pieces = [x]
        for pool, conv, up in self.levels:
            pieces.append(up(conv(pool(x))))
        return self.fusion(concat(pieces, axis=1))


class UShaped(ContextModule):
    """Stride-2 encoder and a skip-connected decoder back to the input resolution."""

    def __init__(self, name, cfg: UShapedConfig, in_channels, out_channels, map_size, rng):
        super().__init__(name, in_channels, out_channels, map_size)
        widths = cfg.channels
        self.stem = self.add(
            Conv2d(f"{name}.stem", ConvSpec.same(in_channels, widths[0], 3), rng, activation=True)
        )
        self.down = [
            self.add(
                Conv2d(
                    f"{name}.down{level}",
                    ConvSpec.same(widths[level - 1], widths[level], 3, stride=2),
                    rng,
                    activation=True,
                )
            )
            for level in range(1, cfg.depth + 1)
        ]
        self.up: list[tuple[Upsample, Conv2d]] = []
        # the decoder output at each level has the width of the skip it absorbed
        for level in range(cfg.depth, 0, -1):
            current = widths[level]
            self.up.append(
                (
                    self.add(Upsample(f"{name}.up{level}.upsample", 2, "bilinear")),
                    self.add(
                        Conv2d(
                            f"{name}.up{level}.conv",
                            ConvSpec.same(current + widths[level - 1], widths[level - 1], 3),
                            rng,
                            activation=True,
                        )
                    ),
                )
            )
        self.head = self.add(
            Conv2d(f"{name}.head", ConvSpec.same(widths[0], out_channels, 3), rng, activation=True)
        )

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        skips = [self.stem(x)]
        for conv in self.down:
            skips.append(conv(skips[-1]))
        y = skips.pop()
        for up, conv in self.up:
            y = conv(concat([up(y), skips.pop()], axis=1))
        return self.head(y)


def build_context_module(
    kind: ContextKind | str,
    cfg: ContextConfig,
    in_channels: int,
    out_channels: int,
    map_size: int,
    rng: Optional[np.random.Generator] = None,
    name: str = "context",
) -> ContextModule:
    """Build a context module of ``kind`` for ``map_size × map_size`` maps

    :param kind: Which module; ``none`` has no module and is an error here
    :param cfg: Holds the per-kind settings
    :param in_channels: Channels of the incoming map
    :param out_channels: Channels produced
    :param map_size: Spatial extent of the incoming map (the heatmap size)
    :param rng: Weight initialisation source, zeros when ``None``
    :param name: Qualified name prefix of the module's layers
    :raises ValueError: If the map size does not suit the configured pooling levels or depth

    >>> from gccpm.tensor import shape_only
    >>> with shape_only():
    ...     m = build_context_module("aspp", ContextConfig(), 128, 128, 32)
    >>> m.param_count(with_bias=False)
    9437184
    """
    kind = ContextKind(kind)
    errors = ContextConfig(kind=kind, aspp=cfg.aspp, ppm=cfg.ppm, u_shaped=cfg.u_shaped).validate(
        map_size
    )
    if errors:
        raise BaseExceptionGroup(f"Invalid {kind.value} context module", errors)
    if kind is ContextKind.aspp:
        return AtrousPyramid(name, cfg.aspp, in_channels, out_channels, map_size, rng)
    if kind is ContextKind.pyramid_pooling:
        return PyramidPooling(name, cfg.ppm, in_channels, out_channels, map_size, rng)
    if kind is ContextKind.u_shaped:
        return UShaped(name, cfg.u_shaped, in_channels, out_channels, map_size, rng)
    raise ValueError(
        f"Context kind {kind.value!r} has no module, expected one of "
        f"{nice_join([k.value for k in ContextKind if k is not ContextKind.none])}"
    )
