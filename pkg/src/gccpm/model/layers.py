"""Named layers and the module tree networks are assembled from

A :class:`Module` owns child modules registered under qualified, dotted names
(``stage_2.block_1.trunk_dilated``). The leaves are :class:`Layer` objects,
the only places parameters live and the only places time and multiply-accumulates
are attributed to. Layers run any hooks installed with :func:`layer_hooks`
around their forward pass, which is how the analyzer records shapes and timings
without the network knowing.
"""

from __future__ import annotations

import contextlib
import contextvars
import logging
import math
from collections import Counter
from enum import Enum, unique
from typing import Iterator, Optional, Protocol, Sequence, TypeVar, Union

import numpy as np

from gccpm.tensor import (
    ConvSpec,
    PoolKind,
    Tensor,
    UpsampleMode,
    conv2d,
    default_dtype,
    placeholder,
    pool2d,
    relu,
    shape_only,
    upsample,
)
from gccpm.tensor.core import is_shape_only

MODULE_LOGGER = logging.getLogger(__name__)

M = TypeVar("M", bound="Module")


@unique
class OpKind(str, Enum):
    """Layer categories the analyzer groups by."""

    #: Pointwise convolution
    conv1x1 = "conv1x1"
    #: Dense 3×3 convolution, any dilation
    conv3x3 = "conv3x3"
    #: One filter per channel
    depthwise = "depthwise"
    #: Average or max pooling
    pool = "pool"
    #: Nearest or bilinear upsampling
    upsample = "upsample"
    #: Anything else
    other = "other"


class LayerHook(Protocol):
    def before(self, layer: Layer, x: Tensor) -> None: ...

    def after(self, layer: Layer, x: Tensor, out: Tensor) -> None: ...


_HOOKS: contextvars.ContextVar[tuple[LayerHook, ...]] = contextvars.ContextVar(
    "gccpm_layer_hooks", default=()
)


@contextlib.contextmanager
def layer_hooks(*hooks: LayerHook) -> Iterator[None]:
    """Run ``hooks`` around every layer call made inside the block."""
    token = _HOOKS.set(_HOOKS.get() + hooks)
    try:
        yield
    finally:
        _HOOKS.reset(token)


class Module:
    """A named node in a network

    :param name: Qualified name, children are usually named ``f"{name}.<part>"``
    """

    def __init__(self, name: str):
        self.name = name
        self._children: dict[str, Module] = {}

    def add(self, child: M) -> M:
        if child.name in self._children:
            raise ValueError(f"{self.name!r} already has a child named {child.name!r}")
        self._children[child.name] = child
        return child

    def children(self) -> list[Module]:
        return list(self._children.values())

    def modules(self) -> Iterator[Module]:
        """Depth first, parents before children, in registration order."""
        yield self
        for child in self._children.values():
            yield from child.modules()

    def layers(self) -> list[Layer]:
        return [m for m in self.modules() if isinstance(m, Layer)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            (f"{layer.name}.{key}", tensor)
            for layer in self.layers()
            for key, tensor in layer.own_parameters()
        ]

    def parameters(self) -> list[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def param_count(self, with_bias: bool = True) -> int:
        return sum(layer.param_count(with_bias) for layer in self.layers())

    def check_registry(self) -> None:
        """Raise if a layer name repeats or a parameter tensor is registered twice."""
        names = Counter(layer.name for layer in self.layers())
        repeated = sorted(name for name, count in names.items() if count > 1)
        if repeated:
            raise ValueError(f"Duplicate layer names: {', '.join(repeated)}")
        seen: dict[int, str] = {}
        for name, tensor in self.named_parameters():
            if id(tensor) in seen:
                raise ValueError(
                    f"Parameter {name} is the same tensor as {seen[id(tensor)]}"
                )
            seen[id(tensor)] = name

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, *args: Tensor):
        return self.forward(*args)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r}, layers={len(self.layers())})"


class Layer(Module):
    """A leaf module; hooks fire around :meth:`forward`."""

    op_kind: OpKind = OpKind.other

    def own_parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def param_count(self, with_bias: bool = True) -> int:
        return 0

    def macs(self, out_shape: Sequence[int]) -> int:
        return 0

    def __call__(self, x: Tensor) -> Tensor:
        hooks = _HOOKS.get()
        for hook in hooks:
            hook.before(self, x)
        out = self.forward(x)
        for hook in reversed(hooks):
            hook.after(self, x, out)
        return out


def he_normal(
    shape: Sequence[int], fan_in: int, rng: np.random.Generator
) -> np.ndarray:
    """Gaussian weights with standard deviation ``sqrt(2 / fan_in)``."""
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(default_dtype())


class Conv2d(Layer):
    """A convolution with its own weights, optionally followed by a ReLU

    :param name: Qualified layer name
    :param spec: Geometry of the convolution
    :param rng: Source for the weight initialisation; zeros if ``None``
    :param activation: Apply ReLU to the output
    """

    def __init__(
        self,
        name: str,
        spec: ConvSpec,
        rng: Optional[np.random.Generator],
        activation: bool = False,
    ):
        super().__init__(name)
        self.spec = spec
        self.activation = activation
        kh, kw = spec.kernel
        fan_in = (spec.in_channels // spec.groups) * kh * kw
        if is_shape_only():
            self.weight = placeholder(spec.weight_shape)
            self.bias = placeholder((spec.out_channels,)) if spec.has_bias else None
        else:
            data = (
                he_normal(spec.weight_shape, fan_in, rng)
                if rng is not None
                else np.zeros(spec.weight_shape, dtype=default_dtype())
            )
            self.weight = Tensor(data, requires_grad=True, name=f"{name}.weight")
            self.bias = (
                Tensor(
                    np.zeros(spec.out_channels, dtype=default_dtype()),
                    requires_grad=True,
                    name=f"{name}.bias",
                )
                if spec.has_bias
                else None
            )

    @property
    def op_kind(self) -> OpKind:
        if self.spec.is_depthwise:
            return OpKind.depthwise
        if self.spec.kernel == (1, 1):
            return OpKind.conv1x1
        if self.spec.kernel == (3, 3):
            return OpKind.conv3x3
        return OpKind.other

    def own_parameters(self) -> list[tuple[str, Tensor]]:
        params = [("weight", self.weight)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params

    def param_count(self, with_bias: bool = True) -> int:
        return self.spec.param_count(with_bias)

    def macs(self, out_shape: Sequence[int]) -> int:
        """Weights times output positions, summed over the batch."""
        n, _, h, w = out_shape
        return self.spec.param_count(with_bias=False) * h * w * n

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, self.bias, self.spec)
        return relu(out) if self.activation else out


class Pool2d(Layer):
    op_kind = OpKind.pool

    def __init__(
        self,
        name: str,
        kind: Union[PoolKind, str],
        kernel: int,
        stride: Optional[int] = None,
    ):
        super().__init__(name)
        self.kind = PoolKind(kind)
        self.kernel = kernel
        self.stride = stride if stride is not None else kernel

    def forward(self, x: Tensor) -> Tensor:
        return pool2d(x, self.kind, self.kernel, self.stride)


class Upsample(Layer):
    op_kind = OpKind.upsample

    def __init__(
        self, name: str, factor: int, mode: Union[UpsampleMode, str] = "bilinear"
    ):
        super().__init__(name)
        self.factor = factor
        self.mode = UpsampleMode(mode)

    def forward(self, x: Tensor) -> Tensor:
        return upsample(x, self.factor, self.mode)


def output_shapes(module: Module, input_shape: Sequence[int]) -> dict[str, tuple]:
    """Output shape of every layer for an input of ``input_shape``, without arithmetic."""

    class _Shapes:
        def __init__(self):
            self.shapes: dict[str, tuple] = {}

        def before(self, layer, x):
            pass

        def after(self, layer, x, out):
            self.shapes[layer.name] = tuple(out.shape)

    recorder = _Shapes()
    with shape_only(), layer_hooks(recorder):
        module(placeholder(input_shape))
    return recorder.shapes
