"""Differentiable operators on :class:`~gccpm.tensor.core.Tensor`

Feature maps use the N×C×H×W layout throughout. Every operator checks its
arguments, computes its result with numpy and registers a backward closure
through :func:`~gccpm.tensor.core.record`. Inside
:func:`~gccpm.tensor.core.shape_only` the arithmetic is skipped and a
placeholder of the output shape is returned instead.

Convolution and pooling loop over kernel taps: for tap ``(i, j)`` the strided,
dilated slice of the padded input that lines up with that tap is multiplied in
one ``tensordot`` call and accumulated.
"""

from __future__ import annotations

import sys
from enum import Enum, unique
from typing import Callable, Optional, Sequence, Union

import attrs
import numpy as np

from gccpm.tensor.core import Tensor, as_tensor, is_shape_only, placeholder, record
from gccpm._utils import nice_join

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup  # noqa: F401


def _pair(value: Union[int, Sequence[int]]) -> tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    first, second = value
    return int(first), int(second)


def conv_output_size(
    size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1
) -> int:
    """Spatial extent after a convolution or pooling window

    ``floor((size + 2*padding - dilation*(kernel - 1) - 1) / stride) + 1``

    >>> conv_output_size(32, 3, stride=2, padding=1)
    16
    >>> conv_output_size(5, 3, dilation=2)
    1
    >>> conv_output_size(2, 3)
    0
    """
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


@attrs.define(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution

    :param in_channels: Input channels
    :param out_channels: Output channels
    :param kernel: ``(kh, kw)``, an int is used for both
    :param stride: ``(sh, sw)``
    :param dilation: Sampling rate ``r`` between kernel taps, 1 is an ordinary convolution
    :param groups: Channel groups, ``groups == in_channels == out_channels`` is depthwise
    :param padding: Symmetric zero padding ``(ph, pw)``
    :param has_bias: Whether a per output channel bias is added

    >>> ConvSpec(16, 32, 3).weight_shape
    (32, 16, 3, 3)
    >>> ConvSpec.same(128, 1024, 3, dilation=6).padding
    (6, 6)
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = attrs.field(converter=_pair)
    stride: tuple[int, int] = attrs.field(default=(1, 1), converter=_pair)
    dilation: int = 1
    groups: int = 1
    padding: tuple[int, int] = attrs.field(default=(0, 0), converter=_pair)
    has_bias: bool = True

    def __attrs_post_init__(self):
        errors = []
        if self.in_channels < 1 or self.out_channels < 1:
            errors.append(
                ValueError(
                    f"channels must be positive, got {self.in_channels}->{self.out_channels}"
                )
            )
        if self.groups < 1:
            errors.append(ValueError(f"groups must be >= 1, got {self.groups}"))
        elif self.in_channels % self.groups or self.out_channels % self.groups:
            errors.append(
                ValueError(
                    f"in_channels ({self.in_channels}) and out_channels ({self.out_channels}) "
                    f"must be divisible by groups ({self.groups})"
                )
            )
        if self.dilation < 1:
            errors.append(ValueError(f"dilation must be >= 1, got {self.dilation}"))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            errors.append(
                ValueError(
                    f"kernel {self.kernel} and stride {self.stride} must be positive"
                )
            )
        if min(self.padding) < 0:
            errors.append(ValueError(f"padding must be >= 0, got {self.padding}"))
        if errors:
            raise BaseExceptionGroup("Invalid ConvSpec", errors)

    @classmethod
    def same(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        *,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
        has_bias: bool = True,
    ) -> ConvSpec:
        """Odd square kernel padded with ``dilation * (kernel - 1) / 2`` so stride 1 keeps the map size."""
        if kernel % 2 == 0:
            raise ValueError(f"'same' padding needs an odd kernel, got {kernel}")
        pad = dilation * (kernel - 1) // 2
        return cls(
            in_channels,
            out_channels,
            kernel,
            stride=stride,
            dilation=dilation,
            groups=groups,
            padding=pad,
            has_bias=has_bias,
        )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (
            self.out_channels,
            self.in_channels // self.groups,
            *self.kernel,
        )

    @property
    def is_depthwise(self) -> bool:
        return self.groups > 1 and self.groups == self.in_channels == self.out_channels

    def param_count(self, with_bias: bool = True) -> int:
        """``Cout * (Cin / groups) * kh * kw`` plus ``Cout`` for the bias

        >>> ConvSpec(16, 32, 3).param_count()
        4640
        >>> ConvSpec(16, 32, 3).param_count(with_bias=False)
        4608
        """
        weights = int(np.prod(self.weight_shape))
        return weights + (self.out_channels if with_bias and self.has_bias else 0)

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        kh, kw = self.kernel
        (sh, sw), (ph, pw) = self.stride, self.padding
        return (
            conv_output_size(height, kh, sh, ph, self.dilation),
            conv_output_size(width, kw, sw, pw, self.dilation),
        )


def _tap_slices(
    tap: tuple[int, int],
    dilation: int,
    stride: tuple[int, int],
    out_hw: tuple[int, int],
) -> tuple[slice, slice, slice, slice]:
    i, j = tap
    (sh, sw), (ho, wo) = stride, out_hw
    rows = slice(i * dilation, i * dilation + sh * (ho - 1) + 1, sh)
    cols = slice(j * dilation, j * dilation + sw * (wo - 1) + 1, sw)
    return slice(None), slice(None), rows, cols


def _pad(data: np.ndarray, padding: tuple[int, int], value: float = 0.0) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return data
    return np.pad(
        data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="constant", constant_values=value
    )


def _unpad(data: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    h, w = data.shape[2:]
    return data[:, :, ph : h - ph, pw : w - pw]


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects an N×C×H×W tensor, got shape {x.shape}")


def conv2d(
    input: Tensor, weights: Tensor, bias: Optional[Tensor], spec: ConvSpec
) -> Tensor:
    """Dilated, grouped 2-D convolution (cross-correlation)

    Each output value is the atrous sum over taps ``k``:
    ``y[i] = sum_k x[i*stride + r*k] * w[k] + b``.

    :param input: N×Cin×H×W
    :param weights: Cout×(Cin/groups)×kh×kw
    :param bias: ``Cout`` values, or ``None``
    :param spec: The geometry, must agree with ``weights`` and ``bias``
    :raises ValueError: On any shape mismatch or a non-positive output extent

    >>> x = Tensor(np.arange(1.0, 6.0).reshape(1, 1, 1, 5))
    >>> w = Tensor(np.ones((1, 1, 1, 3)))
    >>> conv2d(x, w, None, ConvSpec(1, 1, (1, 3), dilation=2, has_bias=False)).data.ravel().tolist()
    [9.0]
    """
    _require_4d(input, "conv2d")
    n, c, h, w = input.shape
    if c != spec.in_channels:
        raise ValueError(
            f"conv2d input has {c} channels but the layer expects {spec.in_channels}"
        )
    if tuple(weights.shape) != spec.weight_shape:
        raise ValueError(
            f"conv2d weights have shape {weights.shape}, expected {spec.weight_shape}"
        )
    if spec.has_bias != (bias is not None):
        raise ValueError(
            f"conv2d spec has_bias={spec.has_bias} but bias is {'missing' if bias is None else 'given'}"
        )
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ValueError(
            f"conv2d bias has shape {bias.shape}, expected ({spec.out_channels},)"
        )
    ho, wo = spec.output_hw(h, w)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output extent {ho}x{wo} is not positive for a {h}x{w} input "
            f"(kernel {spec.kernel}, stride {spec.stride}, padding {spec.padding}, "
            f"dilation {spec.dilation})"
        )
    if is_shape_only():
        return placeholder((n, spec.out_channels, ho, wo))

    g = spec.groups
    kh, kw = spec.kernel
    cg, og = c // g, spec.out_channels // g
    xp = _pad(input.data, spec.padding)
    wd = weights.data
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    dtype = np.result_type(xp, wd)

    if g == 1:
        acc = np.zeros((n, ho, wo, spec.out_channels), dtype=dtype)
        for tap in taps:
            xs = xp[_tap_slices(tap, spec.dilation, spec.stride, (ho, wo))]
            acc += np.tensordot(xs, wd[:, :, tap[0], tap[1]], axes=([1], [1]))
        out = acc.transpose(0, 3, 1, 2)
    elif spec.is_depthwise:
        out = np.zeros((n, c, ho, wo), dtype=dtype)
        for tap in taps:
            xs = xp[_tap_slices(tap, spec.dilation, spec.stride, (ho, wo))]
            out += xs * wd[:, 0, tap[0], tap[1]][None, :, None, None]
    else:
        wg = wd.reshape(g, og, cg, kh, kw)
        acc = np.zeros((n, g, og, ho, wo), dtype=dtype)
        for tap in taps:
            xs = xp[_tap_slices(tap, spec.dilation, spec.stride, (ho, wo))]
            acc += np.einsum(
                "goc,ngchw->ngohw",
                wg[:, :, :, tap[0], tap[1]],
                xs.reshape(n, g, cg, ho, wo),
                optimize=True,
            )
        out = acc.reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _backward(grad: np.ndarray):
        dxp = np.zeros_like(xp) if input.requires_grad else None
        dw = np.zeros_like(wd) if weights.requires_grad else None
        if g == 1:
            g_nhwc = grad.transpose(0, 2, 3, 1)
            for tap in taps:
                sl = _tap_slices(tap, spec.dilation, spec.stride, (ho, wo))
                w_tap = wd[:, :, tap[0], tap[1]]
                if dw is not None:
                    dw[:, :, tap[0], tap[1]] = np.tensordot(
                        grad, xp[sl], axes=([0, 2, 3], [0, 2, 3])
                    )
                if dxp is not None:
                    dxp[sl] += np.tensordot(g_nhwc, w_tap, axes=([3], [0])).transpose(
                        0, 3, 1, 2
                    )
        elif spec.is_depthwise:
            for tap in taps:
                sl = _tap_slices(tap, spec.dilation, spec.stride, (ho, wo))
                if dw is not None:
                    dw[:, 0, tap[0], tap[1]] = (grad * xp[sl]).sum(axis=(0, 2, 3))
                if dxp is not None:
                    dxp[sl] += grad * wd[:, 0, tap[0], tap[1]][None, :, None, None]
        else:
            gg = grad.reshape(n, g, og, ho, wo)
            wg = wd.reshape(g, og, cg, kh, kw)
            dwg = dw.reshape(g, og, cg, kh, kw) if dw is not None else None
            for tap in taps:
                sl = _tap_slices(tap, spec.dilation, spec.stride, (ho, wo))
                if dwg is not None:
                    dwg[:, :, :, tap[0], tap[1]] = np.einsum(
                        "ngohw,ngchw->goc",
                        gg,
                        xp[sl].reshape(n, g, cg, ho, wo),
                        optimize=True,
                    )
                if dxp is not None:
                    dxp[sl] += np.einsum(
                        "goc,ngohw->ngchw", wg[:, :, :, tap[0], tap[1]], gg, optimize=True
                    ).reshape(n, c, ho, wo)
        dx = _unpad(dxp, spec.padding) if dxp is not None else None
        db = grad.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return dx, dw, db

    parents = [input, weights] + ([bias] if bias is not None else [])
    return record(out, parents, _backward)


@unique
class PoolKind(str, Enum):
    #: Mean over the window, padded cells count as zeros
    avg = "avg"
    #: Maximum over the window, ties go to the first tap in row-major order
    max = "max"


def pool2d(
    input: Tensor,
    kind: Union[PoolKind, str],
    kernel: Union[int, Sequence[int]],
    stride: Union[int, Sequence[int], None] = None,
    padding: Union[int, Sequence[int]] = 0,
) -> Tensor:
    """Average or max pooling

    :param input: N×C×H×W
    :param kind: ``avg`` or ``max``
    :param kernel: Window ``(kh, kw)``
    :param stride: Step ``(sh, sw)``, defaults to the kernel
    :param padding: Symmetric padding; zeros for ``avg``, ``-inf`` for ``max``
    :raises ValueError: If the window does not fit the padded input

    >>> x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    >>> pool2d(x, "max", 2).data.ravel().tolist()
    [4.0]
    >>> pool2d(x, "avg", 2).data.ravel().tolist()
    [2.5]
    """
    _require_4d(input, "pool2d")
    kind = PoolKind(kind)
    kernel = _pair(kernel)
    stride = _pair(stride) if stride is not None else kernel
    padding = _pair(padding)
    n, c, h, w = input.shape
    kh, kw = kernel
    if kh > h + 2 * padding[0] or kw > w + 2 * padding[1]:
        raise ValueError(
            f"pool2d kernel {kernel} is larger than the padded input {h}x{w} (padding {padding})"
        )
    ho = conv_output_size(h, kh, stride[0], padding[0])
    wo = conv_output_size(w, kw, stride[1], padding[1])
    if is_shape_only():
        return placeholder((n, c, ho, wo))

    taps = [(i, j) for i in range(kh) for j in range(kw)]
    if kind is PoolKind.avg:
        xp = _pad(input.data, padding)
        out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
        for tap in taps:
            out += xp[_tap_slices(tap, 1, stride, (ho, wo))]
        out /= kh * kw

        def _backward(grad: np.ndarray):
            dxp = np.zeros_like(xp)
            share = grad / (kh * kw)
            for tap in taps:
                dxp[_tap_slices(tap, 1, stride, (ho, wo))] += share
            return (_unpad(dxp, padding),)

        return record(out, [input], _backward)

    xp = _pad(input.data, padding, value=-np.inf)
    best = np.full((n, c, ho, wo), -np.inf, dtype=xp.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.intp)
    for t, tap in enumerate(taps):
        window = xp[_tap_slices(tap, 1, stride, (ho, wo))]
        better = window > best
        best = np.where(better, window, best)
        arg[better] = t

    def _backward(grad: np.ndarray):
        dxp = np.zeros(xp.shape, dtype=grad.dtype)
        for t, tap in enumerate(taps):
            dxp[_tap_slices(tap, 1, stride, (ho, wo))] += np.where(arg == t, grad, 0.0)
        return (_unpad(dxp, padding),)

    return record(best, [input], _backward)


@unique
class UpsampleMode(str, Enum):
    #: Replicate every cell ``factor`` times along each axis
    nearest = "nearest"
    #: Linear interpolation, half-pixel centres (``align_corners=False``)
    bilinear = "bilinear"


def bilinear_matrix(size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights mapping ``size`` cells to ``size * factor`` cells

    Output cell ``o`` samples the source at ``(o + 0.5) / factor - 0.5``, clamped
    to the first and last cells. Rows sum to one.

    >>> bilinear_matrix(2, 2).tolist()
    [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]]
    """
    out_size = size * factor
    src = (np.arange(out_size, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    mat = np.zeros((out_size, size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat.astype(dtype)


def upsample(
    input: Tensor, factor: int, mode: Union[UpsampleMode, str] = UpsampleMode.nearest
) -> Tensor:
    """Enlarge both spatial extents by an integer ``factor``

    >>> x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    >>> upsample(x, 2).data[0, 0].tolist()
    [[1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0], [3.0, 3.0, 4.0, 4.0], [3.0, 3.0, 4.0, 4.0]]
    """
    _require_4d(input, "upsample")
    mode = UpsampleMode(mode)
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    n, c, h, w = input.shape
    if is_shape_only():
        return placeholder((n, c, h * factor, w * factor))
    if factor == 1:
        return input

    if mode is UpsampleMode.nearest:
        out = input.data.repeat(factor, axis=2).repeat(factor, axis=3)

        def _backward(grad: np.ndarray):
            return (grad.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

        return record(out, [input], _backward)

    rows = bilinear_matrix(h, factor, input.dtype)
    cols = bilinear_matrix(w, factor, input.dtype)
    out = rows @ input.data @ cols.T

    def _backward(grad: np.ndarray):
        return (rows.T @ grad @ cols,)

    return record(out, [input], _backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join tensors along ``axis``; all other extents must agree

    >>> a = Tensor(np.zeros((1, 2, 4, 4)))
    >>> concat([a, a], axis=1).shape
    (1, 4, 4, 4)
    """
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            a != b for k, (a, b) in enumerate(zip(t.shape, first.shape)) if k != axis
        ):
            raise ValueError(
                f"concat on axis {axis}: shape {t.shape} does not match {first.shape}"
            )
    if len(tensors) == 1:
        return first
    extents = [t.shape[axis] for t in tensors]
    if is_shape_only():
        shape = list(first.shape)
        shape[axis] = sum(extents)
        return placeholder(shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(extents)[:-1]

    def _backward(grad: np.ndarray):
        return tuple(np.split(grad, bounds, axis=axis))

    return record(out, list(tensors), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of identical shape (no broadcasting)."""
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    if is_shape_only():
        return placeholder(a.shape)
    return record(a.data + b.data, [a, b], lambda grad: (grad, grad))


def add_scalar(a: Tensor, value: float) -> Tensor:
    if is_shape_only():
        return placeholder(a.shape)
    return record(a.data + value, [a], lambda grad: (grad,))


def mul(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    """Elementwise product with a tensor of the same shape, or scaling by a number."""
    if not isinstance(b, Tensor):
        factor = float(b)
        if is_shape_only():
            return placeholder(a.shape)
        return record(a.data * factor, [a], lambda grad: (grad * factor,))
    if a.shape != b.shape:
        raise ValueError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    if is_shape_only():
        return placeholder(a.shape)
    return record(
        a.data * b.data, [a, b], lambda grad: (grad * b.data, grad * a.data)
    )


def relu(a: Tensor) -> Tensor:
    """``max(x, 0)``; the gradient at exactly zero is zero

    >>> relu(Tensor([-1.0, 0.0, 2.0])).data.tolist()
    [0.0, 0.0, 2.0]
    """
    if is_shape_only():
        return placeholder(a.shape)
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0).astype(a.dtype), [a], lambda grad: (grad * mask,))


def total(a: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    if is_shape_only():
        return placeholder(())
    shape = a.shape
    return record(
        np.asarray(a.data.sum(), dtype=a.dtype),
        [a],
        lambda grad: (np.broadcast_to(grad, shape).copy(),),
    )


def weighted_squared_error(
    pred: Tensor, target: Union[Tensor, np.ndarray], weights: np.ndarray
) -> Tensor:
    """``sum_{n,k,x,y} weights[n,k] * (pred - target)^2`` over N×K×H×W maps

    :param pred: Predicted maps, N×K×H×W
    :param target: Ground truth of the same shape, treated as a constant
    :param weights: N×K per map weights
    :raises ValueError: On a shape mismatch
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    weights = np.asarray(weights)
    if pred.shape != target.shape:
        raise ValueError(
            f"prediction shape {pred.shape} does not match target shape {target.shape}"
        )
    if weights.shape != pred.shape[:2]:
        raise ValueError(
            f"weights shape {weights.shape} does not match maps {pred.shape[:2]}"
        )
    if is_shape_only():
        return placeholder(())
    w = weights.astype(pred.dtype)[:, :, None, None]
    diff = pred.data - target.astype(pred.dtype)
    value = np.asarray((w * diff * diff).sum(), dtype=pred.dtype)
    return record(value, [pred], lambda grad: (2.0 * grad * w * diff,))


_ELTWISE: dict[str, Callable[..., Tensor]] = {"add": add, "relu": relu, "mul": mul}


def eltwise(op: str, *args: Tensor) -> Tensor:
    """Apply a pointwise operator by name

    >>> x = Tensor([-1.5, 0.0, 2.0])
    >>> eltwise("add", eltwise("relu", x), eltwise("relu", x * -1.0)).data.tolist()
    [1.5, 0.0, 2.0]
    """
    try:
        fn = _ELTWISE[op]
    except KeyError:
        raise ValueError(
            f"Unknown eltwise op {op!r}, expected one of {nice_join(sorted(_ELTWISE))}"
        ) from None
    return fn(*(as_tensor(a) for a in args))
