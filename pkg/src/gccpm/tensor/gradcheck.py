"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from gccpm.tensor.core import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, 1e-8)`` elementwise

    >>> relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])).tolist()
    [0.0, 0.0]
    """
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / scale


def finite_diff_check(
    closure: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-6,
) -> float:
    """Compare backpropagated gradients with central differences

    ``closure(*inputs)`` must return a scalar tensor. Every input needs
    ``requires_grad``. Coordinates are perturbed in place one at a time and
    restored afterwards, so run this in 64-bit precision.

    :param closure: Maps the inputs to a scalar loss
    :param inputs: Tensors to differentiate with respect to
    :param epsilon: Half the finite-difference step
    :return: The largest relative error over every coordinate of every input

    >>> from gccpm.tensor.core import precision
    >>> with precision("float64"):
    ...     w = Tensor([0.5, -1.5, 2.0], requires_grad=True)
    ...     x = Tensor([3.0, 1.0, -2.0])
    ...     err = finite_diff_check(lambda w: (w * x).sum(), [w])
    >>> err < 1e-8
    True
    """
    for t in inputs:
        if not t.requires_grad:
            raise ValueError(f"finite_diff_check input {t!r} does not require grad")
        t.zero_grad()
    backward(closure(*inputs))
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    worst = 0.0
    with no_grad():
        for t, grad in zip(inputs, analytic):
            numeric = np.zeros_like(t.data)
            for idx in np.ndindex(t.shape):
                orig = t.data[idx]
                t.data[idx] = orig + epsilon
                plus = closure(*inputs).item()
                t.data[idx] = orig - epsilon
                minus = closure(*inputs).item()
                t.data[idx] = orig
                numeric[idx] = (plus - minus) / (2.0 * epsilon)
            if numeric.size:
                worst = max(worst, float(relative_error(grad, numeric).max()))
    return worst
