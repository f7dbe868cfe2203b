"""Adam optimisation

:func:`adam_step` is the pure update rule; :class:`Adam` applies it to the
parameters of a model in place of their data arrays.
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import attrs
import numpy as np

from gccpm.tensor.core import Tensor

MODULE_LOGGER = logging.getLogger(__name__)


@attrs.define
class AdamState:
    """First and second moment estimates and the number of steps taken

    :param m: First moments, one array per parameter
    :param v: Second moments, one array per parameter
    :param step: Updates applied so far
    """

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    def __attrs_post_init__(self):
        if len(self.m) != len(self.v):
            raise ValueError(
                f"AdamState has {len(self.m)} first moments but {len(self.v)} second moments"
            )
        if self.step < 0:
            raise ValueError(f"AdamState step must be >= 0, got {self.step}")

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> AdamState:
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update

    Inputs are not modified. A missing gradient is treated as zero.

    :return: The updated parameter arrays and the new state

    >>> params, state = adam_step([np.array([1.0, 1.0])], [np.array([0.5, -2.0])],
    ...                           AdamState.zeros_like([np.zeros(2)]), lr=0.1)
    >>> np.round(params[0], 6).tolist(), state.step
    ([0.9, 1.1], 1)
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError(
            f"adam_step got {len(params)} params, {len(grads)} grads and "
            f"state for {len(state.m)}"
        )
    step = state.step + 1
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape or v.shape != p.shape:
            raise ValueError(
                f"moment shapes {m.shape}/{v.shape} do not match parameter {p.shape}"
            )
        g = np.zeros_like(p) if g is None else g
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        new_params.append((p - lr * update).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return new_params, AdamState(m=new_m, v=new_v, step=step)


@attrs.define
class Adam:
    """Adam over a fixed list of parameter tensors

    :param params: Tensors to update; their ``grad`` buffers are read by :meth:`step`
    :param lr: Learning rate, may be changed between steps
    """

    params: list[Tensor]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = attrs.field(init=False)

    def __attrs_post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        new_params, self.state = adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )
        for p, data in zip(self.params, new_params):
            p.data = data
