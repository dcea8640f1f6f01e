"""SGD with Nesterov momentum."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import DimensionError, Tensor


def sgd_nesterov_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocity: Sequence[np.ndarray],
    lr: float = 0.01,
    momentum: float = 0.9,
) -> None:
    """One in-place Nesterov step on parallel lists of arrays.

    The stored parameters are the look-ahead point ``theta + momentum * v``, so
    each gradient is already evaluated there. With ``v <- momentum * v - lr * g``
    the look-ahead moves by ``-momentum * v_old + (1 + momentum) * v_new``.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise DimensionError("params, grads and velocity must have equal length")
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionError(
                f"entry {i}: param {p.shape}, grad {g.shape}, velocity {v.shape} differ"
            )
        v_old = v.copy()
        v *= momentum
        v -= lr * g
        p += -momentum * v_old + (1.0 + momentum) * v


class SGD:
    """Stateful wrapper that owns the velocity buffers for a parameter list."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 0.01,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        grad_clip: Optional[float] = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            grads.append(g.astype(p.data.dtype, copy=False))
        if self.grad_clip is not None:
            norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        sgd_nesterov_step([p.data for p in self.params], grads, self.velocity, self.lr, self.momentum)
