"""Adaptive-moment (Adam) optimiser."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    first: dict[int, np.ndarray] = field(default_factory=dict)
    second: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    lr: float,
    betas: tuple[float, float],
    eps: float,
    state: AdamState,
) -> None:
    """Apply one bias-corrected Adam update in place.

    Moment buffers are keyed by position in ``params``, so the same ordering
    must be used on every call. A ``None`` gradient counts as zero.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.first.get(i)
        v = state.second.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first[i] = m
        state.second[i] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        max_grad_norm: float | None = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.state = AdamState()

    def step(self) -> None:
        if self.max_grad_norm is not None:
            clip_grad_norm(self.params, self.max_grad_norm)
        adam_step(self.params, [p.grad for p in self.params], self.lr, self.betas, self.eps, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
