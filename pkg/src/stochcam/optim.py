"""Adam parameter updates with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One Adam update, in place on ``params``; returns the advanced state.

    m_t = b1*m + (1-b1)*g;  v_t = b2*v + (1-b2)*g^2
    p  -= lr * (m_t / (1-b1^t)) / (sqrt(v_t / (1-b2^t)) + eps)
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step got {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} moment slots")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
