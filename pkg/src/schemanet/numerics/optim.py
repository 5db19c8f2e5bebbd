"""Adam optimizer state/step, plain SGD, and Glorot initialization."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .ops import ShapeError
from .tensor import Tensor, get_default_dtype


class AdamState:
    """Per-parameter first/second moments plus a shared step counter."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(state: AdamState, params: Sequence[Tensor],
              grads: Optional[Sequence[np.ndarray]] = None) -> Sequence[Tensor]:
    """One bias-corrected Adam update, in place. grads default to p.grad."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(params) != len(state.m):
        raise ShapeError("adam_step: parameter/gradient/state counts disagree")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.data.dtype)
    return params


def sgd_step(params: Sequence[Tensor], lr: float,
             grads: Optional[Sequence[np.ndarray]] = None) -> Sequence[Tensor]:
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        p.data -= (lr * g).astype(p.data.dtype)
    return params


def glorot_init(shape, rng: np.random.Generator, requires_grad: bool = True) -> Tensor:
    """Uniform Glorot: +/- sqrt(6 / (fan_in + fan_out)) for a 2-D shape."""
    if len(shape) != 2:
        raise ShapeError(f"glorot_init expects a 2-D shape, got {shape}")
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())
    return Tensor(data, requires_grad=requires_grad)


def zeros_init(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=requires_grad)


def ones_init(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad=requires_grad)
