"""Primitive tensor operations with recorded gradients.

Every op computes its value eagerly with numpy and, when a tape is
active and some input requires grad, records a backward closure. Ops
whose output never receives a gradient skip their closure body.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, active_tape, as_tensor


class ShapeError(ValueError):
    pass


def _make_output(value, *inputs) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = rg
    out.grad = None
    return out


def _record(out: Tensor, backward) -> None:
    tape = active_tape()
    if tape is not None and out.requires_grad:

        def closure():
            if out.grad is not None:
                backward(out.grad)

        tape.record(closure)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce grad back to `shape` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_output(a.data + b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    _record(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_output(a.data - b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    _record(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_output(a.data * b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    _record(out, backward)
    return out


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.data.dtype.type(s)
    out = _make_output(a.data * s, a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    _record(out, backward)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = _make_output(a.data @ b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    _record(out, backward)
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = _make_output(a.data.T, a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    _record(out, backward)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _make_output(a.data.reshape(shape), a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    _record(out, backward)
    return out


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    a = as_tensor(a)
    mask = a.data >= 0
    factor = np.where(mask, a.data.dtype.type(1.0), a.data.dtype.type(slope))
    out = _make_output(a.data * factor, a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * factor)

    _record(out, backward)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)
    out = _make_output(value, a)

    def backward(g):
        if a.requires_grad:
            inner = (g * value).sum(axis=axis, keepdims=True)
            a.accumulate_grad(value * (g - inner))

    _record(out, backward)
    return out


def masked_softmax(scores, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over positions where mask != 0; fully-masked rows yield zeros."""
    scores = as_tensor(scores)
    m = np.asarray(mask, dtype=bool)
    if m.shape != scores.shape:
        raise ShapeError(f"mask shape {m.shape} does not match scores {scores.shape}")
    neg = np.where(m, scores.data, -np.inf)
    row_max = neg.max(axis=axis, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(scores.data - row_max) * m
    denom = e.sum(axis=axis, keepdims=True)
    safe = np.where(denom > 0, denom, 1.0)
    value = (e / safe).astype(scores.data.dtype)
    out = _make_output(value, scores)

    def backward(g):
        if scores.requires_grad:
            inner = (g * value).sum(axis=axis, keepdims=True)
            scores.accumulate_grad(value * (g - inner))

    _record(out, backward)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.data.reshape(-1).shape[0] != d or bias.data.reshape(-1).shape[0] != d:
        raise ShapeError("layer_norm gain/bias must match the last dimension")
    g_row = gain.data.reshape(-1)
    b_row = bias.data.reshape(-1)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv_std
    out = _make_output(xhat * g_row + b_row, x, gain, bias)

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0).reshape(gain.shape))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0).reshape(bias.shape))
        if x.requires_grad:
            dxhat = g * g_row
            mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat))

    _record(out, backward)
    return out


def dropout(x, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    factor = keep / x.data.dtype.type(1.0 - rate)
    out = _make_output(x.data * factor, x)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * factor)

    _record(out, backward)
    return out


_CE_CLAMP = 1e-12


def cross_entropy(probs, target_class: int) -> Tensor:
    """-log probs[target] on a single distribution, clamped below at 1e-12."""
    probs = as_tensor(probs)
    flat = probs.data.reshape(-1)
    if not 0 <= target_class < flat.shape[0]:
        raise IndexError(f"target class {target_class} out of range for {flat.shape[0]} classes")
    p = flat[target_class]
    clamped = max(float(p), _CE_CLAMP)
    out = _make_output(np.asarray(-np.log(clamped), dtype=probs.data.dtype), probs)

    def backward(g):
        if probs.requires_grad and p > _CE_CLAMP:
            grad = np.zeros_like(probs.data).reshape(-1)
            grad[target_class] = -float(g) / clamped
            probs.accumulate_grad(grad.reshape(probs.shape))

    _record(out, backward)
    return out


def mean_cross_entropy(probs, targets) -> Tensor:
    """Mean of -log probs[i, targets[i]] over rows, clamped like cross_entropy."""
    probs = as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64)
    n, c = probs.shape
    if targets.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= c:
        raise IndexError("target class out of range")
    picked = probs.data[np.arange(n), targets]
    clamped = np.maximum(picked, probs.data.dtype.type(_CE_CLAMP))
    out = _make_output(np.asarray(-np.log(clamped).mean(), dtype=probs.data.dtype), probs)

    def backward(g):
        if probs.requires_grad:
            grad = np.zeros_like(probs.data)
            live = picked > _CE_CLAMP
            rows = np.arange(n)[live]
            grad[rows, targets[live]] = -float(g) / (n * clamped[live])
            probs.accumulate_grad(grad)

    _record(out, backward)
    return out


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = _make_output(np.asarray(x.data.sum(), dtype=x.data.dtype), x)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)))

    _record(out, backward)
    return out


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    return scale(sum_all(x), 1.0 / x.size)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out = _make_output(x.data[start:stop], x)

    def backward(g):
        if x.requires_grad:
            grad = np.zeros_like(x.data)
            grad[start:stop] = g
            x.accumulate_grad(grad)

    _record(out, backward)
    return out


def concat_rows(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_output(np.concatenate([a.data, b.data], axis=0), a, b)
    na = a.shape[0]

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g[:na])
        if b.requires_grad:
            b.accumulate_grad(g[na:])

    _record(out, backward)
    return out
