"""Gradient verification against central finite differences.

Runs a scalar-valued function twice: once on a tape for reverse-mode
gradients, then once per perturbed coordinate for the numeric estimate.
Inputs must be float64 for the comparison to be meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_input: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               h: float = 1e-5, tol: float = 1e-4,
               names: Sequence[str] | None = None) -> GradCheckReport:
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.zero_grad()
    if names is None:
        names = [f"input{i}" for i in range(len(inputs))]

    with Tape() as tape:
        out = fn(*inputs)
        if out.size != 1:
            raise ValueError("grad_check expects a scalar-valued function")
        if not np.isfinite(out.data).all():
            raise FloatingPointError("non-finite function value")
        tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    for name, tensor, a_grad in zip(names, inputs, analytic):
        flat = tensor.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        worst = 0.0
        for idx in range(flat.shape[0]):
            saved = flat[idx]
            flat[idx] = saved + h
            f_plus = fn(*inputs).item()
            flat[idx] = saved - h
            f_minus = fn(*inputs).item()
            flat[idx] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("non-finite intermediate during finite differences")
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(a_flat[idx]) + abs(numeric), 1e-3)
            worst = max(worst, abs(a_flat[idx] - numeric) / denom)
        report.per_input[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
