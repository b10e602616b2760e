"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor


class GradCheckResult(NamedTuple):
    passed: bool
    max_error: float


def numeric_grad(f: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = float(f(Tensor(x)).data)
        flat[j] = orig - step
        fm = float(f(Tensor(x)).data)
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite around coordinate {j}")
        g[j] = (fp - fm) / (2 * step)
    return out


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               tol: float = 1e-6) -> GradCheckResult:
    """Compare the tape gradient of scalar ``f`` at ``point`` with central differences.

    The error per coordinate is ``|a - b| / max(1, |a|, |b|)``.
    """
    x = Tensor(point, requires_grad=True)
    with Tape() as tape:
        y = f(x)
        if y.requires_grad:
            tape.backward(y)
            analytic = x.grad
        else:
            analytic = np.zeros_like(x.data)
    numeric = numeric_grad(f, x.data, step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    max_err = float(err.max()) if err.size else 0.0
    return GradCheckResult(max_err <= tol, max_err)
