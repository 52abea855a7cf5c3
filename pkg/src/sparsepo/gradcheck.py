"""Central finite-difference gradient checks against the tape."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    worst: tuple | None = None
    failure: str | None = None
    errors: dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.passed


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # denominator floor keeps near-zero gradients from exploding the ratio
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def check_gradient(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor],
                   step: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f`` with central differences.

    ``x`` is one tensor or a list of tensors; ``f`` is called with them as
    positional arguments. Each input is temporarily marked ``requires_grad``.
    The relative error of a coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved_flags = [t.requires_grad for t in xs]
    saved_grads = [t.grad for t in xs]
    try:
        for t in xs:
            t.requires_grad = True
            t.grad = None
        out = f(*xs)
        if out.size != 1:
            raise ValueError(f"check_gradient: f must be scalar-valued, got shape {out.shape}")
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

        worst_err, worst_at = 0.0, None
        per_input = {}
        with no_grad():
            for i, t in enumerate(xs):
                num = np.zeros_like(t.data)
                flat = t.data.reshape(-1)
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + step
                    fp = f(*xs).item()
                    flat[j] = orig - step
                    fm = f(*xs).item()
                    flat[j] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        coord = (i, np.unravel_index(j, t.shape))
                        return GradCheckReport(False, float("inf"), tol, coord,
                                               f"non-finite f at input {i}, index {coord[1]}")
                    num.reshape(-1)[j] = (fp - fm) / (2.0 * step)
                err = _rel_err(analytic[i], num)
                per_input[i] = float(err.max()) if err.size else 0.0
                if err.size and err.max() > worst_err:
                    worst_err = float(err.max())
                    worst_at = (i, np.unravel_index(int(err.argmax()), t.shape))
        return GradCheckReport(worst_err <= tol, worst_err, tol, worst_at, None, per_input)
    finally:
        for t, flag, g in zip(xs, saved_flags, saved_grads):
            t.requires_grad = flag
            t.grad = g
