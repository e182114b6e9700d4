"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    rel_errors: np.ndarray
    tol: float
    min_fraction: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def fraction_within(self) -> float:
        if self.rel_errors.size == 0:
            return 1.0
        return float(np.mean(self.rel_errors <= self.tol))

    @property
    def max_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def passed(self) -> bool:
        return self.fraction_within >= self.min_fraction

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: {self.fraction_within:.1%} of {self.rel_errors.size} coords within "
                f"{self.tol:g} (max rel err {self.max_error:.2e})")


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return np.abs(g_ad - g_fd) / denom


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    *,
    min_fraction: float = 0.95,
    dtype=np.float64,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(x)`` with central differences.

    ``x`` may be one tensor or a list of tensors; ``f`` is called with no
    arguments when ``x`` is a list (it is expected to close over them), with
    ``x`` otherwise. The checked tensors are evaluated in ``dtype`` for the
    duration of the check (fp64 by default; pass ``None`` to keep their own
    dtype) and restored afterwards. ``max_coords`` samples a deterministic
    subset of coordinates for large parameter sets.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)

    def call():
        return f(x) if single else f()

    saved = [(t.data, t.requires_grad, t.grad) for t in xs]
    try:
        for t in xs:
            if dtype is not None:
                t.data = t.data.astype(dtype)
            t.requires_grad = True
            t.grad = None
        y = call()
        if y.size != 1:
            raise ShapeError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
        backward(y)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in xs]

        coords = [(i, j) for i, t in enumerate(xs) for j in range(t.size)]
        if max_coords is not None and len(coords) > max_coords:
            rng = np.random.default_rng(seed)
            pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
            coords = [coords[k] for k in pick]

        g_ad = np.empty(len(coords))
        g_fd = np.empty(len(coords))
        with no_grad():
            for k, (i, j) in enumerate(coords):
                flat = xs[i].data.reshape(-1)
                orig = flat[j]
                flat[j] = orig + h
                fp = float(call().data.reshape(-1)[0])
                flat[j] = orig - h
                fm = float(call().data.reshape(-1)[0])
                flat[j] = orig
                g_fd[k] = (fp - fm) / (2 * h)
                g_ad[k] = analytic[i].reshape(-1)[j]
    finally:
        for t, (data, req, grad) in zip(xs, saved):
            t.data, t.requires_grad, t.grad = data, req, grad

    return GradCheckReport(relative_error(g_ad, g_fd), tol, min_fraction, g_ad, g_fd)
