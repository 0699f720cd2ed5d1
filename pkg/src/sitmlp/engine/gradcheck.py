"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor

# Denominator floor of the relative error: |a - b| / max(|a|, |b|, floor).
DENOMINATOR_FLOOR = 1e-8


def numerical_gradient(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                       coords: Optional[Sequence[int]] = None, kink_tol: float = 1e-5,
                       refinements: int = 2) -> np.ndarray:
    """d f() / d t by central differences, perturbing ``t.data`` in place.

    ``coords`` restricts the probe to the given flat indices; the others are
    left as NaN. Each coordinate is estimated at steps ``h`` and ``h / 2``.
    On a smooth function the two agree up to roundoff; when they do not, a
    ReLU or max switch lies inside the stencil and the step is shrunk
    tenfold, up to ``refinements`` times.
    """
    flat = t.data.reshape(-1)
    grad = np.full(flat.shape, np.nan) if coords is not None else np.zeros(flat.shape)
    base = abs(float(f().data.sum()))

    def central(i, step):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f().data.sum())
        flat[i] = orig - step
        down = float(f().data.sum())
        flat[i] = orig
        return (up - down) / (2 * step)

    for i in range(flat.size) if coords is None else coords:
        step = h
        for attempt in range(refinements + 1):
            coarse, fine = central(i, step), central(i, step / 2)
            roundoff = 32 * np.finfo(np.float64).eps * max(base, 1.0) / step
            if abs(coarse - fine) <= max(kink_tol * abs(fine), roundoff):
                break
            step /= 10
        grad[i] = fine
    return grad.reshape(t.shape)


def analytic_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list:
    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = f()
        tape.backward(out)
        # inputs the output never reached have an exactly-zero gradient
        grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    finally:
        for t, flag in zip(inputs, flags):
            t.requires_grad = flag
            t.grad = None
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = DENOMINATOR_FLOOR) -> float:
    """Max over coordinates of ``|a - b| / max(|a|, |b|, floor)``; NaNs are skipped."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = ~(np.isnan(a) | np.isnan(b))
    if not mask.any():
        return 0.0
    a, b = a[mask], b[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Largest elementwise relative error between analytic and numerical gradients.

    ``f`` takes no arguments and must read ``inputs`` (float64 tensors) by
    closure; it must return a scalar. With ``max_coords`` set, at most that many
    randomly chosen coordinates of each input are probed.
    """
    rng = np.random.default_rng(seed)
    analytic = analytic_gradients(f, inputs)
    worst = 0.0
    for t, g in zip(inputs, analytic):
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        numeric = numerical_gradient(f, t, h, coords)
        worst = max(worst, relative_error(g, numeric))
    return worst
