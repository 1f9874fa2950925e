"""Central finite-difference checks against the analytic backward pass."""

from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-6,
                       indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """d fn() / d target by central differences, perturbing ``target.data`` in place.

    With ``indices`` only those coordinates are estimated; the rest stay NaN.
    """
    grad = np.full(target.shape, np.nan) if indices is not None else np.zeros(target.shape)
    flat_view = target.data
    coords = indices if indices is not None else list(np.ndindex(target.shape))
    for idx in coords:
        orig = flat_view[idx]
        flat_view[idx] = orig + h
        plus = float(fn().data)
        flat_view[idx] = orig - h
        minus = float(fn().data)
        flat_view[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a|| + ||n||, 1e-12)`` over the finite entries."""
    mask = np.isfinite(numeric)
    a = analytic[mask]
    n = numeric[mask]
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6,
              max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None
              ) -> Dict[int, float]:
    """Return the relative error of each input's analytic gradient.

    ``fn`` must rebuild the graph from the current values of ``inputs`` each
    call. With ``max_coords`` a random subset of coordinates per input is
    checked.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    errors = {}
    rng = rng or np.random.default_rng(0)
    for i, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        indices = None
        if max_coords is not None and t.size > max_coords:
            picks = rng.choice(t.size, size=max_coords, replace=False)
            indices = [np.unravel_index(p, t.shape) for p in picks]
        numeric = numerical_gradient(fn, t, h=h, indices=indices)
        errors[i] = relative_error(analytic, numeric)
    return errors
