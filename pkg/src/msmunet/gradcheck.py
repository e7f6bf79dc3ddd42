"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = 24,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Compare backprop against central differences for a scalar ``fn``.

    ``fn`` rebuilds the graph from the current values of ``tensors``.  At most
    ``max_entries`` randomly chosen coordinates per tensor are perturbed.
    Returns the worst relative error seen.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    out = fn()
    if out.size != 1:
        raise ValueError("check_gradients needs a scalar function")
    out.backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric, floor))
    for t in tensors:
        t.grad = None
    return worst


def random_projection(shape, rng: np.random.Generator) -> Tensor:
    """Fixed random weights used to reduce a tensor output to a scalar."""
    return Tensor(rng.normal(size=shape))
