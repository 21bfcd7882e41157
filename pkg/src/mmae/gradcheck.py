"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor

# Gradients that vanish analytically (e.g. attention key biases, which softmax
# shift-invariance cancels) leave only finite-difference noise, which grows
# with the loss magnitude; the relative error is measured against
# DENOM_FLOOR * max(1, |loss|) instead of against zero.
DENOM_FLOOR = 1e-6


def rel_err(analytic, numeric, floor: float = DENOM_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def _analytic(f: Callable[[], Tensor], tensors: Mapping[str, Tensor]):
    for t in tensors.values():
        t.grad = None
    loss = f()
    loss.backward()
    grads = {k: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()}
    return grads, DENOM_FLOOR * max(1.0, abs(loss.item()))


def elementwise(f: Callable[[], Tensor], tensors: Mapping[str, Tensor], h: float = 1e-4) -> dict[str, float]:
    """Worst relative error per tensor, perturbing every element."""
    grads, floor = _analytic(f, tensors)
    out = {}
    for name, t in tensors.items():
        num = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * h)
        out[name] = rel_err(grads[name], num, floor)
    return out


def directional(f: Callable[[], Tensor], tensors: Mapping[str, Tensor], h: float = 1e-4,
                directions: int = 2, seed: int = 0) -> dict[str, float]:
    """Worst relative error per tensor of ``<grad, u>`` against a central difference along ``u``.

    Costs two forward passes per direction per tensor, so it scales to whole
    models where perturbing every element would not.
    """
    grads, floor = _analytic(f, tensors)
    rng = np.random.default_rng(seed)
    out = {}
    for name, t in tensors.items():
        worst = 0.0
        for _ in range(directions):
            u = rng.standard_normal(t.shape)
            an = float(np.sum(grads[name] * u))
            orig = t.data.copy()
            t.data[...] = orig + h * u
            fp = f().item()
            t.data[...] = orig - h * u
            fm = f().item()
            t.data[...] = orig
            worst = max(worst, rel_err(an, (fp - fm) / (2 * h), floor))
        out[name] = worst
    return out
