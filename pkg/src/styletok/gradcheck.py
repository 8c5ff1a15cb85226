"""Finite-difference verification of taped gradients.

Checks run in float64: build the inputs with ``dtype=np.float64``, pass a
closure that recomputes the scalar loss from scratch, and compare the taped
gradient of every listed tensor against central differences. The relative
error metric is ``|a - n| / max(1, |a|, |n|)``, so agreement is judged
absolutely for small gradients and relatively for large ones.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def numeric_gradient(loss_fn, x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference d(loss)/dx, perturbing one element at a time."""
    base = x.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(loss_fn().data)
        flat[i] = orig - eps
        minus = float(loss_fn().data)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(loss_fn, wrt: list[Tensor], eps: float = 1e-5) -> float:
    """Return the worst relative error between taped and numeric gradients.

    ``loss_fn`` must rebuild the scalar loss from the current ``.data`` of
    the ``wrt`` tensors on every call (it is called ~2N times).
    """
    for t in wrt:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss, parameters=wrt)
    worst = 0.0
    for t in wrt:
        numeric = numeric_gradient(loss_fn, t, eps)
        worst = max(worst, max_rel_error(t.grad, numeric))
    return worst
