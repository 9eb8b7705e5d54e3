"""Finite-difference verification of analytic gradients in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _numeric(fn, p: Tensor, flat_idx: int, step: float) -> float:
    flat = p.data.reshape(-1)
    orig = flat[flat_idx]
    flat[flat_idx] = orig + step
    with T.no_grad():
        up = float(np.sum(fn().data, dtype=np.float64))
    flat[flat_idx] = orig - step
    with T.no_grad():
        down = float(np.sum(fn().data, dtype=np.float64))
    flat[flat_idx] = orig
    return (up - down) / (2 * step)


def grad_check(fn: Callable, point, step: float = 1e-3, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``point`` is a Tensor, a list of Tensors (``fn`` is then called with no
    arguments and must close over them), or a plain array (wrapped and passed
    to ``fn``).  Parameters are promoted to float64 for the duration of the
    check and restored bit-exactly afterwards.  ``max_coords`` limits the number
    of randomly chosen coordinates per tensor.
    """
    if isinstance(point, Tensor):
        params: Sequence[Tensor] = [point]
        call = fn
    elif isinstance(point, (list, tuple)):
        params = list(point)
        call = fn
    else:
        x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
        params = [x]
        call = lambda: fn(x)  # noqa: E731
    rng = rng or np.random.default_rng(0)

    saved = [(p.data, p.grad) for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64, copy=True)
            p.grad = None
        with T.precision(np.float64):
            loss = call()
            if loss.size != 1:
                raise T.ShapeError("grad_check: function must be scalar-valued")
            if not np.isfinite(loss.data).all():
                raise T.NonFiniteError("grad_check: non-finite function value")
            T.backward(loss)
            worst = 0.0
            for p in params:
                analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
                coords = np.arange(p.size)
                if max_coords is not None and p.size > max_coords:
                    coords = rng.choice(p.size, max_coords, replace=False)
                for i in coords:
                    num = _numeric(call, p, int(i), step)
                    if not np.isfinite(num):
                        raise T.NonFiniteError("grad_check: non-finite finite difference")
                    err = abs(analytic[i] - num) / max(1.0, abs(num))
                    worst = max(worst, err)
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data = data
            p.grad = grad
    return worst
