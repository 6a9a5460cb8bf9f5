"""Central finite-difference gradient checking.

The numeric side only ever calls the forward pass (no tape), so it stays
independent of the reverse-mode rules it is validating.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import Tensor, record


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                 coords: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar f() w.r.t. selected flat coords of x.

    Mutates x in place (restoring it) between evaluations. With coords=None
    every coordinate is probed; returns an array shaped like x with
    unprobed coordinates left at nan when coords are sampled.
    """
    flat = x.reshape(-1)
    g = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a-n| scaled by the larger magnitude in play."""
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)), 1e-8)
    return float(np.abs(a - n).max(initial=0.0)) / scale


def check_gradients(loss_fn: Callable[[], Tensor], wrt: Sequence[Tensor],
                    h: float = 1e-5, max_coords: int | None = None,
                    seed: int = 0) -> float:
    """Compare tape gradients of loss_fn() against central differences.

    loss_fn must rebuild the forward pass from the current .data of the
    `wrt` tensors each call. When max_coords is set, that many coordinates
    per tensor are sampled (deterministically from `seed`) instead of all.
    Returns the worst relative error across the checked tensors.
    """
    for t in wrt:
        t.grad = None
    with record() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]

    def fval() -> float:
        return loss_fn().item()

    worst = 0.0
    rng = Rng(seed, "gradcheck")
    for t, a in zip(wrt, analytic):
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = sorted({rng.randint(t.data.size) for _ in range(max_coords)})
        n = numeric_grad(fval, t.data, h=h, coords=coords)
        worst = max(worst, rel_err(a, n))
    return worst
