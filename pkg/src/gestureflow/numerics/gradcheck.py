"""Central finite-difference verification of backward adjoints."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward

__all__ = ["gradient_error", "check_gradients"]


def gradient_error(
    loss_fn: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    fd_params: Sequence[Tensor] | None = None,
) -> float:
    """Worst normalized mismatch between backward adjoints and central differences.

    The error is ``max|g_ad - g_fd| / max(||g_fd||_inf, 1e-12)``: elementwise
    relative error is ill-posed where a gradient component is legitimately
    zero. ``fd_params`` lets the finite differences run on a higher-precision
    twin of ``params`` (same values, different dtype) so single-precision
    adjoints can still be checked against an accurate oracle. When
    ``max_coords`` is set, a random subset of coordinates is probed.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn(params)
    backward(loss)
    analytic = [np.zeros_like(p.data, dtype=np.float64) if p.grad is None
                else p.grad.astype(np.float64) for p in params]

    probe = list(fd_params) if fd_params is not None else list(params)
    worst = 0.0
    ref = max(max(np.abs(g).max() if g.size else 0.0 for g in analytic), 1e-12)
    for pi, p in enumerate(probe):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            up = float(loss_fn(probe).data)
            flat[ci] = orig - h
            down = float(loss_fn(probe).data)
            flat[ci] = orig
            fd = (up - down) / (2.0 * h)
            ad = analytic[pi].reshape(-1)[ci]
            worst = max(worst, abs(ad - fd) / max(ref, abs(fd)))
    return worst


def check_gradients(loss_fn, params, tol: float = 1e-6, **kw) -> float:
    err = gradient_error(loss_fn, params, **kw)
    if err >= tol:
        raise AssertionError(f"gradient check failed: error {err:.3e} >= tol {tol:.0e}")
    return err
