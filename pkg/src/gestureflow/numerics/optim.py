"""Adam optimizer with explicit per-parameter moment state."""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor

__all__ = ["AdamState", "Adam", "adam_step"]


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: list[Tensor], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; parameters without gradients are skipped
    (their moments still decay, matching the zero-gradient contract)."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    scale = state.learning_rate / c1
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            g = 0.0
        elif g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m, v = state.m[i], state.v[i]
        np.multiply(m, b1, out=m)
        m += (1 - b1) * g
        np.multiply(v, b2, out=v)
        v += (1 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.data = p.data - scale * (m / denom)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError("adam_step produced non-finite parameters")


class Adam:
    """Convenience wrapper pairing a parameter list with its state."""

    def __init__(self, params: list[Tensor], learning_rate: float = 2e-4, **kw):
        self.params = list(params)
        self.state = AdamState(self.params, learning_rate, **kw)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
