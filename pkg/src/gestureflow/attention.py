"""Multi-head scaled dot-product attention on the autodiff tape."""

from __future__ import annotations

import numpy as np

from . import numerics as nm

__all__ = ["MultiHeadAttention"]


class MultiHeadAttention(nm.Module):
    """softmax(Q K^T / sqrt(d_head) + bias) V with a zero-initialized output
    projection, so residual wiring starts as an identity."""

    def __init__(self, rng, d_model: int, heads: int, dtype=np.float32):
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = nm.Linear(rng, d_model, d_model, dtype=dtype)
        self.wk = nm.Linear(rng, d_model, d_model, dtype=dtype)
        self.wv = nm.Linear(rng, d_model, d_model, dtype=dtype)
        self.wo = nm.Linear(rng, d_model, d_model, zero_init=True, dtype=dtype)

    def _split(self, x: nm.Tensor) -> nm.Tensor:
        b, length, d = x.shape
        x = nm.reshape(x, (b, length, self.heads, self.d_head))
        return nm.transpose(x, (0, 2, 1, 3))

    def __call__(self, queries: nm.Tensor, keys_values: nm.Tensor,
                 bias: nm.Tensor | None = None) -> nm.Tensor:
        """queries (B, Lq, d), keys_values (B, Lk, d); bias broadcasts over the
        batch as (heads, Lq, Lk) logit offsets."""
        b, lq, d = queries.shape
        q = self._split(self.wq(queries))
        k = self._split(self.wk(keys_values))
        v = self._split(self.wv(keys_values))
        scores = nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_head))
        if bias is not None:
            scores = scores + bias
        weights = nm.softmax_rows(scores, axis=-1)
        mixed = nm.matmul(weights, v)
        merged = nm.reshape(nm.transpose(mixed, (0, 2, 1, 3)), (b, lq, d))
        return self.wo(merged)
