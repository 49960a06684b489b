"""Spatial-temporal attention network over region-token grids.

Token grids are (batch, regions, latent frames, width). Spatial attention
mixes the region tokens inside each frame; temporal attention mixes frames
inside each region; both wrap pre-LN residuals and share a relative logit
bias ("+P"). The speech condition is fused once by cross-attention before the
block stack, and a (t, step-size) embedding is added to every token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .attention import MultiHeadAttention
from .conditioning import FusionStack, sinusoid_table

__all__ = ["GeneratorConfig", "StepEmbedding", "SpatialTemporalGenerator", "step_size_slot"]


@dataclass
class GeneratorConfig:
    d_model: int = 256
    ffn_width: int = 1024
    blocks: int = 8
    heads: int = 4
    fusion_layers: int = 3
    code_dim: int = 128
    num_regions: int = 4
    max_latent_frames: int = 64
    max_step_pow: int = 7          # dyadic step sizes down to 2**-max_step_pow
    use_spatial: bool = True
    use_temporal: bool = True
    use_positional: bool = True
    order: str = "spatial_first"   # or "temporal_first"

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.order not in ("spatial_first", "temporal_first"):
            raise ValueError(f"unknown attention order {self.order!r}")
        if not (self.use_spatial or self.use_temporal):
            raise ValueError("at least one attention direction must stay enabled")


def step_size_slot(d: np.ndarray, max_step_pow: int) -> np.ndarray:
    """Map step sizes {0} | {2^-max_step_pow .. 2^0} to embedding slots."""
    d = np.asarray(d, dtype=np.float64)
    slots = np.zeros(d.shape, dtype=np.int64)
    positive = d > 0
    if np.any(positive):
        logs = np.log2(d[positive])
        rounded = np.round(logs)
        if np.any(np.abs(logs - rounded) > 1e-9):
            raise ValueError("step sizes must be dyadic (powers of two) or zero")
        if np.any(rounded > 0) or np.any(rounded < -max_step_pow):
            raise ValueError(f"step size outside trained range 2^-{max_step_pow}..1")
        slots[positive] = rounded.astype(np.int64) + max_step_pow + 1
    if np.any(d < 0):
        raise ValueError("step sizes must be non-negative")
    return slots


class StepEmbedding(nm.Module):
    """Sinusoid over t concatenated with a learned step-size slot embedding,
    projected to the model width. Distinct (t, d) pairs map to distinct rows."""

    def __init__(self, rng, d_model: int, max_step_pow: int, dtype=np.float32):
        half = d_model // 2
        self.max_step_pow = max_step_pow
        k = half // 2
        self.freqs = (np.pi * np.power(200.0, np.arange(k) / max(k - 1, 1))).astype(np.float64)
        self.d_table = nm.param(rng, (max_step_pow + 2, half), std=0.02, dtype=dtype)
        self.proj_in = nm.Linear(rng, 2 * k + half, d_model, dtype=dtype)
        self.proj_out = nm.Linear(rng, d_model, d_model, dtype=dtype)

    def __call__(self, t: np.ndarray, d: np.ndarray) -> nm.Tensor:
        ang = t[:, None] * self.freqs[None, :]
        sines = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)
        slots = step_size_slot(d, self.max_step_pow)
        h = nm.concat([nm.Tensor(sines), nm.gather_rows(self.d_table, slots)], axis=-1)
        return self.proj_out(nm.gelu(self.proj_in(h)))


class _STBlock(nm.Module):
    def __init__(self, rng, cfg: GeneratorConfig, dtype=np.float32):
        if cfg.use_spatial:
            self.ln_spatial = nm.LayerNorm(cfg.d_model, dtype=dtype)
            self.spatial = MultiHeadAttention(rng, cfg.d_model, cfg.heads, dtype=dtype)
        if cfg.use_temporal:
            self.ln_temporal = nm.LayerNorm(cfg.d_model, dtype=dtype)
            self.temporal = MultiHeadAttention(rng, cfg.d_model, cfg.heads, dtype=dtype)
        self.ln_ffn = nm.LayerNorm(cfg.d_model, dtype=dtype)
        self.ffn = nm.FeedForward(rng, cfg.d_model, cfg.ffn_width, dtype=dtype)


class SpatialTemporalGenerator(nm.Module):
    """Predicts velocity / shortcut fields over a token grid.

    ``forward(x, t, d, cond)`` takes a numpy grid (B, n, T', code_dim), per-
    sample timesteps and step sizes, and an optional fused condition track;
    ``cond=None`` routes through the learned null embedding.
    """

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        n, dm, dc = cfg.num_regions, cfg.d_model, cfg.code_dim
        self.w_in = nm.param(rng, (n, 1, dc, dm), dtype=dtype)
        self.b_in = nm.zeros_param((n, 1, 1, dm), dtype)
        self.w_out = nm.zeros_param((n, 1, dm, dc), dtype)
        self.b_out = nm.zeros_param((n, 1, 1, dc), dtype)
        if cfg.use_positional:
            self.spatial_table = nm.param(rng, (n, dm), std=0.02, dtype=dtype)
            self.temporal_table = sinusoid_table(cfg.max_latent_frames, dm, dtype)
            if cfg.use_spatial:
                self.spatial_bias = nm.zeros_param((cfg.heads, n, n), dtype)
            if cfg.use_temporal:
                self.temporal_bias_table = nm.zeros_param((2 * cfg.max_latent_frames - 1, cfg.heads), dtype)
        self.step_embedding = StepEmbedding(rng, dm, cfg.max_step_pow, dtype=dtype)
        self.fusion = FusionStack(rng, dm, cfg.fusion_layers, cfg.heads, cfg.ffn_width, dtype=dtype)
        self.blocks = [_STBlock(rng, cfg, dtype) for _ in range(cfg.blocks)]

    # -- positional logit biases -------------------------------------------------

    def _temporal_bias(self, frames: int) -> nm.Tensor | None:
        if not (self.cfg.use_positional and self.cfg.use_temporal):
            return None
        max_off = self.cfg.max_latent_frames - 1
        offs = np.arange(frames)[:, None] - np.arange(frames)[None, :]
        offs = np.clip(offs, -max_off, max_off) + max_off
        bias = nm.gather_rows(self.temporal_bias_table, offs.reshape(-1))
        bias = nm.reshape(bias, (frames, frames, self.cfg.heads))
        return nm.transpose(bias, (2, 0, 1))

    # -- forward ---------------------------------------------------------------

    def forward(self, x: np.ndarray, t, d, cond: nm.Tensor | None) -> nm.Tensor:
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        b, n, frames, dc = x.shape
        if n != cfg.num_regions or dc != cfg.code_dim:
            raise ValueError(f"grid shape {x.shape} does not match the configuration")
        if frames > cfg.max_latent_frames:
            raise ValueError(f"{frames} latent frames exceed the temporal table ({cfg.max_latent_frames})")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)).copy()
        d = np.broadcast_to(np.asarray(d, dtype=np.float64), (b,)).copy()
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("timesteps must lie in [0, 1]")

        grid = nm.transpose(nm.Tensor(x), (1, 0, 2, 3))          # (n, B, T', dc)
        tokens = nm.matmul(grid, self.w_in) + self.b_in           # (n, B, T', dm)
        tokens = nm.transpose(tokens, (1, 0, 2, 3))               # (B, n, T', dm)
        if cfg.use_positional:
            tokens = tokens + nm.reshape(self.spatial_table, (1, n, 1, cfg.d_model))
            tokens = tokens + nm.Tensor(self.temporal_table[None, None, :frames])
        step = self.step_embedding(t, d)
        tokens = tokens + nm.reshape(step, (b, 1, 1, cfg.d_model))

        if cond is None:
            cond = self.fusion.null_track(b, frames)
        flat = nm.reshape(tokens, (b, n * frames, cfg.d_model))
        tokens = nm.reshape(self.fusion(flat, cond), (b, n, frames, cfg.d_model))

        temporal_bias = self._temporal_bias(frames)
        spatial_bias = self.spatial_bias if (cfg.use_positional and cfg.use_spatial) else None
        for block in self.blocks:
            passes = ("spatial", "temporal") if cfg.order == "spatial_first" else ("temporal", "spatial")
            for kind in passes:
                if kind == "spatial" and cfg.use_spatial:
                    frame_major = nm.reshape(nm.transpose(tokens, (0, 2, 1, 3)), (b * frames, n, cfg.d_model))
                    normed = block.ln_spatial(frame_major)
                    out = block.spatial(normed, normed, bias=spatial_bias)
                    out = nm.transpose(nm.reshape(out, (b, frames, n, cfg.d_model)), (0, 2, 1, 3))
                    tokens = tokens + out
                elif kind == "temporal" and cfg.use_temporal:
                    region_major = nm.reshape(tokens, (b * n, frames, cfg.d_model))
                    normed = block.ln_temporal(region_major)
                    out = block.temporal(normed, normed, bias=temporal_bias)
                    tokens = tokens + nm.reshape(out, (b, n, frames, cfg.d_model))
            tokens = tokens + block.ffn(block.ln_ffn(tokens))

        out = nm.transpose(tokens, (1, 0, 2, 3))
        out = nm.matmul(out, self.w_out) + self.b_out
        return nm.transpose(out, (1, 0, 2, 3))

    __call__ = forward
