"""Speech feature encoding and cross-attention fusion into gesture tokens.

The onset envelope runs through a small strided conv stack, token ids through
an embedding mean-pooled to the latent frame rate; the two halves concatenate
to the model width. Fusion applies stacked cross-attention blocks where
gesture tokens query the speech frames. A learned constant embedding stands
in for dropped conditions (classifier-free guidance training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .attention import MultiHeadAttention
from .data import TOKEN_VOCAB, SpeechTrack

__all__ = ["SpeechCondition", "SpeechEncoder", "FusionStack", "encode_speech", "fuse",
           "dropout_condition", "sinusoid_table"]

LATENT_DOWNSAMPLE = 4


def sinusoid_table(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Classic transformer sine/cosine position table, (length, d_model)."""
    pos = np.arange(length)[:, None]
    i = np.arange(d_model // 2)[None, :]
    ang = pos / np.power(10000.0, 2 * i / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table.astype(dtype)


_sinusoid = sinusoid_table


@dataclass
class SpeechCondition:
    """Fused speech feature track at the latent frame rate; ``is_null`` marks
    the dropped-condition form (a learned embedding, not zeros)."""

    track: nm.Tensor
    is_null: bool = False

    @property
    def frames(self) -> int:
        return self.track.shape[-2]


class SpeechEncoder(nm.Module):
    """Envelope and token-id branches, each d_model/2 wide, concatenated.

    A sinusoidal position term is mixed into the track itself: the conv
    features are local, and downstream cross-attention is deliberately
    position-free, so any temporal sensitivity of fusion has to travel as
    positional content of the speech track.
    """

    def __init__(self, rng, d_model: int, vocab: int = TOKEN_VOCAB,
                 position_scale: float = 0.5, max_frames: int = 512, dtype=np.float32):
        if d_model % 2 != 0:
            raise ValueError("d_model must be even to split audio/text halves")
        half = d_model // 2
        hidden = max(d_model // 4, 8)
        self.audio1 = nm.Conv1d(rng, 1, hidden, width=5, stride=2, dtype=dtype)
        self.audio2 = nm.Conv1d(rng, hidden, half, width=5, stride=2, dtype=dtype)
        self.tokens = nm.Embedding(rng, vocab, half, dtype=dtype)
        self.position_scale = position_scale
        self._positions = _sinusoid(max_frames, d_model).astype(dtype)

    def __call__(self, envelope: np.ndarray, token_ids: np.ndarray) -> nm.Tensor:
        """(B, T) envelope + token ids -> (B, T/4, d_model) feature track."""
        env = np.asarray(envelope, dtype=np.float32)
        ids = np.asarray(token_ids)
        if env.ndim == 1:
            env = env[None]
            ids = ids[None]
        if env.shape != ids.shape:
            raise ValueError(f"envelope/token lengths differ: {env.shape} vs {ids.shape}")
        if env.shape[1] % LATENT_DOWNSAMPLE != 0:
            raise ValueError("track length must be divisible by the latent downsample (4)")
        audio = self.audio2(nm.gelu(self.audio1(nm.Tensor(env[:, :, None]))))
        text = self.tokens(ids)
        b, t, half = text.shape
        text = nm.tmean(nm.reshape(text, (b, t // LATENT_DOWNSAMPLE, LATENT_DOWNSAMPLE, half)), axis=-2)
        track = nm.concat([audio, text], axis=-1)
        frames = t // LATENT_DOWNSAMPLE
        if frames > self._positions.shape[0]:
            raise ValueError(f"track longer than the positional table ({frames} latent frames)")
        return track + nm.Tensor(self.position_scale * self._positions[None, :frames])


class _FusionBlock(nm.Module):
    def __init__(self, rng, d_model: int, heads: int, ffn_width: int, dtype=np.float32):
        self.ln_attn = nm.LayerNorm(d_model, dtype=dtype)
        self.attn = MultiHeadAttention(rng, d_model, heads, dtype=dtype)
        self.ln_ffn = nm.LayerNorm(d_model, dtype=dtype)
        self.ffn = nm.FeedForward(rng, d_model, ffn_width, dtype=dtype)

    def __call__(self, x: nm.Tensor, track: nm.Tensor) -> nm.Tensor:
        x = x + self.attn(self.ln_attn(x), track)
        return x + self.ffn(self.ln_ffn(x))


class FusionStack(nm.Module):
    """Cross-attention fusion: gesture tokens are queries, speech frames are
    keys/values; carries the learned null-condition embedding."""

    def __init__(self, rng, d_model: int, layers: int = 3, heads: int = 4,
                 ffn_width: int = 1024, dtype=np.float32):
        self.d_model = d_model
        self.null_embedding = nm.param(rng, (d_model,), std=0.02, dtype=dtype)
        self.blocks = [_FusionBlock(rng, d_model, heads, ffn_width, dtype) for _ in range(layers)]

    def null_track(self, batch: int, frames: int) -> nm.Tensor:
        base = nm.Tensor(np.zeros((batch, frames, self.d_model), dtype=np.float32))
        return base + nm.reshape(self.null_embedding, (1, 1, self.d_model))

    def mix_null(self, track: nm.Tensor, keep_mask: np.ndarray) -> nm.Tensor:
        """Per-sample condition dropout: rows with mask 0 use the null embedding."""
        m = np.asarray(keep_mask, dtype=np.float32)[:, None, None]
        null = self.null_track(track.shape[0], track.shape[1])
        return track * nm.Tensor(m) + null * nm.Tensor(1.0 - m)

    def __call__(self, gesture: nm.Tensor, track: nm.Tensor) -> nm.Tensor:
        for block in self.blocks:
            gesture = block(gesture, track)
        return gesture


def encode_speech(encoder: SpeechEncoder, track: SpeechTrack) -> SpeechCondition:
    """Encode one speech track to its fused (T', d_model) condition."""
    feats = encoder(track.envelope, track.tokens)
    return SpeechCondition(nm.reshape(feats, feats.shape[1:]), is_null=False)


def fuse(stack: FusionStack, gesture: nm.Tensor, cond: SpeechCondition) -> nm.Tensor:
    """Fuse a (L, d_model) gesture token sequence with one condition."""
    batched = nm.reshape(gesture, (1,) + tuple(gesture.shape))
    track = nm.reshape(cond.track, (1,) + tuple(cond.track.shape))
    out = stack(batched, track)
    return nm.reshape(out, tuple(gesture.shape))


def dropout_condition(cond: SpeechCondition, p: float, rng: np.random.Generator,
                      stack: FusionStack) -> SpeechCondition:
    """With probability ``p`` replace the condition by the learned null form."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    if rng.random() < p:
        track = stack.null_track(1, cond.frames)
        return SpeechCondition(nm.reshape(track, track.shape[1:]), is_null=True)
    return cond
