"""Per-region residual vector-quantized motion codec.

A convolutional encoder (two residual blocks, temporal downsample x4) maps
region frames to code vectors; layered codebooks quantize the running
residual; a mirrored decoder reconstructs frames. Codebooks learn by
exponential moving average with dead-code resets; the encoder/decoder train
against reconstruction MSE plus a commitment term routed through a
straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import numerics as nm
from .data import REGIONS, CorpusSample
from .validation import check_length_multiple

__all__ = [
    "Codebook",
    "QuantizationResult",
    "ResidualVQCodec",
    "quantize_layer",
    "residual_quantize",
    "train_region_codecs",
    "codebook_perplexity",
]


class Codebook:
    """One quantization layer: entry table plus EMA and usage bookkeeping."""

    def __init__(self, rng: np.random.Generator, size: int, dim: int):
        scale = 1.0 / np.sqrt(dim)
        self.entries = rng.uniform(-scale, scale, size=(size, dim))
        self.ema_counts = np.ones(size)
        self.ema_sums = self.entries.copy()
        self.usage = np.zeros(size, dtype=np.int64)
        self.unused_batches = np.zeros(size, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def lookup(self, queries: np.ndarray) -> np.ndarray:
        """Nearest entry per query row (argmin L2, ties to the lowest index)."""
        q = np.atleast_2d(queries)
        d2 = (q * q).sum(axis=1, keepdims=True) - 2.0 * q @ self.entries.T + (self.entries * self.entries).sum(axis=1)
        return np.argmin(d2, axis=1)

    def ema_update(self, queries: np.ndarray, idx: np.ndarray, decay: float, eps: float = 1e-5) -> None:
        counts = np.bincount(idx, minlength=self.size).astype(np.float64)
        sums = np.zeros_like(self.ema_sums)
        np.add.at(sums, idx, queries)
        self.ema_counts = decay * self.ema_counts + (1 - decay) * counts
        self.ema_sums = decay * self.ema_sums + (1 - decay) * sums
        n = self.ema_counts.sum()
        smoothed = (self.ema_counts + eps) / (n + self.size * eps) * n
        self.entries = self.ema_sums / smoothed[:, None]
        self.usage += counts.astype(np.int64)
        self.unused_batches = np.where(counts > 0, 0, self.unused_batches + 1)

    def reset_dead(self, replacements: np.ndarray, threshold: int, rng: np.random.Generator) -> int:
        dead = np.flatnonzero(self.unused_batches >= threshold)
        if dead.size == 0:
            return 0
        rows = rng.integers(0, replacements.shape[0], size=dead.size)
        self.entries[dead] = replacements[rows]
        self.ema_sums[dead] = replacements[rows]
        self.ema_counts[dead] = 1.0
        self.unused_batches[dead] = 0
        return dead.size


def quantize_layer(v: np.ndarray, codebook: Codebook) -> tuple[int, np.ndarray]:
    """Quantize a single code vector; returns (index, selected entry)."""
    if codebook.size == 0:
        raise ValueError("codebook is empty")
    idx = int(codebook.lookup(v[None, :])[0])
    return idx, codebook.entries[idx].copy()


@dataclass
class QuantizationResult:
    indices: list[np.ndarray]      # per layer, one index per code vector
    quantized: np.ndarray          # sum of selected codes, exactly
    residuals: list[np.ndarray]    # residual after each layer
    commitment: float


def residual_quantize(latent: np.ndarray, codebooks: list[Codebook],
                      commitment_weight: float = 0.25) -> QuantizationResult:
    """Layered residual quantization of (N, dim) code vectors.

    Layer ``l`` quantizes the residual left by layer ``l-1``; the quantized
    output is the exact sum of selected codes. The commitment value is the
    per-element mean of ``||sg(code) - residual||^2`` summed over layers and
    scaled by ``commitment_weight``.
    """
    arr = np.atleast_2d(np.asarray(latent))
    residual = arr.copy()
    quantized = np.zeros_like(arr)
    indices: list[np.ndarray] = []
    residuals: list[np.ndarray] = []
    commitment = 0.0
    for book in codebooks:
        idx = book.lookup(residual)
        code = book.entries[idx].astype(arr.dtype)
        commitment += float(np.mean((code - residual) ** 2))
        quantized = quantized + code
        residual = residual - code
        indices.append(idx)
        residuals.append(residual.copy())
    if latent.ndim == 1:
        quantized = quantized[0]
        residuals = [r[0] for r in residuals]
        indices = [i[:1] for i in indices]
    return QuantizationResult(indices, quantized, residuals, commitment * commitment_weight)


class _ResBlock(nm.Module):
    def __init__(self, rng, channels: int, dtype=np.float32):
        self.conv1 = nm.Conv1d(rng, channels, channels, width=3, dtype=dtype)
        self.conv2 = nm.Conv1d(rng, channels, channels, width=3, zero_init=True, dtype=dtype)

    def __call__(self, x):
        return x + self.conv2(nm.gelu(self.conv1(x)))


class _Encoder(nm.Module):
    """Two conv residual blocks, each followed by a stride-2 downsample."""

    def __init__(self, rng, width: int, hidden: int, code_dim: int, dtype=np.float32):
        self.stem = nm.Conv1d(rng, width, hidden, width=3, dtype=dtype)
        self.res1 = _ResBlock(rng, hidden, dtype)
        self.down1 = nm.Conv1d(rng, hidden, hidden, width=3, stride=2, dtype=dtype)
        self.res2 = _ResBlock(rng, hidden, dtype)
        self.down2 = nm.Conv1d(rng, hidden, code_dim, width=3, stride=2, dtype=dtype)

    def __call__(self, x):
        h = nm.gelu(self.stem(x))
        h = self.down1(self.res1(h))
        h = nm.gelu(h)
        return self.down2(self.res2(h))


class _Decoder(nm.Module):
    """Mirror of the encoder; nearest-neighbor upsampling between blocks."""

    def __init__(self, rng, width: int, hidden: int, code_dim: int, dtype=np.float32):
        self.stem = nm.Conv1d(rng, code_dim, hidden, width=3, dtype=dtype)
        self.res1 = _ResBlock(rng, hidden, dtype)
        self.up1 = nm.Conv1d(rng, hidden, hidden, width=3, dtype=dtype)
        self.res2 = _ResBlock(rng, hidden, dtype)
        self.up2 = nm.Conv1d(rng, hidden, width, width=3, dtype=dtype)

    def __call__(self, z):
        h = nm.gelu(self.stem(z))
        h = self.up1(nm.upsample2_linear(self.res1(h)))
        h = nm.gelu(h)
        return self.up2(nm.upsample2_linear(self.res2(h)))


class ResidualVQCodec(BaseEstimator, TransformerMixin):
    """Residual-VQ autoencoder for one body region.

    ``fit`` trains on (N, T, width) windows; ``transform`` returns quantized
    latents (N, T/4, code_dim); ``inverse_transform`` decodes latents back to
    frames. ``encode``/``decode`` are the single-sequence conveniences.
    """

    DOWNSAMPLE = 4

    def __init__(self, num_layers: int = 4, codebook_size: int = 1024, code_dim: int = 128,
                 hidden: int = 128, commitment_weight: float = 0.25, ema_decay: float = 0.99,
                 dead_code_batches: int = 256, steps: int = 3000, learning_rate: float = 2e-4,
                 batch_size: int = 32, seed: int = 0):
        self.num_layers = num_layers
        self.codebook_size = codebook_size
        self.code_dim = code_dim
        self.hidden = hidden
        self.commitment_weight = commitment_weight
        self.ema_decay = ema_decay
        self.dead_code_batches = dead_code_batches
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed

    # -- construction ---------------------------------------------------------

    def _build(self, width: int, rng: np.random.Generator) -> None:
        self.width_ = width
        self.encoder_ = _Encoder(rng, width, self.hidden, self.code_dim)
        self.decoder_ = _Decoder(rng, width, self.hidden, self.code_dim)
        self.codebooks_ = [Codebook(rng, self.codebook_size, self.code_dim)
                           for _ in range(self.num_layers)]

    def fit(self, X, y=None):
        windows = self._windows(X)
        rng = np.random.default_rng(self.seed)
        self._build(windows.shape[-1], rng)
        with nm.single_thread_blas():
            self._train(windows, rng)
        return self

    def _train(self, windows: np.ndarray, rng: np.random.Generator) -> None:
        opt = nm.Adam(list(self.encoder_.parameters()) + list(self.decoder_.parameters()),
                      learning_rate=self.learning_rate)
        history = []
        for step in range(self.steps):
            idx = rng.integers(0, windows.shape[0], size=min(self.batch_size, windows.shape[0]))
            batch = windows[idx].astype(np.float32)
            x = nm.Tensor(batch)
            z = self.encoder_(x)
            flat = z.data.reshape(-1, self.code_dim).astype(np.float64)
            result = residual_quantize(flat, self.codebooks_, self.commitment_weight)
            q = result.quantized.reshape(z.shape).astype(np.float32)
            q_st = nm.stop_gradient_replace(z, nm.Tensor(q))
            recon = self.decoder_(q_st)
            rec_err = recon - x
            loss = (rec_err * rec_err).mean()
            # commitment pulls the encoder toward the (constant) code sums
            cum = np.zeros_like(flat)
            for layer, book in enumerate(self.codebooks_):
                cum = cum + book.entries[result.indices[layer]]
                gap = z - nm.Tensor(cum.reshape(z.shape).astype(np.float32))
                loss = loss + self.commitment_weight * (gap * gap).mean()
            opt.zero_grad()
            try:
                nm.backward(loss)
            except nm.NonFiniteError as exc:
                raise RuntimeError(f"rvq training diverged at step {step}: {exc}") from exc
            opt.step()
            self._update_books(flat, result, rng)
            history.append(float(loss.data))
        self.history_ = np.array(history)

    def _update_books(self, flat: np.ndarray, result: QuantizationResult,
                      rng: np.random.Generator) -> None:
        residual = flat
        for layer, book in enumerate(self.codebooks_):
            idx = result.indices[layer]
            book.ema_update(residual, idx, self.ema_decay)
            book.reset_dead(residual, self.dead_code_batches, rng)
            residual = result.residuals[layer].reshape(residual.shape)

    # -- inference --------------------------------------------------------------

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """Map (T, width) frames to pre-quantization latents (T/4, code_dim)."""
        frames = np.asarray(frames)
        check_length_multiple(frames.shape[0], self.DOWNSAMPLE)
        z = self.encoder_(nm.Tensor(frames.astype(np.float32)))
        return z.data.astype(np.float64)

    def quantize(self, latent: np.ndarray) -> QuantizationResult:
        flat = latent.reshape(-1, self.code_dim)
        res = residual_quantize(flat, self.codebooks_, self.commitment_weight)
        res.quantized = res.quantized.reshape(latent.shape)
        return res

    def decode(self, latent: np.ndarray) -> np.ndarray:
        out = self.decoder_(nm.Tensor(np.asarray(latent, dtype=np.float32)))
        return out.data.astype(np.float64)

    def transform(self, X) -> np.ndarray:
        windows = self._windows(X)
        z = self.encoder_(nm.Tensor(windows.astype(np.float32)))
        flat = z.data.reshape(-1, self.code_dim).astype(np.float64)
        q = residual_quantize(flat, self.codebooks_, self.commitment_weight).quantized
        return q.reshape(z.shape)

    def inverse_transform(self, latents: np.ndarray) -> np.ndarray:
        out = self.decoder_(nm.Tensor(np.asarray(latents, dtype=np.float32)))
        return out.data.astype(np.float64)

    def reconstruction_mse(self, X) -> float:
        windows = self._windows(X)
        recon = self.inverse_transform(self.transform(windows))
        return float(np.mean((recon - windows) ** 2))

    @staticmethod
    def _windows(X) -> np.ndarray:
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("expected (N, T, width) region windows")
        check_length_multiple(arr.shape[1], ResidualVQCodec.DOWNSAMPLE)
        return arr

    # -- persistence ---------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        state = {f"encoder.{k}": v for k, v in self.encoder_.state_dict().items()}
        state.update({f"decoder.{k}": v for k, v in self.decoder_.state_dict().items()})
        for i, book in enumerate(self.codebooks_):
            state[f"codebook{i}.entries"] = book.entries
            state[f"codebook{i}.ema_counts"] = book.ema_counts
            state[f"codebook{i}.ema_sums"] = book.ema_sums
        return state

    def load_state_tensors(self, state: dict[str, np.ndarray], width: int) -> "ResidualVQCodec":
        rng = np.random.default_rng(self.seed)
        self._build(width, rng)
        self.encoder_.load_state_dict(
            {k.removeprefix("encoder."): v for k, v in state.items() if k.startswith("encoder.")})
        self.decoder_.load_state_dict(
            {k.removeprefix("decoder."): v for k, v in state.items() if k.startswith("decoder.")})
        for i, book in enumerate(self.codebooks_):
            book.entries = np.asarray(state[f"codebook{i}.entries"], dtype=np.float64)
            book.ema_counts = np.asarray(state[f"codebook{i}.ema_counts"], dtype=np.float64)
            book.ema_sums = np.asarray(state[f"codebook{i}.ema_sums"], dtype=np.float64)
        return self


def region_windows(samples: list[CorpusSample], region: str, window: int) -> np.ndarray:
    """Tile every sample into consecutive non-overlapping windows."""
    mats = []
    for s in samples:
        m = s.motion.regions[region]
        for start in range(0, m.shape[0] - window + 1, window):
            mats.append(m[start : start + window])
    return np.stack(mats)


def train_region_codecs(samples: list[CorpusSample], window: int = 64,
                        regions: tuple[str, ...] = REGIONS, **codec_params) -> dict[str, ResidualVQCodec]:
    """Fit one codec per region on the train-split windows."""
    train = [s for s in samples if s.split == "train"] or samples
    codecs = {}
    for i, region in enumerate(regions):
        params = dict(codec_params)
        params["seed"] = params.get("seed", 0) + i
        codec = ResidualVQCodec(**params)
        codec.fit(region_windows(train, region, window))
        codecs[region] = codec
    return codecs


def codebook_perplexity(codec: ResidualVQCodec, X, layer: int = 0) -> float:
    """exp(entropy) of the code-assignment distribution on ``X``."""
    windows = codec._windows(X)
    z = codec.encoder_(nm.Tensor(windows.astype(np.float32)))
    flat = z.data.reshape(-1, codec.code_dim).astype(np.float64)
    res = residual_quantize(flat, codec.codebooks_, codec.commitment_weight)
    counts = np.bincount(res.indices[layer], minlength=codec.codebook_size).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))
