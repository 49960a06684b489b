"""Two-stage model: frozen residual-VQ codecs + shortcut flow generator.

``fit`` trains (or adopts) one codec per body region, caches quantized
latents for the train split, normalizes them per region, and trains the
spatial-temporal generator with mixed flow-matching / self-consistency
objectives. ``sample_motion`` integrates noise to latents under classifier-
free guidance and decodes back to motion.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import numerics as nm
from .container import load_checkpoint, save_checkpoint
from .conditioning import SpeechEncoder
from .data import REGIONS, CorpusSample, MotionSequence, SpeechTrack
from .flow import LossProfile, ShortcutBatchPlan, TimeSampler, profile_loss_over_t, train_step
from .generator import GeneratorConfig, SpatialTemporalGenerator
from .rvq import ResidualVQCodec, region_windows, residual_quantize, train_region_codecs
from .sampler import SamplingConfig, sample_latent

__all__ = ["ShortcutGestureModel"]


class _EMATeacher:
    """Evaluates the pipeline field with EMA-averaged weights swapped in."""

    def __init__(self, pipeline: "ShortcutGestureModel"):
        self.pipeline = pipeline
        self.shadow = {name: p.data.copy() for name, p in pipeline._named_net_params()}

    def update(self, decay: float) -> None:
        for name, p in self.pipeline._named_net_params():
            self.shadow[name] = decay * self.shadow[name] + (1.0 - decay) * p.data

    def field(self, x, t, d, cond=None, keep_mask=None):
        params = dict(self.pipeline._named_net_params())
        live = {name: p.data for name, p in params.items()}
        for name, p in params.items():
            p.data = self.shadow[name]
        try:
            return self.pipeline.field(x, t, d, cond, keep_mask)
        finally:
            for name, p in params.items():
                p.data = live[name]


class ShortcutGestureModel(BaseEstimator):
    """Speech-to-gesture generator with shortcut flow-matching training.

    Defaults follow the reference configuration (width 256, feed-forward
    1024, 8 spatial-temporal blocks, 3 fusion layers, guidance dropout 0.1);
    step counts default to desk-scale budgets.
    """

    def __init__(self, d_model: int = 256, ffn_width: int = 1024, blocks: int = 8,
                 heads: int = 4, fusion_layers: int = 3, window: int = 64,
                 max_latent_frames: int = 64, latent_scale: float = 0.5,
                 time_sampler: str = "beta", time_alpha: float = 2.0, time_beta: float = 1.2,
                 consistency_fraction: float = 0.25, max_step_pow: int = 7,
                 flow_steps: int = 5000, batch_size: int = 16, learning_rate: float = 2e-4,
                 guidance_dropout: float = 0.1, ema_teacher: float = 0.0,
                 use_spatial: bool = True, use_temporal: bool = True,
                 use_positional: bool = True, attention_order: str = "spatial_first",
                 codec_params: dict | None = None, seed: int = 0):
        self.d_model = d_model
        self.ffn_width = ffn_width
        self.blocks = blocks
        self.heads = heads
        self.fusion_layers = fusion_layers
        self.window = window
        self.max_latent_frames = max_latent_frames
        self.latent_scale = latent_scale
        self.time_sampler = time_sampler
        self.time_alpha = time_alpha
        self.time_beta = time_beta
        self.consistency_fraction = consistency_fraction
        self.max_step_pow = max_step_pow
        self.flow_steps = flow_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.guidance_dropout = guidance_dropout
        self.ema_teacher = ema_teacher
        self.use_spatial = use_spatial
        self.use_temporal = use_temporal
        self.use_positional = use_positional
        self.attention_order = attention_order
        self.codec_params = codec_params
        self.seed = seed

    # -- assembly -----------------------------------------------------------------

    def _named_net_params(self):
        yield from self.generator_.named_parameters("generator.")
        yield from self.speech_encoder_.named_parameters("speech.")

    def _generator_config(self, code_dim: int) -> GeneratorConfig:
        return GeneratorConfig(
            d_model=self.d_model, ffn_width=self.ffn_width, blocks=self.blocks,
            heads=self.heads, fusion_layers=self.fusion_layers, code_dim=code_dim,
            num_regions=len(REGIONS), max_latent_frames=self.max_latent_frames,
            max_step_pow=self.max_step_pow, use_spatial=self.use_spatial,
            use_temporal=self.use_temporal, use_positional=self.use_positional,
            order=self.attention_order,
        )

    def _build_network(self, code_dim: int, rng: np.random.Generator) -> None:
        self.generator_ = SpatialTemporalGenerator(self._generator_config(code_dim), rng)
        self.speech_encoder_ = SpeechEncoder(rng, self.d_model)

    def time_sampler_config(self) -> TimeSampler:
        return TimeSampler(kind=self.time_sampler, alpha=self.time_alpha, beta=self.time_beta)

    def batch_plan(self) -> ShortcutBatchPlan:
        return ShortcutBatchPlan(consistency_fraction=self.consistency_fraction,
                                 max_step_pow=self.max_step_pow)

    # -- data preparation ------------------------------------------------------------

    def _window_grid(self, samples: list[CorpusSample]) -> list[tuple[int, int]]:
        grid = []
        for i, s in enumerate(samples):
            for start in range(0, s.frames - self.window + 1, self.window):
                grid.append((i, start))
        if not grid:
            raise ValueError(f"no {self.window}-frame windows available")
        return grid

    def _encode_windows(self, samples: list[CorpusSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Quantized latents (N, n, T', dc) plus envelope/token windows."""
        grid = self._window_grid(samples)
        env = np.stack([samples[i].speech.envelope[s : s + self.window] for i, s in grid])
        tok = np.stack([samples[i].speech.tokens[s : s + self.window] for i, s in grid])
        per_region = []
        for r in REGIONS:
            wins = np.stack([samples[i].motion.regions[r][s : s + self.window] for i, s in grid])
            per_region.append(self.codecs_[r].transform(wins))
        return np.stack(per_region, axis=1), env, tok

    def _normalize(self, latents: np.ndarray) -> np.ndarray:
        mean = self.latent_mean_[None, :, None, :]
        std = self.latent_std_[None, :, None, :]
        return (latents - mean) / std * self.latent_scale

    def _denormalize(self, latents: np.ndarray) -> np.ndarray:
        mean = self.latent_mean_[None, :, None, :]
        std = self.latent_std_[None, :, None, :]
        return latents / self.latent_scale * std + mean

    # -- training -----------------------------------------------------------------

    def fit(self, samples: list[CorpusSample], codecs: dict[str, ResidualVQCodec] | None = None):
        train = [s for s in samples if s.split == "train"] or list(samples)
        self.frame_rate_ = train[0].motion.frame_rate
        if codecs is None:
            codecs = train_region_codecs(train, window=self.window, **(self.codec_params or {}))
        self.codecs_ = codecs
        code_dim = codecs[REGIONS[0]].code_dim

        latents, env, tok = self._encode_windows(train)
        self.latent_mean_ = latents.mean(axis=(0, 2))
        self.latent_std_ = np.maximum(latents.std(axis=(0, 2)), 1e-3)
        x1 = self._normalize(latents)

        rng = np.random.default_rng(self.seed)
        self._build_network(code_dim, rng)
        optimizer = nm.Adam(self.generator_.parameters() + self.speech_encoder_.parameters(),
                            learning_rate=self.learning_rate)
        plan = self.batch_plan()
        sampler = self.time_sampler_config()
        teacher = _EMATeacher(self) if self.ema_teacher > 0.0 else None

        self.loss_history_ = []
        n = x1.shape[0]
        with nm.single_thread_blas():
            for step in range(self.flow_steps):
                idx = rng.integers(0, n, size=min(self.batch_size, n))
                losses = train_step(self, x1[idx], (env[idx], tok[idx]), plan, sampler,
                                    optimizer, rng, guidance_dropout=self.guidance_dropout,
                                    teacher=teacher)
                if teacher is not None:
                    teacher.update(self.ema_teacher)
                self.loss_history_.append({"step": step, **losses})
        return self

    # -- field interface ------------------------------------------------------------

    def field(self, x, t, d, cond=None, keep_mask=None) -> nm.Tensor:
        """Predicted average-velocity field over the token grid.

        ``cond`` may be None (null path), an ``(envelope, tokens)`` array
        pair, or a pre-encoded condition track tensor.
        """
        if not hasattr(self, "generator_"):
            raise RuntimeError("model is not fitted; train or load a checkpoint first")
        track = None
        if isinstance(cond, nm.Tensor):
            track = cond
        elif cond is not None:
            env, tok = cond
            track = self.speech_encoder_(env, tok)
        if track is not None and keep_mask is not None:
            track = self.generator_.fusion.mix_null(track, keep_mask)
        return self.generator_(x, t, d, track)

    def loss_profile(self, samples: list[CorpusSample], bins: int = 20,
                     rng: np.random.Generator | None = None) -> LossProfile:
        latents, env, tok = self._encode_windows(samples)
        return profile_loss_over_t(self, self._normalize(latents), (env, tok), bins=bins,
                                   rng=rng or np.random.default_rng(self.seed + 1))

    # -- generation -----------------------------------------------------------------

    def encode_condition(self, tracks: list[SpeechTrack]) -> nm.Tensor:
        env = np.stack([t.envelope for t in tracks])
        tok = np.stack([t.tokens for t in tracks])
        return self.speech_encoder_(env, tok)

    def sample_motion(self, tracks: list[SpeechTrack], config: SamplingConfig,
                      rng: np.random.Generator | None = None) -> list[MotionSequence]:
        if not tracks:
            return []
        frames = tracks[0].frames
        if any(t.frames != frames for t in tracks):
            raise ValueError("tracks in one batch must share their length")
        with nm.single_thread_blas():
            cond = self.encode_condition(tracks)
            code_dim = self.codecs_[REGIONS[0]].code_dim
            shape = (len(tracks), len(REGIONS), frames // 4, code_dim)
            latent = sample_latent(self, shape, cond, config, self.max_step_pow, rng=rng)
            return self.decode_latents(latent, snap_to_codes=config.snap_to_codes)

    def decode_latents(self, latent: np.ndarray, snap_to_codes: bool = False) -> list[MotionSequence]:
        z = self._denormalize(latent)
        batch, n = z.shape[0], z.shape[1]
        decoded = {}
        for ri, r in enumerate(REGIONS):
            zr = z[:, ri]
            if snap_to_codes:
                codec = self.codecs_[r]
                flat = zr.reshape(-1, codec.code_dim)
                zr = residual_quantize(flat, codec.codebooks_).quantized.reshape(zr.shape)
            decoded[r] = np.clip(self.codecs_[r].decode(zr), -3.0, 3.0)
        return [
            MotionSequence({r: decoded[r][b] for r in REGIONS}, self.frame_rate_, f"gen-{b:04d}")
            for b in range(batch)
        ]

    # -- persistence -----------------------------------------------------------------

    def save(self, path) -> None:
        tensors = {name: p.data for name, p in self._named_net_params()}
        for r in REGIONS:
            for k, v in self.codecs_[r].state_tensors().items():
                tensors[f"codec.{r}.{k}"] = v
        tensors["stats.mean"] = self.latent_mean_
        tensors["stats.std"] = self.latent_std_
        config = {
            "params": self.get_params(),
            "codec_params": {r: self.codecs_[r].get_params() for r in REGIONS},
            "fitted": {
                "frame_rate": int(self.frame_rate_),
                "region_widths": {r: int(self.codecs_[r].width_) for r in REGIONS},
            },
        }
        save_checkpoint(path, tensors, config)

    @classmethod
    def load(cls, path) -> "ShortcutGestureModel":
        tensors, config = load_checkpoint(path)
        model = cls(**config["params"])
        model.frame_rate_ = config["fitted"]["frame_rate"]
        model.codecs_ = {}
        for r in REGIONS:
            codec = ResidualVQCodec(**config["codec_params"][r])
            state = {k.removeprefix(f"codec.{r}."): v for k, v in tensors.items()
                     if k.startswith(f"codec.{r}.")}
            codec.load_state_tensors(state, config["fitted"]["region_widths"][r])
            model.codecs_[r] = codec
        model.latent_mean_ = tensors["stats.mean"]
        model.latent_std_ = tensors["stats.std"]
        rng = np.random.default_rng(model.seed)
        model._build_network(model.codecs_[REGIONS[0]].code_dim, rng)
        net_state = {}
        for name, _ in model._named_net_params():
            net_state[name] = tensors[name]
        model.generator_.load_state_dict(
            {k.removeprefix("generator."): v for k, v in net_state.items() if k.startswith("generator.")})
        model.speech_encoder_.load_state_dict(
            {k.removeprefix("speech."): v for k, v in net_state.items() if k.startswith("speech.")})
        model.loss_history_ = []
        return model
