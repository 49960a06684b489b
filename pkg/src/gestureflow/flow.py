"""Training objectives: flow matching, shortcut self-consistency, timestep laws.

The network predicts the average velocity over ``[t, t+d]``; ``d = 0`` is the
instantaneous flow-matching regime. Consistency targets are built from two
gradient-stopped half-step evaluations, with the second evaluated at ``t+d``
(the state's actual time). Training timesteps come from a configurable law;
the beta(2, 1.2) law skews sampling toward the poorly learned end of the
trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from . import numerics as nm
from .numerics import Tensor

__all__ = [
    "FieldModel",
    "FlowSample",
    "TimeSampler",
    "ShortcutBatchPlan",
    "LossProfile",
    "interpolate",
    "draw_flow_samples",
    "flow_loss",
    "shortcut_consistency_loss",
    "train_step",
    "profile_loss_over_t",
]


class FieldModel(Protocol):
    def field(self, x: np.ndarray, t: np.ndarray, d: np.ndarray,
              cond: Any = None, keep_mask: np.ndarray | None = None) -> Tensor: ...


def _expand(t: np.ndarray, ndim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """Exact affine interpolant (1-t) x0 + t x1."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    tt = _expand(t, x0.ndim)
    if np.any(tt < 0.0) or np.any(tt > 1.0):
        raise ValueError("t must lie in [0, 1]")
    return (1.0 - tt) * x0 + tt * x1


@dataclass
class FlowSample:
    """One (noise, data) pair with its interpolant; v = x1 - x0 for every t."""

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v: np.ndarray


@dataclass
class TimeSampler:
    """Training-time law for t: uniform, logit-normal, mode, cosmap, or beta."""

    kind: str = "beta"
    alpha: float = 2.0
    beta: float = 1.2
    loc: float = 0.0        # logit-normal mean
    scale: float = 1.0      # logit-normal std
    mode_scale: float = 1.29

    KINDS = ("uniform", "logit-normal", "mode", "cosmap", "beta")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown time sampler {self.kind!r}")
        if self.kind == "beta" and (self.alpha <= 0 or self.beta <= 0):
            raise ValueError("beta law needs alpha, beta > 0")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "uniform":
            t = rng.random(size)
        elif self.kind == "beta":
            # gamma-ratio construction, deterministic given the generator
            g1 = rng.standard_gamma(self.alpha, size)
            g2 = rng.standard_gamma(self.beta, size)
            t = g1 / (g1 + g2)
        elif self.kind == "logit-normal":
            z = rng.normal(self.loc, self.scale, size)
            t = 1.0 / (1.0 + np.exp(-z))
        elif self.kind == "mode":
            u = rng.random(size)
            s = self.mode_scale
            t = 1.0 - u - s * (np.cos(np.pi * u / 2.0) ** 2 - 1.0 + u)
        else:  # cosmap
            u = rng.random(size)
            t = 1.0 - 1.0 / (np.tan(np.pi * u / 2.0) + 1.0)
        return np.clip(t, 1e-6, 1.0 - 1e-6)

    def pdf(self, t: np.ndarray) -> np.ndarray:
        """Density on (0,1); implemented for the uniform and beta laws."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "uniform":
            return np.ones_like(t)
        if self.kind == "beta":
            log_b = math.lgamma(self.alpha) + math.lgamma(self.beta) - math.lgamma(self.alpha + self.beta)
            return np.exp((self.alpha - 1) * np.log(t) + (self.beta - 1) * np.log1p(-t) - log_b)
        raise NotImplementedError(f"pdf not defined for {self.kind!r}")


@dataclass
class ShortcutBatchPlan:
    """How a training batch splits between flow matching and self-consistency."""

    consistency_fraction: float = 0.25
    max_step_pow: int = 7
    flow_matching: bool = True

    def __post_init__(self):
        if not 0.0 <= self.consistency_fraction <= 1.0:
            raise ValueError("consistency fraction must lie in [0, 1]")
        if self.max_step_pow < 1:
            raise ValueError("need at least step sizes {1/2, 1}")

    @property
    def step_sizes(self) -> np.ndarray:
        return 2.0 ** (-np.arange(self.max_step_pow, -1, -1, dtype=np.float64))

    def sample_consistency_steps(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Step sizes for consistency targets; 2d must stay a valid step <= 1."""
        pows = rng.integers(1, self.max_step_pow + 1, size=size)
        return 2.0 ** (-pows.astype(np.float64))


def draw_flow_samples(x1: np.ndarray, sampler: TimeSampler, rng: np.random.Generator,
                      t: np.ndarray | None = None) -> FlowSample:
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = rng.standard_normal(x1.shape)
    if t is None:
        t = sampler.sample(rng, x1.shape[0])
    return FlowSample(x0=x0, x1=x1, t=t, x_t=interpolate(x0, x1, t), v=x1 - x0)


def flow_loss(model: FieldModel, batch: FlowSample, cond: Any = None,
              keep_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared velocity regression at d = 0."""
    d = np.zeros(batch.t.shape[0] if batch.t.ndim else 1)
    pred = model.field(batch.x_t, batch.t, d, cond, keep_mask)
    err = pred - Tensor(batch.v.astype(np.float32) if pred.dtype == np.float32 else batch.v)
    return (err * err).mean()


def shortcut_consistency_loss(model: FieldModel, batch: FlowSample, plan: ShortcutBatchPlan,
                              d: np.ndarray, cond: Any = None,
                              keep_mask: np.ndarray | None = None,
                              teacher: FieldModel | None = None) -> Tensor:
    """Self-consistency: the 2d-step prediction regresses the average of two
    gradient-stopped d-step predictions (teacher evaluations use the live
    model unless an EMA teacher is supplied; no gradient flows through the
    target)."""
    teacher = teacher if teacher is not None else model
    d = np.asarray(d, dtype=np.float64)
    t = np.asarray(batch.t, dtype=np.float64)
    if np.any(t + 2.0 * d > 1.0 + 1e-12):
        raise ValueError("consistency targets need t + 2d <= 1")
    f1 = teacher.field(batch.x_t, t, d, cond, keep_mask).data
    x_mid = batch.x_t + _expand(d, batch.x_t.ndim) * f1
    f2 = teacher.field(x_mid, t + d, d, cond, keep_mask).data
    target = 0.5 * (f1 + f2)
    pred = model.field(batch.x_t, t, 2.0 * d, cond, keep_mask)
    err = pred - Tensor(target.astype(pred.dtype, copy=False))
    return (err * err).mean()


def train_step(model: FieldModel, x1: np.ndarray, cond: Any, plan: ShortcutBatchPlan,
               sampler: TimeSampler, optimizer, rng: np.random.Generator,
               guidance_dropout: float = 0.0, teacher: FieldModel | None = None,
               cond_slice=lambda c, sl: None if c is None else tuple(a[sl] for a in c)) -> dict:
    """One optimizer step on flow + consistency losses over a latent batch.

    A fraction ``1 - k`` of the batch trains the d = 0 flow-matching loss, the
    rest the shortcut consistency loss; the two losses are summed into one
    update. Condition-dropout masks are drawn once per sub-batch so teacher
    and student see the same conditions.
    """
    b = x1.shape[0]
    n_cons = int(round(plan.consistency_fraction * b))
    if not plan.flow_matching:
        n_cons = b
    n_flow = b - n_cons
    losses = {"flow_loss": 0.0, "consistency_loss": 0.0}
    total: Tensor | None = None

    if n_flow > 0:
        sl = slice(0, n_flow)
        keep = (rng.random(n_flow) >= guidance_dropout).astype(np.float64)
        batch = draw_flow_samples(x1[sl], sampler, rng)
        part = flow_loss(model, batch, cond_slice(cond, sl), keep)
        losses["flow_loss"] = float(part.data)
        total = part
    if n_cons > 0:
        sl = slice(n_flow, b)
        keep = (rng.random(n_cons) >= guidance_dropout).astype(np.float64)
        d = plan.sample_consistency_steps(rng, n_cons)
        t_raw = sampler.sample(rng, n_cons)
        t = t_raw * (1.0 - 2.0 * d)  # keep t + 2d inside [0, 1]
        batch = draw_flow_samples(x1[sl], sampler, rng, t=t)
        part = shortcut_consistency_loss(model, batch, plan, d, cond_slice(cond, sl), keep, teacher)
        losses["consistency_loss"] = float(part.data)
        total = part if total is None else total + part

    if total is None:
        raise ValueError("empty training batch")
    if not np.isfinite(total.data):
        raise FloatingPointError("training loss became non-finite")
    optimizer.zero_grad()
    nm.backward(total)
    optimizer.step()
    return losses


@dataclass
class LossProfile:
    """Per-timestep regression losses binned over [0, 1]."""

    edges: np.ndarray
    samples: list = field(default_factory=list)  # (t, per-sample loss) pairs

    @property
    def counts(self) -> np.ndarray:
        t = np.array([s[0] for s in self.samples])
        return np.histogram(t, bins=self.edges)[0]

    @property
    def bin_means(self) -> np.ndarray:
        t = np.array([s[0] for s in self.samples])
        loss = np.array([s[1] for s in self.samples])
        idx = np.clip(np.digitize(t, self.edges) - 1, 0, len(self.edges) - 2)
        means = np.full(len(self.edges) - 1, np.nan)
        for b in range(len(self.edges) - 1):
            sel = idx == b
            if sel.any():
                means[b] = loss[sel].mean()
        return means

    def band_mean(self, lo: float, hi: float) -> float:
        vals = [loss for t, loss in self.samples if lo <= t < hi]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return {
            "edges": self.edges.tolist(),
            "bin_means": [None if np.isnan(v) else v for v in self.bin_means],
            "counts": self.counts.tolist(),
        }


def profile_loss_over_t(model: FieldModel, x1: np.ndarray, cond: Any = None,
                        bins: int = 20, rng: np.random.Generator | None = None,
                        batch_size: int = 16,
                        cond_slice=lambda c, sl: None if c is None else tuple(a[sl] for a in c)) -> LossProfile:
    """Evaluate the d = 0 regression loss with uniform t, binned over [0, 1]."""
    rng = rng or np.random.default_rng(0)
    profile = LossProfile(edges=np.linspace(0.0, 1.0, bins + 1))
    uniform = TimeSampler(kind="uniform")
    for start in range(0, x1.shape[0], batch_size):
        sl = slice(start, min(start + batch_size, x1.shape[0]))
        batch = draw_flow_samples(x1[sl], uniform, rng)
        pred = model.field(batch.x_t, batch.t, np.zeros(batch.t.shape[0]), cond_slice(cond, sl))
        err = pred.data.astype(np.float64) - batch.v
        per_sample = (err * err).reshape(err.shape[0], -1).mean(axis=1)
        profile.samples.extend(zip(batch.t.tolist(), per_sample.tolist()))
    return profile
