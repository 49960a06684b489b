"""Parameter containers built on the autodiff tape: modules, layers, init."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, conv1d, gather_rows, gelu, layer_norm, linear

__all__ = ["Module", "Linear", "Conv1d", "LayerNorm", "Embedding", "param", "zeros_param"]


def param(rng: np.random.Generator, shape, std: float | None = None, dtype=np.float32) -> Tensor:
    """Gaussian-initialized parameter; std defaults to 1/sqrt(fan_in)."""
    if std is None:
        fan_in = shape[0] if len(shape) == 1 else int(np.prod(shape[:-1]))
        std = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Module:
    """Tracks parameters and submodules through attribute assignment."""

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_modules", {})[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            self.__dict__.setdefault("_modules", {})[name] = _ModuleList(value)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.__dict__.get("_params", {}).items():
            yield prefix + name, p
        for name, mod in self.__dict__.get("_modules", {}).items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def cast(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class _ModuleList(Module):
    def __init__(self, mods):
        for i, m in enumerate(mods):
            setattr(self, str(i), m)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, zero_init: bool = False, dtype=np.float32):
        if zero_init:
            self.weight = zeros_param((d_in, d_out), dtype)
        else:
            self.weight = param(rng, (d_in, d_out), dtype=dtype)
        self.bias = zeros_param((d_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, rng, c_in: int, c_out: int, width: int = 3, stride: int = 1,
                 zero_init: bool = False, dtype=np.float32):
        self.stride = stride
        if zero_init:
            self.kernels = zeros_param((width, c_in, c_out), dtype)
        else:
            self.kernels = param(rng, (width, c_in, c_out), dtype=dtype)
        self.bias = zeros_param((c_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.kernels, self.bias, stride=self.stride)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = zeros_param((d,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, rng, vocab: int, d: int, dtype=np.float32):
        self.table = param(rng, (vocab, d), std=0.02, dtype=dtype)

    def __call__(self, idx) -> Tensor:
        return gather_rows(self.table, idx)


class FeedForward(Module):
    """Two-layer GELU MLP; the output projection starts at zero so freshly
    built residual blocks are exact identities."""

    def __init__(self, rng, d_model: int, d_hidden: int, dtype=np.float32):
        self.up = Linear(rng, d_model, d_hidden, dtype=dtype)
        self.down = Linear(rng, d_hidden, d_model, zero_init=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))
