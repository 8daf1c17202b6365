"""Module container, dense layer, batch normalisation and dropout shared by both heads."""

from __future__ import annotations

import math

import numpy as np

from . import diffengine as de
from .diffengine import DiffArray


class Module:
    """Minimal parameter container.

    Parameters are the ``DiffArray`` attributes with ``requires_grad``;
    buffers are numpy arrays named in ``_buffer_names``. Both are discovered
    in attribute order, recursing into sub-modules and lists of sub-modules.
    """

    training: bool = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, DiffArray]:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, DiffArray) and value.requires_grad:
                out[prefix + name] = value
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[DiffArray]:
        return list(self.named_parameters().values())

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + name: getattr(self, name) for name in self._buffer_names}
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data[...] = state[k]
        for k, b in buffers.items():
            if b.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {b.shape}")
            b[...] = state[k]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> DiffArray:
    bound = math.sqrt(6.0 / max(fan_in, 1))
    return DiffArray(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = uniform_init(rng, (in_features, out_features), in_features)
        self.bias = DiffArray(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: DiffArray) -> DiffArray:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"Linear expects {self.in_features} inputs, got {x.shape[-1]}")
        y = de.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class BatchNorm(Module):
    """Per-channel normalisation over every axis but the last.

    For node features (nodes x C) the statistics run over all nodes of all
    graphs in the batch; for volumes (B, H, W, T, C) over batch and positions.
    Training mode uses population statistics of the batch and updates the
    running estimates; eval mode uses the running estimates.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = DiffArray(np.ones(channels), requires_grad=True)
        self.beta = DiffArray(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: DiffArray) -> DiffArray:
        if x.shape[-1] != self.channels:
            raise ValueError(f"BatchNorm expects {self.channels} channels, got {x.shape[-1]}")
        axes = tuple(range(x.ndim - 1))
        if self.training:
            if x.size == 0:
                raise ValueError("batch normalisation over zero elements")
            mean = de.reduce_mean(x, axis=axes, keepdims=True)
            var = de.reduce_var(x, axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean.data.reshape(-1)
            self.running_var[...] = (1 - m) * self.running_var + m * var.data.reshape(-1)
            xhat = (x - mean) * de.power(var + self.eps, -0.5)
        else:
            xhat = (x - self.running_mean) * (1.0 / np.sqrt(self.running_var + self.eps))
        return xhat * self.gamma + self.beta


GraphBatchNorm = BatchNorm


def graph_batchnorm(features: DiffArray, bn: BatchNorm) -> DiffArray:
    return bn(features)


def dropout(x: DiffArray, p: float, rng: np.random.Generator, training: bool) -> DiffArray:
    """Inverted dropout; identity outside training."""
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep
