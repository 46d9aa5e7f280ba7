"""Parameter containers on top of :mod:`mmsa.tensor`."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_param(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Module:
    """Walks attributes in definition order to enumerate parameters.

    Tensors with ``requires_grad`` are parameters; other tensor attributes
    are buffers (running statistics) that are saved but never optimised.
    """

    training: bool = False

    def _walk(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val._walk(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._walk(prefix) if t.requires_grad)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._walk(prefix) if not t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            items = val if isinstance(val, (list, tuple)) else [val]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters then buffers, each in definition order."""
        return OrderedDict([(k, t.data) for k, t in self.named_parameters()]
                           + [(k, t.data) for k, t in self.named_buffers()])

    def load_state_dict(self, state: dict) -> None:
        own = OrderedDict(list(self.named_parameters()) + list(self.named_buffers()))
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise KeyError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {p.shape}")
        for k, p in own.items():
            p.data = np.array(state[k], dtype=np.float64)


def zero_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int):
        self.weight = uniform_param(rng, (fan_in, fan_out), fan_in)
        self.bias = zero_param((fan_out,))

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 1:
            return T.reshape(T.reshape(x, (1, -1)) @ self.weight, (-1,)) + self.bias
        return x @ self.weight + self.bias


class MLP(Module):
    """Linear -> ReLU -> Linear."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class LayerNorm(Module):
    """Per-row standardisation over the last axis with learnable gain and shift."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = zero_param((dim,))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return standardize_rows(x, self.eps) * self.gain + self.shift


class BatchNorm(Module):
    """Per-feature standardisation across the batch with learnable gain and shift.

    Training mode uses batch statistics and updates the running estimates;
    eval mode (and any single-row batch) uses the running estimates.  The
    running estimates are plain averages until ``1 / momentum`` batches have
    been seen, so a short run does not leave them at their initial values.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = zero_param((dim,))
        self.running_mean = Tensor(np.zeros(dim))
        self.running_var = Tensor(np.ones(dim))
        self.batches_seen = Tensor(np.zeros(()))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        n = x.shape[0]
        if self.training and n > 1:
            mu = T.mean(x, axis=0, keepdims=True)
            centred = x - mu
            var = T.mean(centred * centred, axis=0, keepdims=True)
            m = max(self.momentum, 1.0 / (self.batches_seen.data + 1.0))
            self.batches_seen.data = self.batches_seen.data + 1.0
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mu.data[0]
            self.running_var.data = (1 - m) * self.running_var.data + m * var.data[0] * n / (n - 1)
            out = centred / T.sqrt(var + self.eps)
        else:
            out = (x - self.running_mean.data) / np.sqrt(self.running_var.data + self.eps)
        return out * self.gain + self.shift


def standardize_rows(x, eps: float = 1e-5) -> Tensor:
    """Zero mean, unit variance per row; no learnable parameters."""
    x = T.as_tensor(x)
    centred = x - T.mean(x, axis=-1, keepdims=True)
    var = T.mean(centred * centred, axis=-1, keepdims=True)
    return centred / T.sqrt(var + eps)


def standardize_columns(x, eps: float = 1e-5) -> Tensor:
    """Zero mean, unit variance per column across the batch; no learnable parameters."""
    x = T.as_tensor(x)
    centred = x - T.mean(x, axis=0, keepdims=True)
    var = T.mean(centred * centred, axis=0, keepdims=True)
    return centred / T.sqrt(var + eps)
