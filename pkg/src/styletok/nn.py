"""Neural layers built on the tensor core.

Layers hold :class:`Parameter` objects; :class:`Module` walks attributes in
construction order, so parameter naming and traversal are deterministic for
a given model class. Recurrent cells use the standard gate formulations:
GRU applies the reset gate to the previous state before the candidate
matmul, the LSTM has forget/input/output gates with tanh candidate and tanh
cell output.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (Parameter, Tensor, add, conv2d_nhwc, div, embedding,
                     gru_step, lstm_step, matmul, mul, sqrt, sub, tmean)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Minimal container: anything holding Parameters and sub-Modules."""

    def named_parameters(self, prefix: str = ""):
        """Yield ``(path, Parameter)`` pairs in deterministic order.

        As a side effect each parameter's ``name`` is set to its path.
        """
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{path}.{i}"
                        yield item.name, item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for _, p in self.named_parameters() if p.trainable]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        self.weight = Parameter(glorot(rng, (d_in, d_out), d_in, d_out, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y


class Embedding(Module):
    def __init__(self, n_rows: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.table = Parameter((rng.standard_normal((n_rows, dim)) * 0.1).astype(dtype))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding(self.table, ids)


class Conv2dSame(Module):
    """3x3 (or kxk) channels-last convolution with 'same' padding."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 kernel: int = 3, stride=(2, 2), bias: bool = True, dtype=np.float32):
        fan_in = c_in * kernel * kernel
        fan_out = c_out * kernel * kernel
        self.kernel = Parameter(glorot(rng, (kernel, kernel, c_in, c_out), fan_in, fan_out, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_nhwc(x, self.kernel, self.bias, self.stride)


class BatchNorm(Module):
    """Per-channel normalization over all axes but the last.

    Train mode normalizes with batch statistics and folds them into running
    statistics with momentum 0.99; eval mode uses the running statistics and
    raises if none were ever recorded.
    """

    EPS = 1e-5
    MOMENTUM = 0.99

    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = Parameter(np.zeros(channels, dtype=dtype), trainable=False)
        self.running_var = Parameter(np.ones(channels, dtype=dtype), trainable=False)
        self.steps = Parameter(np.zeros((), dtype=dtype), trainable=False)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        axes = tuple(range(x.ndim - 1))
        if mode == "train":
            if x.size // x.data.shape[-1] < 2:
                raise ShapeError("batch norm needs >= 2 elements per channel in train mode")
            mu = tmean(x, axis=axes)
            centered = sub(x, mu)
            var = tmean(mul(centered, centered), axis=axes)
            m = self.MOMENTUM
            self.running_mean.data = m * self.running_mean.data + (1 - m) * mu.data
            self.running_var.data = m * self.running_var.data + (1 - m) * var.data
            self.steps.data = self.steps.data + 1
        elif mode == "eval":
            if self.steps.data == 0:
                raise ConfigError("uninitialized running stats: batch norm never saw a train step")
            mu = Tensor(self.running_mean.data)
            var = Tensor(self.running_var.data)
            centered = sub(x, mu)
        else:
            raise ValueError(f"unknown batch norm mode {mode!r}")
        inv = div(1.0, sqrt(add(var, self.EPS)))
        return add(mul(mul(centered, inv), self.gamma), self.beta)


class GRUCell(Module):
    """Update/reset-gate GRU; reset applied to the state before the candidate."""

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator, dtype=np.float32):
        self.d_h = d_h
        self.w_zr = Parameter(glorot(rng, (d_in, 2 * d_h), d_in, d_h, dtype))
        self.u_zr = Parameter(glorot(rng, (d_h, 2 * d_h), d_h, d_h, dtype))
        self.b_zr = Parameter(np.zeros(2 * d_h, dtype=dtype))
        self.w_n = Parameter(glorot(rng, (d_in, d_h), d_in, d_h, dtype))
        self.u_n = Parameter(glorot(rng, (d_h, d_h), d_h, d_h, dtype))
        self.b_n = Parameter(np.zeros(d_h, dtype=dtype))

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_step(x, h, self.w_zr, self.u_zr, self.b_zr,
                        self.w_n, self.u_n, self.b_n)

    def initial_state(self, batch: int, dtype=np.float32) -> Tensor:
        return Tensor(np.zeros((batch, self.d_h), dtype=dtype))


class LSTMCell(Module):
    """Forget/input/output-gate LSTM with tanh candidate and tanh cell output."""

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator,
                 forget_bias: float = 1.0, dtype=np.float32):
        self.d_h = d_h
        self.w = Parameter(glorot(rng, (d_in, 4 * d_h), d_in, d_h, dtype))
        self.u = Parameter(glorot(rng, (d_h, 4 * d_h), d_h, d_h, dtype))
        b = np.zeros(4 * d_h, dtype=dtype)
        b[d_h:2 * d_h] = forget_bias
        self.b = Parameter(b)

    def step(self, x: Tensor, state) -> tuple:
        h, c = state
        return lstm_step(x, h, c, self.w, self.u, self.b)

    def initial_state(self, batch: int, dtype=np.float32):
        z = np.zeros((batch, self.d_h), dtype=dtype)
        return Tensor(z), Tensor(z.copy())
