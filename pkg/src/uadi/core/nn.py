"""Parameter containers and the standard layers used by the network."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor


def Parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Base class with recursive parameter/buffer discovery.

    Attributes holding a requires_grad :class:`Tensor`, a ``Module`` or a list
    of modules are traversed in insertion order; numpy arrays registered via
    :meth:`register_buffer` are saved with checkpoints but never optimized.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self) -> Iterator[tuple]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, val in self._buffers.items():
            yield prefix + name, val
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

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

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if p.data.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]
        for name, b in bufs.items():
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        super().__init__()
        w = np.zeros((n_in, n_out)) if zero else glorot_uniform(rng, (n_in, n_out), n_in, n_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x):
        return ops.dense(x, self.weight, self.bias)


class Conv2d(Module):
    """Stride-1 "same" convolution."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, dilation: int = 1):
        super().__init__()
        self.dilation = dilation
        self.weight = Parameter(he_normal(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        if self.weight.shape[0] == 1:
            return ops.conv1x1(x, self.weight, self.bias)
        return ops.conv2d(x, self.weight, self.bias, dilation=self.dilation)


class SeparableConv2d(Module):
    """Depthwise kxk conv with dilation, then pointwise 1x1."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, dilation: int = 1):
        super().__init__()
        self.dilation = dilation
        self.depthwise = Parameter(he_normal(rng, (kernel, kernel, c_in), kernel * kernel))
        self.depthwise_bias = Parameter(np.zeros(c_in))
        self.pointwise = Parameter(he_normal(rng, (c_in, c_out), c_in))
        self.pointwise_bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        h = ops.depthwise_conv2d(x, self.depthwise, self.depthwise_bias, dilation=self.dilation)
        return ops.conv1x1(h, self.pointwise, self.pointwise_bias)


class ConvTranspose2d(Module):
    """2x upsampling transposed conv (kernel 2, stride 2)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (2, 2, c_in, c_out), c_in))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return ops.batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng)
        self.bn = BatchNorm(c_out)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class Dropout(Module):
    def __init__(self, rate: float, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x):
        return ops.dropout(x, self.rate, self.rng, self.training)
