"""Minimal layer system on top of the autodiff tensors.

A ``Module`` discovers parameters and buffers by walking its attributes:
any ``Tensor`` attribute is collected (parameters require grad, buffers do
not), and child modules, including those inside plain lists, are walked
recursively with dotted names. Names are stable across runs because they
follow construction order.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, StateError
from .kernels import (
    conv3d,
    conv_transpose3d,
    depthwise_conv3d,
    gelu,
    linear,
    norm_affine,
    prelu,
)
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float64) -> np.ndarray:
    vals = rng.normal(0.0, std, size=shape)
    return np.clip(vals, -2.0 * std, 2.0 * std).astype(dtype)


def he_normal(rng: np.random.Generator, shape, fan_in, dtype=np.float64) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class Module:
    def __init__(self):
        self._training = True

    # -- traversal ---------------------------------------------------------

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_tensors(self, prefix=""):
        """All (name, tensor) pairs: parameters and buffers."""
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + name, val
        for cname, child in self._children():
            yield from child.named_tensors(prefix + cname + ".")

    def named_params(self, prefix=""):
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def params(self):
        return [t for _, t in self.named_params()]

    def num_params(self) -> int:
        return sum(t.size for t in self.params())

    def state_arrays(self) -> dict:
        """Name -> array snapshot of every parameter and buffer."""
        return {name: t.data for name, t in self.named_tensors()}

    # -- mode --------------------------------------------------------------

    def train(self, mode: bool = True):
        for m in self.modules():
            m._training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def training(self) -> bool:
        return self._training

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True, std=0.02, dtype=np.float64):
        super().__init__()
        self.weight = Tensor(trunc_normal(rng, (dout, din), std, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, dtype=np.float64):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(he_normal(rng, (cout, cin, k, k, k), cin * k**3, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    """Transposed conv with kernel == stride (pure block upsampling)."""

    def __init__(self, cin, cout, k, rng, dtype=np.float64):
        super().__init__()
        self.k = k
        self.weight = Tensor(he_normal(rng, (cin, cout, k, k, k), cin * k**3, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return conv_transpose3d(x, self.weight, self.bias, self.k)


class DepthwiseConv3d(Module):
    def __init__(self, channels, k, rng, padding=None, dtype=np.float64):
        super().__init__()
        self.padding = (k - 1) // 2 if padding is None else padding
        self.weight = Tensor(he_normal(rng, (channels, k, k, k), k**3, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return depthwise_conv3d(x, self.weight, self.bias, 1, self.padding)


class LayerNorm(Module):
    """Normalizes over the trailing (channel) axis of token layouts."""

    def __init__(self, dim, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return norm_affine(x, self.gamma, self.beta, (-1,), self.eps)


class InstanceNorm3d(Module):
    """Normalizes over (D, H, W) per sample and channel; no running stats."""

    def __init__(self, channels, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x):
        c = self.channels
        g = self.gamma.reshape(c, 1, 1, 1)
        b = self.beta.reshape(c, 1, 1, 1)
        return norm_affine(x, g, b, (2, 3, 4), self.eps)


class BatchNorm3d(Module):
    """Normalizes over (N, D, H, W) per channel with running statistics.

    Training mode uses batch statistics and updates the running buffers
    (momentum 0.1, unbiased variance, matching the common convention).
    Eval mode applies the running statistics and refuses to run before any
    update or explicit population.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.num_batches = Tensor(np.zeros((), dtype=dtype))

    def set_running_stats(self, mean, var):
        """Explicitly populate eval-mode statistics."""
        self.running_mean.data = np.broadcast_to(np.asarray(mean, dtype=self.running_mean.dtype), (self.channels,)).copy()
        self.running_var.data = np.broadcast_to(np.asarray(var, dtype=self.running_var.dtype), (self.channels,)).copy()
        self.num_batches.data = np.ones((), dtype=self.num_batches.dtype)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"batch norm over {self.channels} channels got input {x.shape}")
        c = self.channels
        if self._training:
            xd = x.data
            n = xd.size // c
            mean = xd.mean(axis=(0, 2, 3, 4))
            var = xd.var(axis=(0, 2, 3, 4))
            m = self.momentum
            unbiased = var * (n / (n - 1)) if n > 1 else var
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mean
            self.running_var.data = (1 - m) * self.running_var.data + m * unbiased
            self.num_batches.data = self.num_batches.data + 1
            g = self.gamma.reshape(c, 1, 1, 1)
            b = self.beta.reshape(c, 1, 1, 1)
            return norm_affine(x, g, b, (0, 2, 3, 4), self.eps)
        if float(self.num_batches.data) == 0.0:
            raise StateError("eval-mode batch norm before running statistics were populated")
        scale = 1.0 / np.sqrt(self.running_var.data + self.eps)
        shift = Tensor((-self.running_mean.data * scale).reshape(1, c, 1, 1, 1).astype(x.dtype))
        scale = Tensor(scale.reshape(1, c, 1, 1, 1).astype(x.dtype))
        g = self.gamma.reshape(c, 1, 1, 1)
        b = self.beta.reshape(c, 1, 1, 1)
        return (x * scale + shift) * g + b


class PReLU(Module):
    def __init__(self, channels, init=0.25, dtype=np.float64):
        super().__init__()
        self.slope = Tensor(np.full(channels, init, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return prelu(x, self.slope)


class GELU(Module):
    def forward(self, x):
        return gelu(x)
