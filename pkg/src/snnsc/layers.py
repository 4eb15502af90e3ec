"""Minimal layer engine with hand-written backward rules.

Every layer keeps a LIFO stack of forward caches, so one instance can be
called several times per forward pass (once per time step) and unwound in
reverse order by ``backward``. Caching is skipped inside ``no_grad()``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Disable forward caching for the current thread."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Parameter:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)
        self.requires_grad = True

    def __repr__(self) -> str:
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


class Module:
    """Base class: discovers parameters, buffers and children from attributes."""

    training = True
    _buffers: tuple[str, ...] = ()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def clear_cache(self) -> None:
        for m in self.modules():
            if hasattr(m, "_cache"):
                m._cache.clear()

    def astype(self, dtype) -> "Module":
        for m in self.modules():
            for value in vars(m).values():
                if isinstance(value, Parameter):
                    value.data = value.data.astype(dtype)
                    value.grad = np.zeros_like(value.data)
            for name in m._buffers:
                setattr(m, name, getattr(m, name).astype(dtype))
            m.dtype = np.dtype(dtype)
        return self


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """2-D cross-correlation over (N, C, H, W) via im2col."""

    input_grad = True  # set False when nothing upstream consumes the gradient

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 1, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.k, self.stride, self.padding = kernel_size, stride, padding
        self.dtype = np.dtype(dtype)
        fan_in = in_ch * kernel_size * kernel_size
        self.weight = Parameter(he_uniform(rng, (out_ch, in_ch, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self._cache: list = []

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        return ho, wo

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"conv expects (N, {self.in_ch}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        ho, wo = self.output_hw(h, w)
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for kernel {self.k}")
        p, s, k = self.padding, self.stride, self.k
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        # column layout (ky, kx, c) keeps channels innermost for the col2im adds
        cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(n * ho * wo, -1)
        wmat = self.weight.data.transpose(0, 2, 3, 1).reshape(self.out_ch, -1)
        out = cols @ wmat.T
        out += self.bias.data
        if grad_enabled():
            self._cache.append((cols, x.shape))
        return out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, grad: np.ndarray) -> np.ndarray | None:
        cols, xshape = self._cache.pop()
        n, c, h, w = xshape
        _, o, ho, wo = grad.shape
        g = grad.transpose(0, 2, 3, 1).reshape(-1, o)
        k = self.k
        if self.weight.requires_grad:
            self.weight.grad += (g.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
            self.bias.grad += g.sum(axis=0)
        if not self.input_grad:
            return None
        wmat = self.weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
        dcols = (g @ wmat).reshape(n, ho, wo, k, k, c)
        p, s = self.padding, self.stride
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, p:p + h, p:p + w, :] if p else dxp
        return dx.transpose(0, 3, 1, 2)


class BatchNorm2d(Module):
    """Per-channel batch normalization; running variance kept unbiased."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.dtype = np.dtype(dtype)
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache: list = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"batchnorm expects (N, {self.channels}, H, W), got {x.shape}")
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("batchnorm in train mode needs a batch of at least 2")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(self.dtype)
            self.running_var = ((1 - mom) * self.running_var + mom * var * m / (m - 1)).astype(self.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        if grad_enabled():
            self._cache.append((xhat, inv_std, self.training))
        return self.gamma.data[None, :, None, None] * xhat + self.beta.data[None, :, None, None]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        xhat, inv_std, batch_stats = self._cache.pop()
        if self.gamma.requires_grad:
            self.gamma.grad += (grad * xhat).sum(axis=(0, 2, 3))
            self.beta.grad += grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.gamma.data[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if not batch_stats:
            return dxhat * scale
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return scale * (dxhat - s1 / m - xhat * s2 / m)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = np.dtype(dtype)
        self.weight = Parameter(he_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))
        self._cache: list = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        if grad_enabled():
            self._cache.append(x)
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._cache.pop()
        if self.weight.requires_grad:
            self.weight.grad += grad.T @ x
            self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.data


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


class Sigmoid(Module):
    def __init__(self):
        self._cache: list = []

    def forward(self, x):
        y = sigmoid(x)
        if grad_enabled():
            self._cache.append(y)
        return y

    def backward(self, grad):
        y = self._cache.pop()
        return grad * y * (1 - y)


class ReLU(Module):
    def __init__(self):
        self._cache: list = []

    def forward(self, x):
        if grad_enabled():
            self._cache.append(x > 0)
        return np.maximum(x, 0)

    def backward(self, grad):
        return grad * self._cache.pop()


class AvgPool2d(Module):
    """Non-overlapping average pooling with a square window."""

    def __init__(self, size: int = 2):
        self.size = size
        self._cache: list = []

    def forward(self, x):
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ValueError(f"spatial dims {h}x{w} not divisible by pool size {s}")
        if grad_enabled():
            self._cache.append(x.shape)
        return x.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5))

    def backward(self, grad):
        self._cache.pop()
        s = self.size
        return np.repeat(np.repeat(grad, s, axis=2), s, axis=3) / (s * s)


class GlobalAvgPool(Module):
    """(N, C, H, W) -> (N, C)."""

    def __init__(self):
        self._cache: list = []

    def forward(self, x):
        if grad_enabled():
            self._cache.append(x.shape)
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._cache.pop()
        return np.broadcast_to(grad[:, :, None, None] / (h * w), (n, c, h, w)).copy()


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)
