"""Spiking encoder / reconstructor / converter for feature transmission.

Per time step the encoder turns the real feature ``F`` (fed unchanged at
every step) into a binary map ``z_t``; after the channel the reconstructor
turns ``z_hat_t`` back into a spike map ``S_t`` and a membrane map ``M_t``
of the original feature shape. After ``T`` steps the converter fuses the
``2T`` maps elementwise with one shared affine map and a sigmoid.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .layers import BatchNorm2d, Conv2d, Module, Parameter, Sequential, grad_enabled, he_uniform, sigmoid
from .neurons import IFNode, IHFNode, SurrogateConfig, reset_nodes, set_surrogate


class Readout(enum.Enum):
    """Which neuron closes the reconstructor and what the converter sees."""

    IHF = "ihf"      # spikes and post-reset membrane
    IF = "if"        # spikes only
    IHF_M = "ihf_m"  # post-reset membrane only


@dataclass(frozen=True)
class Geometry:
    c: int
    h: int
    w: int
    c1: int | None = None
    c2: int | None = None

    def __post_init__(self):
        if self.c1 is None:
            object.__setattr__(self, "c1", max(1, self.c // 8))
        if self.c2 is None:
            object.__setattr__(self, "c2", max(1, self.c // 64))
        sizes = (self.c * self.h * self.w, self.c1 * self.h * self.w, self.c2 * self.h * self.w)
        if not sizes[0] > sizes[1] > sizes[2]:
            raise ValueError(f"channel plan {self.c}->{self.c1}->{self.c2} does not compress")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return (self.c, self.h, self.w)

    @property
    def code_shape(self) -> tuple[int, int, int]:
        return (self.c2, self.h, self.w)

    @property
    def bits_per_step(self) -> int:
        return self.c2 * self.h * self.w


class Converter(Module):
    """Shared elementwise affine map over ``n_in`` planes followed by a sigmoid."""

    def __init__(self, n_in: int, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in = n_in
        self.dtype = np.dtype(dtype)
        self.weight = Parameter(he_uniform(rng, (n_in,), n_in, dtype))
        self.bias = Parameter(np.zeros(1, dtype=dtype))
        self._cache: list = []

    def forward(self, planes: Sequence[np.ndarray]) -> np.ndarray:
        if len(planes) != self.n_in:
            raise ValueError(f"converter expects {self.n_in} planes, got {len(planes)}")
        x = np.stack(planes, axis=-1)
        y = sigmoid(x @ self.weight.data + self.bias.data[0])
        if grad_enabled():
            self._cache.append((x, y))
        return y

    def backward(self, grad: np.ndarray) -> list[np.ndarray]:
        x, y = self._cache.pop()
        dz = grad * y * (1 - y)
        if self.weight.requires_grad:
            self.weight.grad += np.tensordot(dz, x, axes=dz.ndim)
            self.bias.grad += dz.sum()
        dx = dz[..., None] * self.weight.data
        return [dx[..., i] for i in range(self.n_in)]


def _conv_bn(cin, cout, rng, dtype):
    return [Conv2d(cin, cout, 3, 1, 1, rng=rng, dtype=dtype), BatchNorm2d(cout, dtype=dtype)]


class SnnSc(Module):
    """Spiking semantic-communication model.

    ``forward`` runs all ``T`` steps; the single-step methods ``encode``,
    ``reconstruct`` and ``convert`` expose the same computation piecewise
    (the transport layer drives them one frame at a time).
    """

    def __init__(self, geometry: Geometry, time_steps: int = 4, readout: Readout | str = Readout.IHF,
                 seed: int = 0, dtype=np.float32, surrogate: SurrogateConfig | None = None):
        if time_steps < 1:
            raise ValueError("time_steps must be positive")
        self.geometry = geometry
        self.time_steps = time_steps
        self.readout = Readout(readout)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        g = geometry
        self.encoder = Sequential(*_conv_bn(g.c, g.c1, rng, dtype), IFNode(),
                                  *_conv_bn(g.c1, g.c2, rng, dtype), IFNode())
        self.reconstructor = Sequential(*_conv_bn(g.c2, g.c1, rng, dtype), IFNode(),
                                        *_conv_bn(g.c1, g.c, rng, dtype))
        self.readout_node = IFNode() if self.readout is Readout.IF else IHFNode()
        n_in = 2 * time_steps if self.readout is Readout.IHF else time_steps
        self.converter = Converter(n_in, rng=rng, dtype=dtype)
        if surrogate is not None:
            set_surrogate(self, surrogate)
        self._steps_seen = 0

    # -- single-step surface ------------------------------------------------

    def reset(self) -> None:
        reset_nodes(self)
        self._steps_seen = 0

    def encode(self, feature: np.ndarray) -> np.ndarray:
        if feature.shape[1:] != self.geometry.feature_shape:
            raise ValueError(f"feature shape {feature.shape[1:]} != {self.geometry.feature_shape}")
        return self.encoder(feature.astype(self.dtype, copy=False))

    def reconstruct(self, z_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if z_hat.shape[1:] != self.geometry.code_shape:
            raise ValueError(f"code shape {z_hat.shape[1:]} != {self.geometry.code_shape}")
        cur = self.reconstructor(z_hat.astype(self.dtype, copy=False))
        if self.readout is Readout.IF:
            s = self.readout_node(cur)
            return s, self.readout_node.state.potentials.copy()
        return self.readout_node(cur)

    def readout_planes(self, outputs: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
        planes: list[np.ndarray] = []
        for s, m in outputs:
            if self.readout is Readout.IHF:
                planes += [s, m]
            elif self.readout is Readout.IF:
                planes.append(s)
            else:
                planes.append(m)
        return planes

    def convert(self, outputs: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        """Fuse per-step ``(S_t, M_t)`` pairs into the reconstructed feature."""
        if len(outputs) != self.time_steps:
            raise ValueError(f"expected {self.time_steps} step outputs, got {len(outputs)}")
        return self.converter(self.readout_planes(outputs))

    # -- whole-sequence surface -----------------------------------------------

    def forward(self, feature: np.ndarray, channel: Callable[[np.ndarray], np.ndarray] | None = None):
        """Run ``T`` steps. Returns ``(F_prime, codes)`` where ``codes`` are the sent ``z_t``.

        The first conv-BN of the encoder sees the same ``F`` at every step,
        so it is evaluated once and its output reused.
        """
        if feature.shape[1:] != self.geometry.feature_shape:
            raise ValueError(f"feature shape {feature.shape[1:]} != {self.geometry.feature_shape}")
        self.reset()
        layers = self.encoder.layers
        head = layers[1](layers[0](feature.astype(self.dtype, copy=False)))
        codes, outputs = [], []
        for _ in range(self.time_steps):
            z = head
            for layer in layers[2:]:
                z = layer(z)
            z_hat = channel(z) if channel is not None else z
            codes.append(z)
            outputs.append(self.reconstruct(z_hat))
        return self.convert(outputs), codes

    def backward(self, grad: np.ndarray, code_grads: Sequence[np.ndarray] | None = None) -> np.ndarray | None:
        """Backpropagate through time; the channel passes gradients unchanged.

        ``code_grads`` adds extra gradient on each transmitted ``z_t``
        (the entropy penalty). Returns the gradient w.r.t. the input feature.
        """
        planes = self.converter.backward(grad)
        T = self.time_steps
        per_step = []
        for t in range(T):
            if self.readout is Readout.IHF:
                per_step.append((planes[2 * t], planes[2 * t + 1]))
            elif self.readout is Readout.IF:
                per_step.append((planes[t], None))
            else:
                per_step.append((np.zeros_like(planes[t]), planes[t]))
        layers = self.encoder.layers
        dhead = None
        for t in reversed(range(T)):
            ds, dm = per_step[t]
            if self.readout is Readout.IF:
                dcur = self.readout_node.backward(ds)
            else:
                dcur = self.readout_node.backward((ds, dm))
            g = self.reconstructor.backward(dcur)
            if code_grads is not None:
                g = g + code_grads[t]
            for layer in reversed(layers[2:]):
                g = layer.backward(g)
            dhead = g if dhead is None else dhead + g
        return layers[0].backward(layers[1].backward(dhead))

    @property
    def bits_per_inference(self) -> int:
        return self.time_steps * self.geometry.bits_per_step
