"""Comparison systems: quantized CNN autoencoder and separate source/channel coding."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np

from .layers import BatchNorm2d, Conv2d, Module, ReLU, Sequential, Sigmoid
from .model import Geometry

log = logging.getLogger(__name__)


# -- uniform quantizer ---------------------------------------------------------

def quantize(x: np.ndarray, n: int) -> np.ndarray:
    """``round(x * (2^n - 1))`` with round-half-away-from-zero; inputs clamped to [0, 1]."""
    if n < 1:
        raise ValueError("quantizer needs at least one bit")
    x = np.asarray(x, dtype=np.float64)
    if np.any((x < 0) | (x > 1)):
        log.warning("quantize: %d values outside [0, 1] clamped", int(np.sum((x < 0) | (x > 1))))
        x = np.clip(x, 0.0, 1.0)
    levels = (1 << n) - 1
    return np.floor(x * levels + 0.5).astype(np.int64)


def dequantize(q: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / ((1 << n) - 1)


def to_bits_msb(q: np.ndarray, n: int) -> np.ndarray:
    """Append a trailing axis of ``n`` bits, most significant first."""
    shifts = np.arange(n - 1, -1, -1)
    return ((np.asarray(q)[..., None] >> shifts) & 1).astype(np.uint8)


def from_bits_msb(bits: np.ndarray, n: int) -> np.ndarray:
    weights = 1 << np.arange(n - 1, -1, -1)
    return (np.asarray(bits).astype(np.int64) * weights).sum(axis=-1)


# -- CNN-based SC with n-bit quantization ---------------------------------------

class CnnQuantSc(Module):
    """Same conv plan as the spiking model with ReLU activations.

    The bottleneck is squashed by a sigmoid and quantized to ``n`` bits per
    value; the bits travel MSB-first in row-major (c2, h, w) order. In
    backpropagation quantizer and channel are identity maps.
    """

    def __init__(self, geometry: Geometry, n_bits: int = 4, seed: int = 0, dtype=np.float32):
        self.geometry = geometry
        self.n_bits = n_bits
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        g = geometry
        conv = lambda a, b: Conv2d(a, b, 3, 1, 1, rng=rng, dtype=dtype)  # noqa: E731
        self.encoder = Sequential(conv(g.c, g.c1), BatchNorm2d(g.c1, dtype=dtype), ReLU(),
                                  conv(g.c1, g.c2), BatchNorm2d(g.c2, dtype=dtype), Sigmoid())
        self.decoder = Sequential(conv(g.c2, g.c1), BatchNorm2d(g.c1, dtype=dtype), ReLU(),
                                  conv(g.c1, g.c), BatchNorm2d(g.c, dtype=dtype), Sigmoid())

    @property
    def bits_per_inference(self) -> int:
        return self.n_bits * self.geometry.bits_per_step

    def forward(self, feature: np.ndarray, channel: Callable[[np.ndarray], np.ndarray] | None = None):
        y = self.encoder(feature.astype(self.dtype, copy=False))
        q = quantize(y, self.n_bits)
        bits = to_bits_msb(q, self.n_bits)
        if channel is not None:
            n = bits.shape[0]
            bits = channel(bits.reshape(n, -1)).reshape(bits.shape)
        y_hat = dequantize(from_bits_msb(bits, self.n_bits), self.n_bits).astype(self.dtype)
        return self.decoder(y_hat), [bits]

    def backward(self, grad: np.ndarray, code_grads=None) -> np.ndarray:
        return self.encoder.backward(self.decoder.backward(grad))

    def reset(self) -> None:
        pass


# -- convolutional code + hard-decision Viterbi -----------------------------------

@dataclass(frozen=True)
class ConvCode:
    """Feedforward convolutional code; the MSB of each octal generator taps the current input."""

    generators: tuple[int, ...] = (0o133, 0o171, 0o165)
    constraint_length: int = 7

    def __post_init__(self):
        if self.constraint_length < 2:
            raise ValueError("constraint length must be at least 2")
        if not self.generators or any(g <= 0 or g >= 1 << self.constraint_length for g in self.generators):
            raise ValueError("generator taps must be nonzero and fit the constraint length")

    @property
    def n_out(self) -> int:
        return len(self.generators)

    @property
    def rate(self) -> float:
        return 1.0 / self.n_out

    @property
    def tail(self) -> int:
        return self.constraint_length - 1

    def codeword_length(self, message_length: int) -> int:
        return (message_length + self.tail) * self.n_out

    def output_table(self) -> np.ndarray:
        """``table[state, bit, j]``: output j when ``bit`` enters with register ``state``."""
        K = self.constraint_length
        ns = 1 << (K - 1)
        table = np.zeros((ns, 2, self.n_out), dtype=np.uint8)
        for s in range(ns):
            for b in range(2):
                reg = (b << (K - 1)) | s
                for j, g in enumerate(self.generators):
                    table[s, b, j] = bin(reg & g).count("1") & 1
        return table


def conv_encode(message: np.ndarray, code: ConvCode = ConvCode()) -> np.ndarray:
    """Encode a 1-D bit array (or a batch of rows) and terminate with K-1 zeros."""
    msg = np.asarray(message, dtype=np.uint8)
    if msg.shape[-1] == 0:
        raise ValueError("message must be nonempty")
    batch = msg.reshape(-1, msg.shape[-1])
    padded = np.concatenate([batch, np.zeros((batch.shape[0], code.tail), dtype=np.uint8)], axis=1)
    out = _encode_kernel(padded, code.output_table(), code.constraint_length)
    return out.reshape(msg.shape[:-1] + (out.shape[-1],))


@numba.njit(cache=True)
def _encode_kernel(bits, table, K):
    nb, L = bits.shape
    n_out = table.shape[2]
    out = np.zeros((nb, L * n_out), dtype=np.uint8)
    for r in range(nb):
        s = 0
        for i in range(L):
            b = bits[r, i]
            for j in range(n_out):
                out[r, i * n_out + j] = table[s, b, j]
            s = ((b << (K - 1)) | s) >> 1
    return out


@numba.njit(cache=True)
def _viterbi_kernel(received, out_index, K, n_out, n_steps):
    nb = received.shape[0]
    ns = 1 << (K - 1)
    half = ns >> 1
    n_sym = 1 << n_out
    out = np.zeros((nb, n_steps), dtype=np.uint8)
    big = np.int32(1 << 24)
    metric = np.empty(ns, dtype=np.int32)
    new = np.empty(ns, dtype=np.int32)
    branch = np.empty(n_sym, dtype=np.int32)
    choice = np.zeros((n_steps, ns), dtype=np.uint8)
    for r in range(nb):
        metric[:] = big
        metric[0] = 0
        for i in range(n_steps):
            rsym = 0
            for j in range(n_out):
                rsym = (rsym << 1) | received[r, i * n_out + j]
            for sym in range(n_sym):
                d = sym ^ rsym
                c = 0
                while d:
                    c += d & 1
                    d >>= 1
                branch[sym] = c
            for nxt in range(ns):
                b = nxt >> (K - 2)
                p0 = (nxt & (half - 1)) << 1
                m0 = metric[p0] + branch[out_index[p0, b]]
                m1 = metric[p0 | 1] + branch[out_index[p0 | 1, b]]
                if m1 < m0:
                    new[nxt] = m1
                    choice[i, nxt] = 1
                else:
                    new[nxt] = m0
                    choice[i, nxt] = 0
            metric, new = new, metric
        s = 0  # terminated: the trellis ends in the all-zero state
        for i in range(n_steps - 1, -1, -1):
            out[r, i] = s >> (K - 2)
            s = ((s & (half - 1)) << 1) | choice[i, s]
    return out


def viterbi_decode(received: np.ndarray, code: ConvCode = ConvCode()) -> np.ndarray:
    """Hard-decision maximum-likelihood decoding of terminated codewords (1-D or batched rows)."""
    rx = np.asarray(received, dtype=np.uint8)
    length = rx.shape[-1]
    if length % code.n_out or length // code.n_out <= code.tail:
        raise ValueError(f"codeword length {length} is truncated or too short for this code")
    batch = rx.reshape(-1, length)
    steps = length // code.n_out
    table = code.output_table().astype(np.int64)
    out_index = (table << np.arange(code.n_out - 1, -1, -1)).sum(axis=-1)
    dec = _viterbi_kernel(np.ascontiguousarray(batch), out_index, code.constraint_length, code.n_out, steps)
    dec = dec[:, :steps - code.tail]
    return dec.reshape(rx.shape[:-1] + (dec.shape[-1],))


# -- separate source and channel coding ---------------------------------------------

SYNC_WORD = 0xA5C3
HEADER_BITS = 64  # sync word + three u16 dims, MSB-first


@dataclass
class SeparateResult:
    features: np.ndarray
    ok: np.ndarray


class SeparateCoding:
    """8-bit quantization, identity source coder with a header, then a convolutional code.

    A decoded header that does not match the expected sync word and shape is
    a decoding failure: that sample's feature is replaced by zeros.
    """

    def __init__(self, feature_shape: tuple[int, int, int], code: ConvCode = ConvCode(), n_bits: int = 8):
        self.feature_shape = tuple(feature_shape)
        self.code = code
        self.n_bits = n_bits
        words = np.array([SYNC_WORD, *self.feature_shape], dtype=np.int64)
        self.header = to_bits_msb(words, 16).ravel()

    @property
    def message_bits(self) -> int:
        return HEADER_BITS + int(np.prod(self.feature_shape)) * self.n_bits

    @property
    def bits_per_inference(self) -> int:
        return self.code.codeword_length(self.message_bits)

    def source_encode(self, features: np.ndarray) -> np.ndarray:
        n = features.shape[0]
        payload = to_bits_msb(quantize(features, self.n_bits), self.n_bits).reshape(n, -1)
        return np.concatenate([np.broadcast_to(self.header, (n, HEADER_BITS)), payload], axis=1)

    def source_decode(self, messages: np.ndarray) -> SeparateResult:
        n = messages.shape[0]
        ok = np.all(messages[:, :HEADER_BITS] == self.header, axis=1)
        payload = messages[:, HEADER_BITS:].reshape(n, *self.feature_shape, self.n_bits)
        feats = dequantize(from_bits_msb(payload, self.n_bits), self.n_bits)
        feats[~ok] = 0.0
        return SeparateResult(feats, ok)

    def transmit(self, features: np.ndarray, channel: Callable[[np.ndarray], np.ndarray] | None = None,
                 ) -> SeparateResult:
        if features.shape[1:] != self.feature_shape:
            raise ValueError(f"feature shape {features.shape[1:]} != {self.feature_shape}")
        codewords = conv_encode(self.source_encode(features), self.code)
        received = channel(codewords) if channel is not None else codewords
        return self.source_decode(viterbi_decode(received, self.code))
