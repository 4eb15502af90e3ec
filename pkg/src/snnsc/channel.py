"""Binary symmetric / erasure channels and bit packing.

Randomness comes from a SplitMix64 stream (Steele, Lea & Flood, 2014),
evaluated in counter mode so a block of draws is one vectorized numpy
expression. Output ``k`` of a stream seeded with ``s`` is
``mix64(s + (k + 1) * 0x9E3779B97F4A7C15)`` with ``mix64`` the standard
SplitMix64 finalizer; uniforms in [0, 1) take the top 53 bits. The
sequence is identical on every platform and easy to reproduce elsewhere.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (used to key per-trial / per-session streams)."""
    acc = np.uint64(0x6A09E667F3BCC909)
    with np.errstate(over="ignore"):
        for part in parts:
            acc = _mix64(np.uint64(acc ^ np.uint64(int(part) & _MASK64)) + _GAMMA)
    return int(acc)


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = np.uint64(int(seed) & _MASK64)
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(self.seed + idx * _GAMMA)

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


class ChannelKind(enum.Enum):
    BSC = "bsc"
    BEC = "bec"


@dataclass(frozen=True)
class ChannelConfig:
    kind: ChannelKind = ChannelKind.BSC
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", ChannelKind(self.kind.lower()))
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"channel probability must lie in [0, 1], got {self.p}")

    def with_(self, **changes) -> "ChannelConfig":
        fields = {"kind": self.kind, "p": self.p, "seed": self.seed}
        fields.update(changes)
        return ChannelConfig(**fields)


def _as_bits(bits: np.ndarray) -> np.ndarray:
    arr = np.asarray(bits)
    b = arr.astype(np.uint8)
    if np.any(b > 1) or np.any(b != arr):
        raise ValueError("channel input must be binary")
    return b


def bsc_transmit(bits: np.ndarray, cfg: ChannelConfig, rng: SplitMix64 | None = None) -> np.ndarray:
    """Flip each bit independently with probability ``cfg.p``."""
    if cfg.kind is not ChannelKind.BSC:
        raise ValueError("bsc_transmit needs a BSC config")
    arr = np.asarray(bits)
    b = _as_bits(arr)
    rng = rng if rng is not None else SplitMix64(cfg.seed)
    flips = (rng.uniform(b.size) < cfg.p).reshape(b.shape)
    return (b ^ flips).astype(arr.dtype)


def bec_transmit(bits: np.ndarray, cfg: ChannelConfig, rng: SplitMix64 | None = None) -> np.ndarray:
    """Erase each bit with probability ``cfg.p``; the receiver fills erasures with a fair coin.

    Per call, ``n`` draws decide erasures and the next ``n`` draws supply
    fill bits (top bit of each word).
    """
    if cfg.kind is not ChannelKind.BEC:
        raise ValueError("bec_transmit needs a BEC config")
    arr = np.asarray(bits)
    b = _as_bits(arr)
    rng = rng if rng is not None else SplitMix64(cfg.seed)
    erased = (rng.uniform(b.size) < cfg.p).reshape(b.shape)
    fill = (rng.next_u64(b.size) >> np.uint64(63)).astype(np.uint8).reshape(b.shape)
    return np.where(erased, fill, b).astype(arr.dtype)


class Channel:
    """A stateful channel: owns its stream, so consecutive calls see fresh noise.

    In backpropagation the channel is the identity map.
    """

    def __init__(self, cfg: ChannelConfig):
        self.cfg = cfg
        self.rng = SplitMix64(cfg.seed)

    def transmit(self, bits: np.ndarray) -> np.ndarray:
        if self.cfg.p == 0.0:
            # still validate, but skip drawing so the stream is untouched
            _as_bits(bits)
            return np.array(bits, copy=True)
        if self.cfg.kind is ChannelKind.BSC:
            return bsc_transmit(bits, self.cfg, self.rng)
        return bec_transmit(bits, self.cfg, self.rng)

    __call__ = transmit

    @staticmethod
    def backward(grad: np.ndarray) -> np.ndarray:
        return grad


@dataclass(frozen=True)
class BitBuffer:
    data: bytes
    bit_len: int

    def __post_init__(self):
        if self.bit_len < 0 or self.bit_len > 8 * len(self.data):
            raise ValueError(f"bit_len {self.bit_len} does not fit in {len(self.data)} bytes")


def pack_bits(bits: np.ndarray) -> BitBuffer:
    """LSB-first: element k (row-major) goes to bit k % 8 of byte k // 8."""
    flat = _as_bits(bits).ravel()
    return BitBuffer(np.packbits(flat, bitorder="little").tobytes(), int(flat.size))


def unpack_bits(buf: BitBuffer, shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    count = int(np.prod(shape)) if shape else 1
    if count != buf.bit_len:
        raise ValueError(f"shape {shape} needs {count} bits, buffer holds {buf.bit_len}")
    if len(buf.data) != (buf.bit_len + 7) // 8:
        raise ValueError(f"{buf.bit_len} bits need {(buf.bit_len + 7) // 8} bytes, got {len(buf.data)}")
    raw = np.frombuffer(buf.data, dtype=np.uint8)
    if buf.bit_len % 8 and raw[-1] >> (buf.bit_len % 8):
        raise ValueError("nonzero padding bits")
    return np.unpackbits(raw, bitorder="little", count=count).reshape(shape)
