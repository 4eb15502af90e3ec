"""Integrate-and-fire style neurons stepped in discrete time.

Three units share one charge rule ``m <- m + I``:

* IF fires a binary spike where ``m > v_threshold`` and then resets.
* MP only charges and reports the charged potential.
* IHF behaves like IF and additionally reports the membrane potential
  *after* the reset.

The step functions operate on an explicit :class:`MembraneState`. The
layer classes (:class:`IFNode`, :class:`IHFNode`, :class:`MPNode`) wrap
the same dynamics for use inside networks and add backpropagation through
time with a sigmoid surrogate for the firing step.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .layers import Module, grad_enabled, sigmoid


class ResetMode(enum.Enum):
    SOFT = "soft"
    HARD = "hard"


@dataclass
class MembraneState:
    potentials: np.ndarray
    v_threshold: float = 1.0
    reset_mode: ResetMode = ResetMode.SOFT
    v_reset: float = 0.0
    time_index: int = 0

    @classmethod
    def zeros(cls, shape, dtype=np.float64, **kwargs) -> "MembraneState":
        return cls(np.zeros(shape, dtype=dtype), **kwargs)


@dataclass(frozen=True)
class SurrogateConfig:
    slope: float = 4.0
    relaxed_forward: bool = False

    def __post_init__(self):
        if not self.slope > 0:
            raise ValueError(f"surrogate slope must be positive, got {self.slope}")


def _check_shape(state: MembraneState, current: np.ndarray) -> np.ndarray:
    current = np.asarray(current)
    if current.shape != state.potentials.shape:
        raise ValueError(
            f"input shape {current.shape} does not match membrane shape {state.potentials.shape}")
    return current


def _fire(h: np.ndarray, v_threshold: float) -> np.ndarray:
    return (h > v_threshold).astype(h.dtype)


def _reset(h, spikes, state: MembraneState):
    if state.reset_mode is ResetMode.SOFT:
        return h - spikes * state.v_threshold
    return (1 - spikes) * h + spikes * state.v_reset


def if_step(state: MembraneState, current: np.ndarray) -> np.ndarray:
    current = _check_shape(state, current)
    h = state.potentials + current
    spikes = _fire(h, state.v_threshold)
    state.potentials = _reset(h, spikes, state)
    state.time_index += 1
    return spikes


def mp_step(state: MembraneState, current: np.ndarray) -> np.ndarray:
    current = _check_shape(state, current)
    state.potentials = state.potentials + current
    state.time_index += 1
    return state.potentials.copy()


def ihf_step(state: MembraneState, current: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Charge, fire, soft-reset, then emit the post-reset potential."""
    if state.reset_mode is not ResetMode.SOFT:
        raise ValueError("IHF neurons use soft reset")
    spikes = if_step(state, current)
    return spikes, state.potentials.copy()


def reset_state(state: MembraneState) -> None:
    state.potentials = np.zeros_like(state.potentials)
    state.time_index = 0


def fire_surrogate_backward(potential: np.ndarray, cfg: SurrogateConfig,
                            v_threshold: float = 1.0) -> np.ndarray:
    """d(spike)/d(potential) of the sigmoid surrogate ``sigmoid(k (m - v_th))``."""
    s = sigmoid(cfg.slope * (np.asarray(potential, dtype=np.float64) - v_threshold))
    return cfg.slope * s * (1 - s)


class _SpikingNode(Module):
    """Shared machinery for the layer wrappers.

    The membrane is created lazily on the first step after a reset, so the
    batch size is free to change between sequences. Backward must be called
    once per forward step, in reverse time order; the gradient flowing
    through the membrane from step t+1 to step t is carried internally.
    """

    def __init__(self, v_threshold: float = 1.0, reset_mode: ResetMode = ResetMode.SOFT,
                 v_reset: float = 0.0, surrogate: SurrogateConfig | None = None):
        self.v_threshold = v_threshold
        self.reset_mode = reset_mode
        self.v_reset = v_reset
        self.surrogate = surrogate or SurrogateConfig()
        self.state: MembraneState | None = None
        self._cache: list = []
        self._carry: np.ndarray | None = None

    def reset(self) -> None:
        self.state = None
        self._carry = None

    def _charge_and_fire(self, current: np.ndarray):
        if self.state is None:
            self.state = MembraneState.zeros(current.shape, dtype=current.dtype,
                                             v_threshold=self.v_threshold,
                                             reset_mode=self.reset_mode, v_reset=self.v_reset)
        st = self.state
        h = _check_shape(st, current) + st.potentials
        if self.surrogate.relaxed_forward:
            spikes = sigmoid(self.surrogate.slope * (h - st.v_threshold))
        else:
            spikes = _fire(h, st.v_threshold)
        st.potentials = _reset(h, spikes, st)
        st.time_index += 1
        if grad_enabled():
            self._cache.append((h, spikes))
        return spikes

    def _backward_core(self, grad_spike, grad_potential):
        """Gradients w.r.t. the step input, given grads of spike and post-reset potential."""
        h, spikes = self._cache.pop()
        dm = self._carry if self._carry is not None else np.zeros_like(h)
        if grad_potential is not None:
            dm = dm + grad_potential
        k = self.surrogate.slope
        sg = sigmoid(k * (h - self.v_threshold))
        dsurr = k * sg * (1 - sg)
        if self.reset_mode is ResetMode.SOFT:
            ds = grad_spike - self.v_threshold * dm
            dh = dm + ds * dsurr
        else:
            ds = grad_spike + dm * (self.v_reset - h)
            dh = dm * (1 - spikes) + ds * dsurr
        self._carry = dh if self._cache else None
        return dh


class IFNode(_SpikingNode):
    def forward(self, current: np.ndarray) -> np.ndarray:
        return self._charge_and_fire(current)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self._backward_core(grad, None)


class IHFNode(_SpikingNode):
    """Emits ``(spikes, post_reset_potential)`` each step."""

    def __init__(self, v_threshold: float = 1.0, surrogate: SurrogateConfig | None = None):
        super().__init__(v_threshold, ResetMode.SOFT, 0.0, surrogate)

    def forward(self, current: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        spikes = self._charge_and_fire(current)
        return spikes, self.state.potentials.copy()

    def backward(self, grad: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        grad_spike, grad_potential = grad
        return self._backward_core(grad_spike, grad_potential)


class MPNode(Module):
    """Charge-only unit that reports its potential; no firing, no reset."""

    def __init__(self):
        self.state: MembraneState | None = None
        self._cache: list = []
        self._carry = None

    def reset(self) -> None:
        self.state = None
        self._carry = None

    def forward(self, current: np.ndarray) -> np.ndarray:
        if self.state is None:
            self.state = MembraneState.zeros(current.shape, dtype=current.dtype)
        out = mp_step(self.state, current)
        if grad_enabled():
            self._cache.append(None)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self._cache.pop()
        dm = grad if self._carry is None else grad + self._carry
        self._carry = dm if self._cache else None
        return dm


def reset_nodes(module: Module) -> None:
    for m in module.modules():
        if isinstance(m, (_SpikingNode, MPNode)):
            m.reset()


def set_surrogate(module: Module, cfg: SurrogateConfig) -> None:
    for m in module.modules():
        if isinstance(m, _SpikingNode):
            m.surrogate = cfg
