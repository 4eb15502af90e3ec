"""Entropy-regularized task loss, Adam, and the three-stage schedule.

Stages: train the backbone alone with cross-entropy; freeze it and train
the SC link with ``CE + (alpha - H)^2``; finally fine-tune everything with
the same loss at a lower learning rate. ``H`` is the binary entropy of the
empirical frequency of ones in the transmitted codes.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import images_to_input
from .channel import Channel, ChannelConfig, ChannelKind
from .layers import Parameter, no_grad
from .model import SnnSc
from .pipeline import SplitSystem

log = logging.getLogger(__name__)

_P_CLAMP = 1e-6


class Stage(enum.Enum):
    BACKBONE = "backbone"
    SC_ONLY = "sc_only"
    JOINT_FINETUNE = "joint_finetune"


class StageOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class EntropyStats:
    p0: float
    p1: float
    H: float


def binary_entropy(p1: float) -> float:
    """Entropy in bits with ``0 log 0 = 0``."""
    if p1 <= 0.0 or p1 >= 1.0:
        return 0.0
    return -(p1 * math.log2(p1) + (1 - p1) * math.log2(1 - p1))


def entropy(codes: Sequence[np.ndarray] | np.ndarray) -> EntropyStats:
    """Pool the frequency of ones over every bit of every step."""
    arrays = [codes] if isinstance(codes, np.ndarray) else list(codes)
    total = sum(a.size for a in arrays)
    if total == 0:
        raise ValueError("entropy of an empty bit sequence")
    p1 = float(sum(float(np.sum(a)) for a in arrays) / total)
    return EntropyStats(1.0 - p1, p1, binary_entropy(p1))


def entropy_penalty(codes: Sequence[np.ndarray], alpha: float):
    """``(stats, penalty, per-step gradients)`` of ``(alpha - H)^2``.

    ``H`` depends on the codes only through the frequency ``p1``, whose
    derivative w.r.t. each bit is ``1 / n_bits``; that gradient then
    continues through the firing surrogate of the encoder.
    """
    stats = entropy(codes)
    penalty = (alpha - stats.H) ** 2
    p = min(max(stats.p1, _P_CLAMP), 1 - _P_CLAMP)
    dH_dp = math.log2((1 - p) / p)
    n = sum(c.size for c in codes)
    g = -2.0 * (alpha - stats.H) * dH_dp / n
    return stats, penalty, [np.full_like(c, g) for c in codes]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


def total_loss(logits: np.ndarray, labels: np.ndarray, stats: EntropyStats | None,
               alpha: float | None) -> float:
    ce, _ = cross_entropy(logits, labels)
    if alpha is None or stats is None:
        return ce
    return ce + (alpha - stats.H) ** 2


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class TrainConfig:
    stage: Stage = Stage.SC_ONLY
    alpha: float | None = 1.0
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: tuple[float, int] = (0.5, 10)
    channel: ChannelConfig = field(default_factory=lambda: ChannelConfig(ChannelKind.BSC, 0.15, 1))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.stage, str):
            self.stage = Stage(self.stage)
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def lr_at(self, epoch: int) -> float:
        factor, every = self.lr_decay
        return self.lr * factor ** (epoch // every)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        """Build from flat ``key = value`` strings (see README for the keys)."""
        kw: dict = {}
        for key, raw in values.items():
            if key == "stage":
                kw["stage"] = Stage(raw)
            elif key == "alpha":
                kw["alpha"] = None if raw.lower() in ("none", "off", "") else float(raw)
            elif key in ("epochs", "batch_size", "seed"):
                kw[key] = int(raw)
            elif key == "lr":
                kw["lr"] = float(raw)
            elif key == "lr_decay":
                f, k = raw.replace(",", " ").split()
                kw["lr_decay"] = (float(f), int(k))
        ch = ChannelConfig(values.get("channel", "bsc"), float(values.get("train_p", 0.15)),
                           int(values.get("channel_seed", 1)))
        kw["channel"] = ch
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in kw.items() if k in names})


METRIC_COLUMNS = ("stage", "epoch", "iter", "loss_ce", "entropy_H", "penalty", "train_acc")


class MetricsLog:
    """Append-only CSV of per-iteration training metrics."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def append(self, **row) -> None:
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _check_order(system: SplitSystem, stage: Stage, done: set[Stage]) -> None:
    if stage is Stage.BACKBONE:
        return
    if system.sc is None:
        raise StageOrderError(f"{stage.value} needs an SC model attached")
    if Stage.BACKBONE not in done:
        raise StageOrderError(f"{stage.value} needs a trained backbone")
    if stage is Stage.JOINT_FINETUNE and Stage.SC_ONLY not in done:
        raise StageOrderError("joint fine-tuning needs a trained SC model")


def train_stage(system: SplitSystem, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                done: set[Stage] | None = None, metrics: MetricsLog | None = None,
                max_iters: int | None = None) -> MetricsLog:
    """Run one training stage in place; ``done`` records finished stages and is updated."""
    done = done if done is not None else set()
    _check_order(system, cfg.stage, done)
    metrics = metrics or MetricsLog(None)
    rng = np.random.default_rng(cfg.seed)
    bb, sc = system.backbone, system.sc
    stage = cfg.stage

    if stage is Stage.BACKBONE:
        bb.train().requires_grad_(True)
        params = bb.parameters()
    elif stage is Stage.SC_ONLY:
        bb.eval().requires_grad_(False)
        sc.train().requires_grad_(True)
        params = sc.parameters()
        sc.encoder[0].input_grad = False  # features are precomputed constants here
        with no_grad():
            feats = np.concatenate([system.features(images[i:i + 500]) for i in range(0, len(images), 500)])
    else:
        bb.train().requires_grad_(True)
        sc.train().requires_grad_(True)
        params = bb.parameters() + sc.parameters()

    use_sc = stage is not Stage.BACKBONE
    use_entropy = use_sc and cfg.alpha is not None and isinstance(sc, SnnSc)
    channel = Channel(cfg.channel) if use_sc and cfg.channel.p > 0 else None
    opt = Adam(params, lr=cfg.lr)
    n = len(images)
    it = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n - 1, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            if stage is Stage.BACKBONE:
                logits = bb(images_to_input(images[idx], bb.dtype))
            elif stage is Stage.SC_ONLY:
                logits, codes = system.logits_from_feature(feats[idx], channel)
            else:
                f = system.features(images[idx])
                logits, codes = system.logits_from_feature(f, channel)
            ce, dlogits = cross_entropy(logits, labels[idx])
            stats, penalty, code_grads = None, 0.0, None
            if use_sc and codes and isinstance(sc, SnnSc):
                if use_entropy:
                    stats, penalty, code_grads = entropy_penalty(codes, cfg.alpha)
                else:
                    stats = entropy(codes)
            if stage is Stage.BACKBONE:
                bb.backward(dlogits)
            elif stage is Stage.SC_ONLY:
                system.backward_to_feature(dlogits, code_grads)
            else:
                system.backbone.edge.backward(system.backward_to_feature(dlogits, code_grads))
            opt.step()
            acc = float(np.mean(logits.argmax(axis=1) == labels[idx]))
            metrics.append(stage=stage.value, epoch=epoch, iter=it, loss_ce=ce,
                           entropy_H=stats.H if stats else float("nan"), penalty=float(penalty),
                           train_acc=acc)
            it += 1
            if max_iters is not None and it >= max_iters:
                break
        if max_iters is not None and it >= max_iters:
            break
        log.info("%s epoch %d: last loss %.4f", stage.value, epoch, ce)
    bb.requires_grad_(True)
    if sc is not None:
        sc.encoder[0].input_grad = True
    system.eval()
    done.add(stage)
    return metrics


def accuracy(system: SplitSystem, images: np.ndarray, labels: np.ndarray,
             channel=None) -> float:
    return float(np.mean(system.predict(images, channel).argmax(axis=1) == labels))


def code_statistics(system: SplitSystem, images: np.ndarray, batch_size: int = 250) -> EntropyStats:
    """Entropy of the transmitted codes on held-out data (eval mode, noiseless)."""
    system.eval()
    ones, total = 0.0, 0
    with no_grad():
        for i in range(0, len(images), batch_size):
            f = system.features(images[i:i + batch_size])
            _, codes = system.sc(f, None)
            for c in codes:
                ones += float(np.sum(c))
                total += c.size
    p1 = ones / total
    return EntropyStats(1 - p1, p1, binary_entropy(p1))
