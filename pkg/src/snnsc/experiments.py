"""Experiment configuration, training orchestration, sweeps, ablations, reports.

A sweep evaluates one trained variant over a grid of test error
probabilities. Each nonzero point is repeated ``trials`` times with a
fresh channel seed ``derive_seed(seed, trial, round(p * 1e6))``; the p = 0
point is noiseless and evaluated once (its std is 0 by construction).
All numbers are written with fixed formatting so reruns are
byte-identical.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .backbone import SplitClassifier
from .baselines import CnnQuantSc, SeparateCoding
from .channel import Channel, ChannelConfig, ChannelKind, derive_seed
from .checkpoint import CheckpointError, load_system, save_system
from .data import SmallImageDataset, generate_synthetic, load_dataset
from .layers import no_grad
from .model import Geometry, Readout, SnnSc
from .pipeline import SplitSystem
from .training import MetricsLog, Stage, TrainConfig, accuracy, code_statistics, train_stage

log = logging.getLogger(__name__)


class Variant(enum.Enum):
    SNN_IHF = "snn_ihf"
    SNN_IF = "snn_if"
    SNN_IHFM = "snn_ihfm"
    CNN_QUANT = "cnn_quant"
    SEPARATE = "separate"
    NO_SC = "no_sc"  # split backbone with a perfect link, the reference line

    @property
    def is_snn(self) -> bool:
        return self in (Variant.SNN_IHF, Variant.SNN_IF, Variant.SNN_IHFM)

    @property
    def readout(self) -> Readout:
        return {Variant.SNN_IHF: Readout.IHF, Variant.SNN_IF: Readout.IF, Variant.SNN_IHFM: Readout.IHF_M}[self]


class DatasetKind(enum.Enum):
    SYNTHETIC_BLOBS = "synthetic_blobs"
    SMALL_IMAGES = "small_images"


DEFAULT_GRID = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


@dataclass
class ExperimentConfig:
    variant: Variant = Variant.SNN_IHF
    dataset: DatasetKind = DatasetKind.SYNTHETIC_BLOBS
    dataset_path: str | None = None
    classes: int = 10
    samples: int = 1200
    data_seed: int = 0
    time_steps: int = 4  # T for spiking variants, n (bits per value) for CNN_QUANT
    channel: ChannelKind = ChannelKind.BSC
    train_p: float = 0.15
    test_p_grid: tuple[float, ...] = DEFAULT_GRID
    trials: int = 10
    seed: int = 0
    alpha: float | None = 1.0
    backbone_epochs: int = 10
    backbone_lr: float = 2e-3
    sc_epochs: int = 20
    sc_lr: float = 2e-3
    finetune_epochs: int = 10
    finetune_lr: float = 5e-4
    batch_size: int = 32
    eval_limit: int | None = None  # cap on test images (used for the slow separate-coding sweep)
    workdir: str = "runs"

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.dataset = DatasetKind(self.dataset)
        self.channel = ChannelKind(self.channel)
        self.test_p_grid = tuple(float(p) for p in self.test_p_grid)
        if not self.test_p_grid or any(not 0.0 <= p <= 1.0 for p in self.test_p_grid):
            raise ValueError("test grid must be nonempty and inside [0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0.0 <= self.train_p <= 1.0:
            raise ValueError("train_p must lie in [0, 1]")
        if self.time_steps < 1:
            raise ValueError("time_steps must be positive")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.dataset is DatasetKind.SMALL_IMAGES and not self.dataset_path:
            raise ValueError("small_images dataset needs dataset_path")
        if self.variant is Variant.CNN_QUANT:
            self.alpha = None  # the quantized baseline is trained with CE only

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ExperimentConfig":
        """Parse flat string values (config files, CLI flags)."""
        kinds = {f.name: f.type for f in fields(cls)}
        kw: dict = {}
        for key, raw in values.items():
            if key not in kinds:
                raise KeyError(f"unknown experiment key {key!r}")
            kw[key] = _parse_value(key, str(raw))
        return cls(**kw)

    # -- paths --------------------------------------------------------------

    @property
    def root(self) -> Path:
        return Path(self.workdir)

    @property
    def data_tag(self) -> str:
        if self.dataset is DatasetKind.SMALL_IMAGES:
            return Path(self.dataset_path).stem
        return f"blobs{self.classes}x{self.samples}d{self.data_seed}"

    @property
    def backbone_path(self) -> Path:
        return self.root / "checkpoints" / f"backbone_{self.data_tag}_s{self.seed}.snck"

    @property
    def checkpoint_path(self) -> Path:
        if self.variant in (Variant.SEPARATE, Variant.NO_SC):
            return self.backbone_path
        tag = f"{self.variant.value}_t{self.time_steps}_{self.channel.value}{_num(self.train_p)}"
        if self.variant.is_snn:
            tag += f"_a{_num(self.alpha)}"
        tag += f"_e{self.sc_epochs}-{_num(self.sc_lr)}"
        if self.finetune_epochs > 0:
            tag += f"_ft{self.finetune_epochs}-{_num(self.finetune_lr)}"
        return self.root / "checkpoints" / f"{tag}_{self.data_tag}_s{self.seed}.snck"


def _num(x: float | None) -> str:
    return "none" if x is None else f"{x:g}"


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key == "test_p_grid":
        return tuple(float(v) for v in raw.replace(",", " ").split())
    if key in ("alpha", "eval_limit", "dataset_path"):
        if raw.lower() in ("", "none", "off"):
            return None
        return raw if key == "dataset_path" else (int(raw) if key == "eval_limit" else float(raw))
    if key in ("classes", "samples", "data_seed", "time_steps", "trials", "seed", "backbone_epochs",
               "sc_epochs", "finetune_epochs", "batch_size"):
        return int(raw)
    if key in ("train_p", "backbone_lr", "sc_lr", "finetune_lr"):
        return float(raw)
    return raw


# -- data and models ----------------------------------------------------------


def load_data(cfg: ExperimentConfig) -> SmallImageDataset:
    if cfg.dataset is DatasetKind.SMALL_IMAGES:
        return load_dataset(cfg.dataset_path)
    return generate_synthetic(cfg.classes, cfg.samples, cfg.data_seed)


def build_sc(cfg: ExperimentConfig, backbone: SplitClassifier):
    geometry = Geometry(*backbone.feature_shape)
    seed = derive_seed(cfg.seed, 1)
    if cfg.variant.is_snn:
        return SnnSc(geometry, cfg.time_steps, cfg.variant.readout, seed=seed % 2**32)
    if cfg.variant is Variant.CNN_QUANT:
        return CnnQuantSc(geometry, cfg.time_steps, seed=seed % 2**32)
    return None


def train_backbone(cfg: ExperimentConfig, data: SmallImageDataset, force: bool = False) -> SplitClassifier:
    """Train (or load) the shared backbone for this data/seed."""
    if cfg.backbone_path.exists() and not force:
        return load_system(cfg.backbone_path)[0].backbone
    x, y = data.train
    backbone = SplitClassifier(in_channels=x.shape[1], image_size=x.shape[2], num_classes=data.num_classes,
                               seed=cfg.seed)
    system = SplitSystem(backbone)
    tcfg = TrainConfig(Stage.BACKBONE, alpha=None, epochs=cfg.backbone_epochs, batch_size=cfg.batch_size,
                       lr=cfg.backbone_lr, lr_decay=(0.5, max(1, cfg.backbone_epochs // 3)), seed=cfg.seed)
    metrics = MetricsLog(cfg.root / "metrics" / f"{cfg.backbone_path.stem}.csv")
    train_stage(system, x, y, tcfg, metrics=metrics)
    cfg.backbone_path.parent.mkdir(parents=True, exist_ok=True)
    save_system(cfg.backbone_path, system, {"stages": [Stage.BACKBONE.value]})
    return backbone


def train_variant(cfg: ExperimentConfig, data: SmallImageDataset | None = None,
                  force: bool = False) -> SplitSystem:
    """SC-only then joint fine-tuning for one variant; returns the trained system."""
    if cfg.checkpoint_path.exists() and not force:
        return load_system(cfg.checkpoint_path)[0]
    data = data if data is not None else load_data(cfg)
    if cfg.variant in (Variant.SEPARATE, Variant.NO_SC):
        return SplitSystem(train_backbone(cfg, data, force))
    x, y = data.train
    channel = ChannelConfig(cfg.channel, cfg.train_p, derive_seed(cfg.seed, 2))
    # the SC-only stage is checkpointed on its own so variants that differ
    # only in fine-tuning (or skip it) share it
    stage1 = cfg.with_(finetune_epochs=0)
    if stage1.checkpoint_path.exists() and not force:
        system = load_system(stage1.checkpoint_path)[0]
    else:
        backbone = train_backbone(cfg, data)
        system = SplitSystem(backbone, build_sc(cfg, backbone))
        metrics = MetricsLog(cfg.root / "metrics" / f"{stage1.checkpoint_path.stem}.csv")
        train_stage(system, x, y, TrainConfig(
            Stage.SC_ONLY, alpha=cfg.alpha, epochs=cfg.sc_epochs, batch_size=cfg.batch_size, lr=cfg.sc_lr,
            lr_decay=(0.5, max(1, cfg.sc_epochs // 2)), channel=channel, seed=cfg.seed), {Stage.BACKBONE},
            metrics)
        _save(stage1, system, [Stage.BACKBONE, Stage.SC_ONLY])
    if cfg.finetune_epochs > 0:
        metrics = MetricsLog(cfg.root / "metrics" / f"{cfg.checkpoint_path.stem}.csv")
        train_stage(system, x, y, TrainConfig(
            Stage.JOINT_FINETUNE, alpha=cfg.alpha, epochs=cfg.finetune_epochs, batch_size=cfg.batch_size,
            lr=cfg.finetune_lr, lr_decay=(0.5, max(1, cfg.finetune_epochs)),
            channel=channel.with_(seed=derive_seed(cfg.seed, 3)), seed=cfg.seed + 1),
            {Stage.BACKBONE, Stage.SC_ONLY}, metrics)
        _save(cfg, system, [Stage.BACKBONE, Stage.SC_ONLY, Stage.JOINT_FINETUNE])
    return system


def _save(cfg: ExperimentConfig, system: SplitSystem, stages) -> None:
    cfg.checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    save_system(cfg.checkpoint_path, system, {"stages": [s.value for s in stages], "alpha": cfg.alpha,
                                              "train_p": cfg.train_p, "sc_epochs": cfg.sc_epochs,
                                              "finetune_epochs": cfg.finetune_epochs})


def load_trained(cfg: ExperimentConfig) -> SplitSystem:
    path = cfg.checkpoint_path
    if not path.exists():
        raise CheckpointError(f"no checkpoint for {cfg.variant.value} at {path}; "
                              f"run `snnsc train` with the same configuration first")
    system, _ = load_system(path)
    if cfg.variant in (Variant.SEPARATE, Variant.NO_SC):
        system = SplitSystem(system.backbone)
    return system


# -- evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class BitBudget:
    bits_per_inference: int
    channel_ratio: float      # feature elements / transmitted code elements per step
    compression_ratio: float  # f32 bits of the feature / transmitted channel bits


def bit_budget(system: SplitSystem, variant: Variant) -> BitBudget:
    shape = system.backbone.feature_shape
    n_feat = int(np.prod(shape))
    if variant is Variant.NO_SC:
        return BitBudget(32 * n_feat, 1.0, 1.0)
    if variant is Variant.SEPARATE:
        bits = SeparateCoding(shape).bits_per_inference
        return BitBudget(bits, 1.0, 32 * n_feat / bits)
    g = system.sc.geometry
    bits = system.sc.bits_per_inference
    return BitBudget(bits, n_feat / (g.c2 * g.h * g.w), 32 * n_feat / bits)


def assert_bit_parity(snn: SplitSystem, cnn: SplitSystem) -> int:
    """Paired SNN/CNN comparisons must put the same number of bits on the channel."""
    a, b = snn.sc.bits_per_inference, cnn.sc.bits_per_inference
    if a != b or snn.sc.time_steps != cnn.sc.n_bits:
        raise ValueError(f"bit budgets differ: SNN T={snn.sc.time_steps} ({a} bits), "
                         f"CNN n={cnn.sc.n_bits} ({b} bits)")
    return a


def evaluate_point(system: SplitSystem, variant: Variant, images: np.ndarray, labels: np.ndarray,
                   channel: ChannelConfig) -> tuple[float, float]:
    """``(accuracy, decode_failure_rate)`` for one channel realization."""
    if variant is Variant.NO_SC:
        return accuracy(system, images, labels), 0.0
    if variant is not Variant.SEPARATE:
        return accuracy(system, images, labels, Channel(channel)), 0.0
    coder = SeparateCoding(system.backbone.feature_shape)
    ch = Channel(channel)
    system.eval()
    correct, fails = 0, 0
    with no_grad():
        for i in range(0, len(images), 250):
            f = system.features(images[i:i + 250])
            res = coder.transmit(f, ch)
            logits = system.backbone.cloud(res.features.astype(f.dtype))
            correct += int(np.sum(logits.argmax(axis=1) == labels[i:i + 250]))
            fails += int(np.sum(~res.ok))
    return correct / len(images), fails / len(images)


SWEEP_COLUMNS = ("variant", "dataset", "channel", "train_p", "alpha", "time_steps", "test_p", "trials",
                 "mean_acc", "std_acc", "min_acc", "max_acc", "decode_fail_rate", "bits_per_inference",
                 "channel_ratio", "compression_ratio")


def sweep_rows(cfg: ExperimentConfig, system: SplitSystem | None = None,
               data: SmallImageDataset | None = None) -> list[dict]:
    system = system if system is not None else load_trained(cfg)
    data = data if data is not None else load_data(cfg)
    x, y = data.test
    if cfg.eval_limit is not None:
        x, y = x[:cfg.eval_limit], y[:cfg.eval_limit]
    budget = bit_budget(system, cfg.variant)
    rows = []
    for p in cfg.test_p_grid:
        n_runs = 1 if (p == 0.0 or cfg.variant is Variant.NO_SC) else cfg.trials
        accs, fails = [], []
        for trial in range(n_runs):
            ch = ChannelConfig(cfg.channel, p, derive_seed(cfg.seed, trial, round(p * 1e6)))
            a, f = evaluate_point(system, cfg.variant, x, y, ch)
            accs.append(a)
            fails.append(f)
        log.info("%s p=%.3f acc=%.4f", cfg.variant.value, p, float(np.mean(accs)))
        rows.append({
            "variant": cfg.variant.value, "dataset": cfg.dataset.value, "channel": cfg.channel.value,
            "train_p": cfg.train_p, "alpha": cfg.alpha, "time_steps": cfg.time_steps, "test_p": p,
            "trials": cfg.trials, "mean_acc": float(np.mean(accs)), "std_acc": float(np.std(accs)),
            "min_acc": float(np.min(accs)), "max_acc": float(np.max(accs)),
            "decode_fail_rate": float(np.mean(fails)), "bits_per_inference": budget.bits_per_inference,
            "channel_ratio": budget.channel_ratio, "compression_ratio": budget.compression_ratio,
        })
    return rows


def _cell(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def rows_to_csv(rows: list[dict], columns=SWEEP_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def run_sweep(cfg: ExperimentConfig, out_csv: str | Path, system: SplitSystem | None = None,
              data: SmallImageDataset | None = None) -> list[dict]:
    rows = sweep_rows(cfg, system, data)
    out = Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rows_to_csv(rows))
    return rows


def ablate(cfg: ExperimentConfig, out_csv: str | Path, alphas=(0.25, 0.5, 0.75, 1.0),
           variants: tuple[Variant, ...] | None = None, data: SmallImageDataset | None = None) -> list[dict]:
    """Train (if needed) and sweep each alpha, or each readout variant when ``variants`` is given."""
    data = data if data is not None else load_data(cfg)
    if variants:
        configs = [cfg.with_(variant=v) for v in variants]
    else:
        configs = [cfg.with_(variant=Variant.SNN_IHF, alpha=a) for a in alphas]
    rows = []
    for c in configs:
        system = train_variant(c, data)
        rows += sweep_rows(c, system, data)
    out = Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rows_to_csv(rows))
    return rows


def code_entropy(cfg: ExperimentConfig, system: SplitSystem | None = None,
                 data: SmallImageDataset | None = None):
    system = system if system is not None else load_trained(cfg)
    data = data if data is not None else load_data(cfg)
    return code_statistics(system, data.test[0])


# -- reports ------------------------------------------------------------------


class ReportError(ValueError):
    pass


REQUIRED_COLUMNS = ("variant", "test_p", "trials", "mean_acc", "std_acc")


def read_sweep_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ReportError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = []
        for i, r in enumerate(reader, start=2):
            try:
                r["test_p"] = float(r["test_p"])
                r["mean_acc"] = float(r["mean_acc"])
                r["std_acc"] = float(r["std_acc"])
                r["trials"] = int(r["trials"])
            except (TypeError, ValueError) as exc:
                raise ReportError(f"{path}:{i}: malformed row ({exc})") from exc
            rows.append(r)
    if not rows:
        raise ReportError(f"{path}: no data rows")
    return rows


def _series_key(r: dict) -> str:
    parts = [r["variant"]]
    if r.get("alpha") not in (None, "", "none"):
        parts.append(f"a{r['alpha']}")
    if r.get("train_p") not in (None, ""):
        parts.append(f"tp{r['train_p']}")
    if r.get("channel"):
        parts.append(r["channel"])
    return "_".join(parts)


def find_cliff(series: list[tuple[float, float]], near: float = 0.03, drop: float = 0.20) -> float | None:
    """Largest grid p* with every p <= p* within ``near`` of p=0 and the next point ``drop`` below."""
    pts = sorted(series)
    base = pts[0][1]
    p_star = None
    for i, (_, acc) in enumerate(pts):
        if base - acc > near:
            break
        p_star = i
    if p_star is None or p_star + 1 >= len(pts):
        return None
    if base - pts[p_star + 1][1] >= drop:
        return pts[p_star][0]
    return None


def report(csv_paths, out_dir: str | Path) -> dict:
    """Write one series file per curve plus ``summary.txt``; returns the summary fields."""
    series: dict[str, list[tuple[float, float, float]]] = {}
    for path in csv_paths:
        for r in read_sweep_csv(path):
            series.setdefault(_series_key(r), []).append((r["test_p"], r["mean_acc"], r["std_acc"]))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for key, pts in series.items():
        pts.sort()
        (out / f"series_{key}.csv").write_text(rows_to_csv(
            [{"p": p, "mean": m, "std": s} for p, m, s in pts], ("p", "mean", "std")))
    grids = {key: tuple(p for p, _, _ in pts) for key, pts in series.items()}
    summary: dict = {"series": sorted(series), "aligned_grids": len(set(grids.values())) == 1,
                     "monotone": {k: pts[0][1] >= pts[-1][1] for k, pts in series.items()}}
    snn = [k for k in series if k.startswith("snn_ihf_") or k == "snn_ihf"]
    cnn = [k for k in series if k.startswith("cnn_quant")]
    if snn and cnn:
        a = {p: m for p, m, _ in series[snn[0]]}
        b = {p: m for p, m, _ in series[cnn[0]]}
        high = sorted(p for p in a if p in b and p >= 0.2 - 1e-12)
        summary["snn_beats_cnn_high_p"] = bool(high) and all(a[p] >= b[p] for p in high)
    for k in series:
        if k.startswith("separate"):
            summary["separate_cliff_p"] = find_cliff([(p, m) for p, m, _ in series[k]])
    lines = []
    for key in sorted(series):
        pts = series[key]
        lines.append(f"{key}: " + ", ".join(f"p={p:g} {m:.4f}±{s:.4f}" for p, m, s in pts))
    lines.append(f"p grids aligned across series: {summary['aligned_grids']}")
    if "snn_beats_cnn_high_p" in summary:
        lines.append(f"SNN-SC >= CNN-quant at every p >= 0.2: {summary['snn_beats_cnn_high_p']}")
    if "separate_cliff_p" in summary:
        lines.append(f"separate coding cliff after p* = {summary['separate_cliff_p']}")
    for key, ok in sorted(summary["monotone"].items()):
        if not ok:
            lines.append(f"warning: {key} is more accurate at its largest p than at its smallest")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


def config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, enum.Enum):
            d[k] = v.value
    return d


__all__ = [
    "Variant", "DatasetKind", "ExperimentConfig", "BitBudget", "bit_budget", "assert_bit_parity",
    "load_data", "train_backbone", "train_variant", "load_trained", "evaluate_point", "sweep_rows",
    "run_sweep", "ablate", "report", "read_sweep_csv", "find_cliff", "ReportError", "SWEEP_COLUMNS",
    "code_entropy", "config_dict", "DEFAULT_GRID",
]
