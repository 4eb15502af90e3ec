"""Command-line interface: ``snnsc <subcommand> [flags]``.

Every subcommand accepts ``--config FILE``: a flat ``key = value`` file
(``#`` comments allowed) whose keys are flag names with underscores.
Values from the file override values given as flags.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .channel import ChannelConfig
from .checkpoint import CheckpointError, load_system
from .data import generate_synthetic, save_dataset

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("snnsc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_EXPERIMENT_FLAGS = {
    "variant": (str, "snn_ihf", "snn_ihf | snn_if | snn_ihfm | cnn_quant | separate | no_sc"),
    "dataset": (str, "synthetic_blobs", "synthetic_blobs | small_images"),
    "dataset_path": (str, None, "SIDS file for --dataset small_images"),
    "classes": (int, 10, "synthetic classes"),
    "samples": (int, 1200, "synthetic samples per class"),
    "data_seed": (int, 0, "synthetic data seed"),
    "time_steps": (int, 4, "T for spiking variants, bits per value for cnn_quant"),
    "channel": (str, "bsc", "bsc | bec"),
    "train_p": (float, 0.15, "channel error probability during training"),
    "test_p_grid": (str, "0,0.05,0.1,0.15,0.2,0.25,0.3", "comma-separated test error probabilities"),
    "trials": (int, 10, "channel realizations per nonzero test p"),
    "seed": (int, 0, "master seed"),
    "alpha": (str, "1.0", "entropy target, or 'none' to disable the penalty"),
    "backbone_epochs": (int, 10, "backbone training epochs"),
    "backbone_lr": (float, 2e-3, "backbone learning rate"),
    "sc_epochs": (int, 20, "SC-only training epochs"),
    "sc_lr": (float, 2e-3, "SC-only learning rate"),
    "finetune_epochs": (int, 10, "joint fine-tuning epochs (0 to skip)"),
    "finetune_lr": (float, 5e-4, "joint fine-tuning learning rate"),
    "batch_size": (int, 32, "mini-batch size"),
    "eval_limit": (str, "none", "evaluate on at most this many test images"),
    "workdir": (str, "runs", "directory for checkpoints, metrics and results"),
}


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment")
    for name, (typ, default, help_) in _EXPERIMENT_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=default, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snnsc", description="Spiking semantic communication for split inference.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="flat key = value file overriding flags")
        return p

    p = cmd("gen-data", "write a synthetic dataset as a SIDS file")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--samples", type=int, default=600, help="per class")
    p.add_argument("--seed", type=int, default=0)

    p = cmd("train", "train the backbone and the configured variant")
    _add_experiment_flags(p)
    p.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")

    p = cmd("sweep", "evaluate a trained variant over the test p grid")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True, help="results CSV")

    p = cmd("ablate", "train and sweep entropy targets or readout variants")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True, help="results CSV")
    p.add_argument("--alphas", default="0.25,0.5,0.75,1.0")
    p.add_argument("--readouts", action="store_true", help="compare snn_ihf, snn_if, snn_ihfm instead")

    p = cmd("report", "turn sweep CSVs into plot series and a text summary")
    p.add_argument("csv", nargs="*")
    p.add_argument("--out", required=True, help="output directory")

    p = cmd("serve", "run the cloud side of a spiking model over TCP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5757)
    p.add_argument("--channel", default="bsc")
    p.add_argument("--p", type=float, default=0.0, help="simulated channel error probability")
    p.add_argument("--seed", type=int, default=0)

    p = cmd("infer", "classify test images through a remote server")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5757)
    p.add_argument("--dataset-path", dest="dataset_path", default=None,
                   help="SIDS file (default: synthetic data)")
    p.add_argument("--samples", type=int, default=1200, help="synthetic samples per class")
    p.add_argument("--data-seed", dest="data_seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--first-session", dest="first_session", type=int, default=1)
    return parser


def read_config_file(path: str) -> dict[str, str]:
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from exc
    return {k.replace("-", "_"): v for k, v in cp["config"].items()}


def apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    for key, raw in read_config_file(args.config).items():
        if key not in actions or key in ("config", "help"):
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        elif action.nargs == "*":
            value = raw.replace(",", " ").split()
        else:
            try:
                value = action.type(raw.strip()) if action.type else raw.strip()
            except ValueError as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {raw!r}") from exc
        setattr(args, key, value)
    return args


def experiment_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    values = {k: str(getattr(args, k)) for k in _EXPERIMENT_FLAGS if getattr(args, k, None) is not None}
    try:
        return ex.ExperimentConfig.from_mapping(values)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _cmd_gen_data(args) -> int:
    data = generate_synthetic(args.classes, args.samples, args.seed)
    save_dataset(data, args.out)
    print(f"wrote {len(data.labels)} images ({data.n_train} train) to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = experiment_config(args)
    data = ex.load_data(cfg)
    system = ex.train_variant(cfg, data, force=args.force)
    x, y = data.test
    budget = ex.bit_budget(system, cfg.variant)
    acc = ex.evaluate_point(system, cfg.variant, x, y, ChannelConfig(cfg.channel, 0.0))[0]
    out = {"checkpoint": str(cfg.checkpoint_path), "noiseless_accuracy": round(acc, 6),
           "bits_per_inference": budget.bits_per_inference, "channel_ratio": budget.channel_ratio,
           "compression_ratio": budget.compression_ratio}
    if cfg.variant.is_snn:
        stats = ex.code_entropy(cfg, system, data)
        out.update(p1=round(stats.p1, 6), entropy=round(stats.H, 6))
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = experiment_config(args)
    rows = ex.run_sweep(cfg, args.out)
    for r in rows:
        print(f"{r['variant']} p={r['test_p']:.3f} acc={r['mean_acc']:.4f}±{r['std_acc']:.4f}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = experiment_config(args)
    if args.readouts:
        rows = ex.ablate(cfg, args.out, variants=(ex.Variant.SNN_IHF, ex.Variant.SNN_IF, ex.Variant.SNN_IHFM))
    else:
        try:
            alphas = tuple(float(a) for a in args.alphas.replace(",", " ").split())
        except ValueError as exc:
            raise UsageError(f"bad --alphas: {exc}") from exc
        rows = ex.ablate(cfg, args.out, alphas=alphas)
    for r in rows:
        print(f"{r['variant']} alpha={r['alpha']} p={r['test_p']:.3f} acc={r['mean_acc']:.4f}")
    return EXIT_OK


def _cmd_report(args) -> int:
    if not args.csv:
        raise UsageError("report needs at least one CSV")
    summary = ex.report(args.csv, args.out)
    print((Path(args.out) / "summary.txt").read_text(), end="")
    return EXIT_OK if summary else EXIT_RUNTIME


def _cmd_serve(args) -> int:
    from .transport import CloudServer

    system, _ = load_system(args.checkpoint)
    server = CloudServer((args.host, args.port), system, ChannelConfig(args.channel, args.p, args.seed))
    host, port = server.server_address[:2]
    print(f"serving on {host}:{port} ({args.channel} p={args.p}, seed {args.seed})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def _cmd_infer(args) -> int:
    from .data import load_dataset
    from .transport import EdgeClient

    system, _ = load_system(args.checkpoint)
    data = load_dataset(args.dataset_path) if args.dataset_path else generate_synthetic(
        samples=args.samples, seed=args.data_seed)
    x, y = data.test
    client = EdgeClient(system, (args.host, args.port))
    n = min(args.count, len(x))
    labels = [client.infer(x[i], args.first_session + i) for i in range(n)]
    acc = float(np.mean(np.array(labels) == y[:n]))
    print(f"{n} inferences, accuracy {acc:.4f}, {client.bits_sent} payload bits in {client.frames_sent} frames")
    return EXIT_OK


_COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train, "sweep": _cmd_sweep, "ablate": _cmd_ablate,
             "report": _cmd_report, "serve": _cmd_serve, "infer": _cmd_infer}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        args = apply_config(args, parser)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ex.ReportError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
