"""Command line: ``spikebp {train,eval,gradcheck,encode-preview}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from spikebp import data as dio
from spikebp.trainer import (
    NumericFailure,
    TrainConfig,
    build_streams,
    evaluate_checkpoint,
    read_config,
    read_metrics,
    trailing_accuracy,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-5

log = logging.getLogger("spikebp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--dataset", choices=("mnist", "nmnist"))
    p.add_argument("--data-dir", type=Path)
    p.add_argument("--seed", type=int, help="parameter-initialisation seed")
    p.add_argument("--train-limit", type=int)
    p.add_argument("--test-limit", type=int)
    p.add_argument("--n-jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spikebp", description="Spike-trace backpropagation for event-driven SNNs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a network, writing metrics and checkpoints")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out-dir", type=Path, default=Path("runs/latest"))
    p.add_argument("--checkpoint", type=Path, help="resume from these parameters")
    p.add_argument("--avg-window", type=int, default=1, help="report mean accuracy over the last k epochs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test set")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--metrics", type=Path, help="metrics.csv to summarise with --avg-window")
    p.add_argument("--avg-window", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic derivatives")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=100)

    p = sub.add_parser("encode-preview", help="print one encoded event stream as text")
    _common(p)
    p.add_argument("--index", type=int, default=0, help="sample index")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--duration", type=int, default=50_000, help="presentation length in µs (MNIST)")
    p.add_argument("--limit", type=int, default=50, help="max events to print")
    return parser


def _config(args) -> TrainConfig:
    over = {}
    mapping = {
        "dataset": "dataset", "seed": "seed", "train_limit": "train_limit",
        "test_limit": "test_limit", "n_jobs": "n_jobs", "epochs": "epochs",
    }
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            over[key] = val
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        return read_config(args.config, **over)
    return TrainConfig(**over)


def _data_dir(args, cfg: TrainConfig) -> Path:
    if args.data_dir is not None:
        return args.data_dir
    return Path("data") / cfg.dataset


def cmd_train(args) -> int:
    cfg = _config(args)
    params = None
    if args.checkpoint is not None:
        from spikebp.network import load_checkpoint

        params, _ = load_checkpoint(args.checkpoint)
    train_s, test_s = build_streams(cfg, _data_dir(args, cfg))
    _, rows = train(cfg, train_s, test_s, args.out_dir, params=params, progress=args.verbose)
    if rows:
        acc = trailing_accuracy(rows, args.avg_window)
        print(f"epochs {len(rows)}  final loss {rows[-1]['train_loss']:.5f}  accuracy {acc}")
    else:
        print(f"wrote initial checkpoint to {args.out_dir / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise UsageError("eval: --checkpoint is required")
    if not args.checkpoint.exists():
        raise dio.DataError(f"checkpoint not found: {args.checkpoint}")
    cfg = _config(args)
    _, test_s = build_streams(cfg, _data_dir(args, cfg))
    res = evaluate_checkpoint(args.checkpoint, test_s, cfg.n_jobs)
    print(f"accuracy {res.accuracy:.4f} on {res.n} samples ({res.degenerate} with silent output)")
    for label, row in enumerate(res.confusion):
        print(f"  {label}: " + " ".join(f"{int(c):5d}" for c in row))
    if args.metrics is not None:
        print(f"trailing accuracy over {args.avg_window} epochs: {trailing_accuracy(read_metrics(args.metrics), args.avg_window)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from spikebp.gradcheck import run_suite

    rep = run_suite(args.configs, args.seed)
    for kind, err in sorted(rep.per_kind.items()):
        print(f"{kind:10s} max rel error {err:.3e}")
    print(f"max relative error {rep.max_rel_error:.3e} over {rep.n_checks} checks ({rep.n_configs} configurations)")
    if rep.max_rel_error >= GRADCHECK_TOL:
        print(f"worst: {rep.worst}")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_encode_preview(args) -> int:
    cfg = _config(args)
    dd = _data_dir(args, cfg)
    if cfg.dataset == "mnist":
        images = dio.load_mnist(dd, args.split)
        if not 0 <= args.index < len(images):
            raise UsageError(f"--index {args.index} out of range 0..{len(images) - 1}")
        pix = images.images[args.index]
        if cfg.permute:
            pix = dio.permute(pix, dio.make_permutation(cfg.perm_seed, pix.size))
        seed = cfg.data_seed if args.split == "train" else cfg.eval_seed
        events = dio.poisson_encode(pix, dio.EncoderConfig(cfg.total_rate, args.duration, seed), args.index, 0)
        label = int(images.labels[args.index])
    else:
        samples = dio.load_nmnist(dd, args.split, limit=None)
        if not 0 <= args.index < len(samples):
            raise UsageError(f"--index {args.index} out of range 0..{len(samples) - 1}")
        events, label = samples[args.index].events, samples[args.index].label
    print(f"# dataset={cfg.dataset} split={args.split} index={args.index} label={label} events={events.shape[0]}")
    print("time_us\tsource\tchannel")
    for e in events[: args.limit]:
        print(f"{int(e['time'])}\t{int(e['source'])}\t{int(e['channel'])}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "encode-preview": cmd_encode_preview,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (dio.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
