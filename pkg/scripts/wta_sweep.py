"""Accuracy against hidden-layer lateral inhibition at reduced scale.

Trains 784-100-10 for a few epochs on a training subset for each hidden mu
and writes one ``mu,accuracy`` row per setting.

    python scripts/wta_sweep.py --data-dir data/mnist --out runs/wta_sweep.csv
"""

import argparse
import csv
import logging
from pathlib import Path

from spikebp.trainer import TrainConfig, build_streams, train

MUS = (0.0, -0.2, -0.4, -0.6, -0.8, -1.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", type=Path, default=Path("data/mnist"))
    ap.add_argument("--out", type=Path, default=Path("runs/wta_sweep.csv"))
    ap.add_argument("--mus", type=float, nargs="+", default=MUS)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--train-limit", type=int, default=10_000)
    ap.add_argument("--hidden", type=int, default=100)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["mu_hidden", "test_accuracy"])
        for mu in args.mus:
            cfg = TrainConfig(hidden=(args.hidden,), mus=(mu, -1.0), epochs=args.epochs,
                              train_limit=args.train_limit, eval_every=0, checkpoint_every=0)
            train_s, test_s = build_streams(cfg, args.data_dir)
            _, rows = train(cfg, train_s, test_s, args.out.parent / f"wta_mu{mu:+.1f}")
            out.writerow([mu, rows[-1]["test_accuracy"]])
            fh.flush()
            print(f"mu {mu:+.1f}: accuracy {rows[-1]['test_accuracy']:.4f}")


if __name__ == "__main__":
    main()
