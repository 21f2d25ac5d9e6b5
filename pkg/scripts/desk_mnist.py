"""Desk-scale permutation-invariant MNIST run: 784-100-10, 20 epochs.

    python scripts/desk_mnist.py --data-dir data/mnist --out-dir runs/desk_mnist
"""

import argparse
import logging
import time
from pathlib import Path

from spikebp.trainer import build_streams, read_config, train

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=HERE / "configs" / "desk_mnist.txt")
    ap.add_argument("--data-dir", type=Path, default=Path("data/mnist"))
    ap.add_argument("--out-dir", type=Path, default=Path("runs/desk_mnist"))
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--target", type=float, default=0.96)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    over = {} if args.epochs is None else {"epochs": args.epochs}
    cfg = read_config(args.config, **over)
    t0 = time.perf_counter()
    train_s, test_s = build_streams(cfg, args.data_dir)
    _, rows = train(cfg, train_s, test_s, args.out_dir, progress=True)
    acc = rows[-1]["test_accuracy"]
    verdict = "meets" if acc >= args.target else "misses"
    print(f"test accuracy {acc:.4f} after {len(rows)} epochs ({verdict} target {args.target}), "
          f"{(time.perf_counter() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
