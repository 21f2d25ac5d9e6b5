"""Desk-scale N-MNIST run: 2312-100-10, 5 epochs on a 10k-sample subset.

Expects ``<data-dir>/{Train,Test}/<digit>/*.bin``.

    python scripts/desk_nmnist.py --data-dir data/nmnist --out-dir runs/desk_nmnist
"""

import argparse
import logging
from pathlib import Path

from spikebp.trainer import build_streams, read_config, train

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=HERE / "configs" / "desk_nmnist.txt")
    ap.add_argument("--data-dir", type=Path, default=Path("data/nmnist"))
    ap.add_argument("--out-dir", type=Path, default=Path("runs/desk_nmnist"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = read_config(args.config)
    train_s, test_s = build_streams(cfg, args.data_dir)
    _, rows = train(cfg, train_s, test_s, args.out_dir, progress=True)
    print(f"test accuracy {rows[-1]['test_accuracy']:.4f} after {len(rows)} epochs")


if __name__ == "__main__":
    main()
