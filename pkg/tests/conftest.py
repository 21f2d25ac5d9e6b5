import struct

import numpy as np
import pytest


def write_mnist(root, n_train=60, n_test=30, seed=0):
    """Tiny IDX files of two-blob digits that a small net can separate."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for split, n, (img_name, lab_name) in (
        ("train", n_train, ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")),
        ("test", n_test, ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")),
    ):
        labels = rng.integers(0, 10, n).astype(np.uint8)
        imgs = np.zeros((n, 28, 28), dtype=np.uint8)
        for i, y in enumerate(labels):
            r = 2 + 2 * int(y)
            imgs[i, r:r + 3, 4:24] = rng.integers(150, 256, (3, 20))
        (root / img_name).write_bytes(struct.pack(">IIII", 2051, n, 28, 28) + imgs.tobytes())
        (root / lab_name).write_bytes(struct.pack(">II", 2049, n) + labels.tobytes())
    return root


@pytest.fixture
def mnist_dir(tmp_path):
    return write_mnist(tmp_path / "mnist")
