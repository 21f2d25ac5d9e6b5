"""MNIST IDX and N-MNIST AER readers, pixel permutation, Poisson rate encoding."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from spikebp.dynamics import EVENT_DTYPE, make_stream

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
NMNIST_SIDE = 34
NMNIST_PIXELS = NMNIST_SIDE * NMNIST_SIDE
NMNIST_INPUTS = 2 * NMNIST_PIXELS

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(ValueError):
    """A dataset file is missing, truncated or malformed."""


# ---------------------------------------------------------------------------
# MNIST


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # (784,) in [0, 1]
    label: int


@dataclass
class ImageSet:
    images: np.ndarray  # (n, 784) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i) -> ImageSample:
        return ImageSample(self.images[i], int(self.labels[i]))

    def subset(self, n: Optional[int]) -> "ImageSet":
        if n is None or n >= len(self):
            return self
        return ImageSet(self.images[:n], self.labels[:n])


def _read_bytes(path: Path) -> bytes:
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def read_idx(image_path, label_path) -> ImageSet:
    image_path, label_path = Path(image_path), Path(label_path)
    img = _read_bytes(image_path)
    lab = _read_bytes(label_path)
    if len(img) < 16:
        raise DataError(f"{image_path}: truncated header")
    magic, count, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{image_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(img) != 16 + count * rows * cols:
        raise DataError(f"{image_path}: expected {count}x{rows}x{cols} pixels, file has {len(img) - 16} bytes")
    if len(lab) < 8:
        raise DataError(f"{label_path}: truncated header")
    lmagic, lcount = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataError(f"{label_path}: bad magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(lab) != 8 + lcount:
        raise DataError(f"{label_path}: expected {lcount} labels, file has {len(lab) - 8} bytes")
    if lcount != count:
        raise DataError(f"{image_path} has {count} images but {label_path} has {lcount} labels")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataError(f"{label_path}: label out of range 0-9")
    return ImageSet(pixels.astype(np.float64) / 255.0, labels)


def load_mnist(data_dir, split: str) -> ImageSet:
    img, lab = MNIST_FILES[split]
    return read_idx(Path(data_dir) / img, Path(data_dir) / lab)


def make_permutation(seed: int, n: int = 784) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def permute(pixels: np.ndarray, permutation: np.ndarray) -> np.ndarray:
    """Reorder the last axis: ``out[..., i] = pixels[..., permutation[i]]``."""
    perm = np.asarray(permutation)
    n = pixels.shape[-1]
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("permutation is not a bijection on the pixel indices")
    return pixels[..., perm]


def inverse_permutation(permutation: np.ndarray) -> np.ndarray:
    inv = np.empty_like(permutation)
    inv[permutation] = np.arange(permutation.size)
    return inv


@dataclass(frozen=True)
class EncoderConfig:
    total_rate: float = 5000.0  # events/s over the whole image
    duration: int = 50_000  # µs
    rng_seed: int = 0

    def __post_init__(self):
        if self.total_rate <= 0 or self.duration <= 0:
            raise ValueError("total_rate and duration must be positive")


def poisson_encode(pixels: np.ndarray, cfg: EncoderConfig, sample_index: int = 0, presentation: int = 0) -> np.ndarray:
    """Independent Poisson trains per pixel, rates summing to ``cfg.total_rate``.

    Drawn as one Poisson total split multinomially over pixels, with uniform
    integer-µs times; the stream is seeded by (seed, sample, presentation).
    An all-zero image yields an empty stream.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    total = pixels.sum()
    if total <= 0:
        log.warning("sample %d: blank image, no events", sample_index)
        return np.empty(0, dtype=EVENT_DTYPE)
    rng = np.random.default_rng([cfg.rng_seed, sample_index, presentation])
    n = rng.poisson(cfg.total_rate * cfg.duration * 1e-6)
    per_pixel = rng.multinomial(n, pixels / total)
    sources = np.repeat(np.arange(pixels.size), per_pixel)
    times = rng.integers(0, cfg.duration, size=n)
    order = np.lexsort((sources, times))
    return make_stream(times[order], sources[order])


# ---------------------------------------------------------------------------
# N-MNIST


@dataclass
class EventSample:
    events: np.ndarray  # EVENT_DTYPE, source = y*34 + x, channel = polarity
    label: int = -1
    total_duration: int = 0


def decode_nmnist(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode 5-byte records: x, y, [polarity:1 | t[22:16]:7], t[15:8], t[7:0]."""
    if len(data) % 5:
        raise DataError(f"{name}: length {len(data)} is not a multiple of 5 (truncated record)")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, 5).astype(np.int64)
    x, y = rec[:, 0], rec[:, 1]
    bad = (x >= NMNIST_SIDE) | (y >= NMNIST_SIDE)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"{name}: record {i} has coordinates ({x[i]}, {y[i]}) outside the 34x34 frame")
    pol = rec[:, 2] >> 7
    ts = ((rec[:, 2] & 0x7F) << 16) | (rec[:, 3] << 8) | rec[:, 4]
    return make_stream(ts, y * NMNIST_SIDE + x, pol)


def encode_nmnist(events: np.ndarray) -> bytes:
    t = events["time"].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= 1 << 23):
        raise ValueError("timestamps must fit in 23 bits")
    src = events["source"].astype(np.int64)
    out = np.empty((events.shape[0], 5), dtype=np.uint8)
    out[:, 0] = src % NMNIST_SIDE
    out[:, 1] = src // NMNIST_SIDE
    out[:, 2] = (events["channel"].astype(np.int64) << 7) | (t >> 16)
    out[:, 3] = (t >> 8) & 0xFF
    out[:, 4] = t & 0xFF
    return out.tobytes()


def read_nmnist(path, label: Optional[int] = None) -> EventSample:
    """Read one N-MNIST ``.bin`` file; the label defaults to the parent directory name."""
    path = Path(path)
    events = decode_nmnist(_read_bytes(path), str(path))
    if events.size and np.any(np.diff(events["time"]) < 0):
        log.warning("%s: non-monotone timestamps, re-sorting", path)
        events = events[np.argsort(events["time"], kind="stable")]
    if label is None:
        label = int(path.parent.name) if path.parent.name.isdigit() else -1
    dur = int(events["time"][-1]) + 1 if events.size else 0
    return EventSample(events, label, dur)


def load_nmnist(data_dir, split: str, limit: Optional[int] = None, seed: int = 0) -> list[EventSample]:
    """Load ``<data_dir>/{Train,Test}/<digit>/*.bin``; ``limit`` takes a seeded class-mixed subset."""
    root = Path(data_dir) / {"train": "Train", "test": "Test"}[split]
    files = sorted(root.glob("[0-9]/*.bin"))
    if not files:
        raise DataError(f"{root}: no N-MNIST .bin files found")
    if limit is not None and limit < len(files):
        idx = np.sort(np.random.default_rng(seed).choice(len(files), size=limit, replace=False))
        files = [files[i] for i in idx]
    return [read_nmnist(f) for f in files]


def flatten_channels(events: np.ndarray, per_channel: int = NMNIST_PIXELS) -> np.ndarray:
    """Map (channel, source) to one input index ``channel * per_channel + source``."""
    out = events.copy()
    out["source"] = events["channel"].astype(np.int64) * per_channel + events["source"]
    out["channel"] = 0
    return out


def pick_window(events: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """A random run of ``count`` consecutive events, shifted to start at t=0.

    Streams shorter than ``count`` are returned whole (with a warning).
    """
    n = events.shape[0]
    if n == 0:
        raise ValueError("cannot pick a window from an empty stream")
    if n <= count:
        if n < count:
            log.warning("stream has %d < %d events, using all of it", n, count)
        win = events.copy()
    else:
        start = int(rng.integers(0, n - count + 1))
        win = events[start : start + count].copy()
    win["time"] -= win["time"][0]
    return win
