"""IDX file ingestion for MNIST-family datasets and minibatch iteration."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

DATA_ROOT_ENV = "CIGN_DATA_ROOT"

FASHION_CLASSES = (
    "T-shirt", "Trouser", "Pullover", "Dress", "Coat",
    "Sandal", "Shirt", "Sneaker", "Bag", "Ankle Boot",
)
MNIST_CLASSES = tuple(str(i) for i in range(10))

FILE_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class FormatError(ValueError):
    """Malformed IDX payload."""


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, 28, 28, 1) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, n: int) -> "LabeledDataset":
        return LabeledDataset(self.images[:n].copy(), self.labels[:n].copy(), self.split)


def _maybe_gunzip(data: bytes) -> bytes:
    return gzip.decompress(data) if data[:2] == GZIP_MAGIC else data


def _header(data: bytes, ndim: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(data) < need:
        raise FormatError(f"{what}: truncated header ({len(data)} bytes, need {need})")
    return struct.unpack(">" + "I" * (1 + ndim), data[:need])


def parse_idx_images(data: bytes) -> np.ndarray:
    data = _maybe_gunzip(data)
    (magic,) = struct.unpack(">I", data[:4]) if len(data) >= 4 else (None,)
    if magic == LABEL_MAGIC:
        raise FormatError("magic: label file passed as images (0x00000801)")
    if magic != IMAGE_MAGIC:
        raise FormatError(f"magic: expected 0x{IMAGE_MAGIC:08x} for images, got {magic!r}")
    _, n, rows, cols = _header(data, 3, "images")
    if (rows, cols) != (28, 28):
        raise FormatError(f"dims: expected 28x28 images, got {rows}x{cols}")
    payload = data[16:]
    if len(payload) != n * rows * cols:
        raise FormatError(
            f"payload: expected {n * rows * cols} pixel bytes for {n} images, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def parse_idx_labels(data: bytes) -> np.ndarray:
    data = _maybe_gunzip(data)
    (magic,) = struct.unpack(">I", data[:4]) if len(data) >= 4 else (None,)
    if magic == IMAGE_MAGIC:
        raise FormatError("magic: image file passed as labels (0x00000803)")
    if magic != LABEL_MAGIC:
        raise FormatError(f"magic: expected 0x{LABEL_MAGIC:08x} for labels, got {magic!r}")
    _, n = _header(data, 1, "labels")
    payload = data[8:]
    if len(payload) != n:
        raise FormatError(f"payload: expected {n} label bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8)


def parse_idx(image_bytes: bytes, label_bytes: bytes, split: str = "train") -> LabeledDataset:
    raw = parse_idx_images(image_bytes)
    labels = parse_idx_labels(label_bytes)
    if raw.shape[0] != labels.shape[0]:
        raise FormatError(f"count: {raw.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size and labels.max() >= 10:
        raise FormatError(f"labels: class id {int(labels.max())} out of range [0, 10)")
    images = (raw.astype(np.float32) / 255.0)[..., None]
    return LabeledDataset(images, labels.astype(np.int64), split)


def to_idx(dataset: LabeledDataset) -> tuple[bytes, bytes]:
    """Serialize back to (image bytes, label bytes), uncompressed."""
    pixels = np.rint(dataset.images[..., 0] * 255.0).astype(np.uint8)
    n = len(dataset)
    img = struct.pack(">IIII", IMAGE_MAGIC, n, 28, 28) + pixels.tobytes()
    lab = struct.pack(">II", LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return img, lab


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no IDX file named {stem}[.gz] under {directory}")


def load_split(directory: str | os.PathLike, split: str = "train") -> LabeledDataset:
    directory = Path(directory)
    img_stem, lab_stem = FILE_NAMES[split]
    img = _find(directory, img_stem).read_bytes()
    lab = _find(directory, lab_stem).read_bytes()
    return parse_idx(img, lab, split)


def dataset_dir(name: str, root: str | os.PathLike | None = None) -> Path:
    """``<root>/<name>``, with root defaulting to $CIGN_DATA_ROOT."""
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise FileNotFoundError(f"dataset root not given and ${DATA_ROOT_ENV} is unset")
    return Path(root) / name


def batches(dataset: LabeledDataset, batch_size: int, seed: int, epoch: int):
    """Yield (images, labels) minibatches in an order fixed by (seed, epoch).

    The final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def make_synthetic(n: int, seed: int = 0, split: str = "train", noise: float = 0.25) -> LabeledDataset:
    """Class-conditional 28x28 images quantized to bytes, MNIST-shaped.

    Each class is a fixed random blob pattern; samples add jitter and noise.
    Meant for smoke runs and tests when the real files are not available.
    """
    rng = np.random.default_rng(seed)
    proto_rng = np.random.default_rng(12345)
    yy, xx = np.mgrid[0:28, 0:28]
    protos = np.zeros((10, 28, 28))
    for c in range(10):
        for _ in range(3):
            cy, cx = proto_rng.uniform(6, 22, size=2)
            s = proto_rng.uniform(2.0, 4.5)
            protos[c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        protos[c] /= protos[c].max()
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    imgs = np.empty((n, 28, 28))
    for i, c in enumerate(labels):
        dy, dx = rng.integers(-2, 3, size=2)
        img = np.roll(np.roll(protos[c], dy, axis=0), dx, axis=1)
        imgs[i] = np.clip(img + noise * rng.standard_normal((28, 28)), 0.0, 1.0)
    pixels = np.rint(imgs * 255).astype(np.uint8)
    images = (pixels.astype(np.float32) / 255.0)[..., None]
    return LabeledDataset(images, labels.astype(np.int64), split)
