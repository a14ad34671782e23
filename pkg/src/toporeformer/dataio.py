"""IDX dataset loading, seeded batching, synthetic clouds and CSV exports."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import BadMagic, DimMismatch, LabelOutOfRange, TruncatedFile

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
IMAGE_SIDE = 28

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 1, 28, 28) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DimMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# ------------------------------------------------------------------ IDX


def _read_header(buf: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    if len(buf) < 4:
        raise TruncatedFile(f"{path}: {len(buf)} bytes, header needs 4")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise TruncatedFile(f"{path}: header truncated")
    return struct.unpack(f">{ndim}I", buf[4:end])


def _read_payload(buf: bytes, dims, path) -> np.ndarray:
    offset = 4 + 4 * len(dims)
    expected = int(np.prod(dims, dtype=np.int64))
    got = len(buf) - offset
    if got < expected:
        raise TruncatedFile(f"{path}: payload has {got} bytes, header declares {expected}")
    if got > expected:
        raise DimMismatch(f"{path}: {got - expected} trailing bytes after declared payload")
    return np.frombuffer(buf, dtype=np.uint8, offset=offset).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    dims = _read_header(buf, IMAGES_MAGIC, 3, path)
    if dims[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise DimMismatch(f"{path}: images are {dims[1]}x{dims[2]}, expected 28x28")
    return _read_payload(buf, dims, path)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    dims = _read_header(buf, LABELS_MAGIC, 1, path)
    return _read_payload(buf, dims, path)


def load_idx(images_path, labels_path, num_classes: int | None = None,
             label_offset: int = 0, transpose: bool = False) -> Dataset:
    """Load an IDX image/label pair into a :class:`Dataset`.

    Pixels are scaled by 1/255. Labels are shifted down by ``label_offset``
    (1 for EMNIST letters, stored as 1..26). ``transpose`` fixes the EMNIST
    storage orientation. ``num_classes`` defaults to the largest label + 1.
    """
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path).astype(np.int64)
    if len(raw) != len(labels):
        raise DimMismatch(f"{len(raw)} images vs {len(labels)} labels")
    labels = labels - label_offset
    if labels.size and labels.min() < 0:
        raise LabelOutOfRange(f"label below offset {label_offset}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    if labels.size and labels.max() >= num_classes:
        raise LabelOutOfRange(f"label {labels.max()} >= {num_classes} classes")
    if transpose:
        raw = raw.transpose(0, 2, 1)
    images = raw.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(images, labels, num_classes)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise DimMismatch(f"expected (N, 28, 28) uint8 images, got {images.shape}")
    header = struct.pack(">I3I", IMAGES_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_mnist_dir(root, split: str = "train", **kwargs) -> Dataset:
    images, labels = MNIST_FILES[split]
    root = Path(root)
    return load_idx(root / images, root / labels, **kwargs)


def prepare_mnist_subset(out_dir, per_class_test: int = 100, seed: int = 0) -> Path:
    """Write the 5,000-image MNIST sample bundled with ``mlxtend`` as IDX files.

    The sample holds 500 images per digit; each class is split into
    ``per_class_test`` test images and the rest for training, using the
    standard MNIST file names under ``out_dir``.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    pixels = np.rint(x).astype(np.uint8).reshape(-1, IMAGE_SIDE, IMAGE_SIDE)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        test_idx.append(idx[:per_class_test])
        train_idx.append(idx[per_class_test:])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, parts in (("train", train_idx), ("test", test_idx)):
        idx = np.sort(np.concatenate(parts))
        img_name, lbl_name = MNIST_FILES[split]
        write_idx_images(out / img_name, pixels[idx])
        write_idx_labels(out / lbl_name, y[idx])
    return out


# -------------------------------------------------------------- batching


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    batch_size: int

    def permutation(self, n: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(n)


def batches(dataset: Dataset, plan: BatchPlan, epoch: int,
            min_size: int = 2) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield shuffled ``(images, labels)`` batches for one epoch.

    A trailing batch smaller than ``min_size`` is dropped.
    """
    order = plan.permutation(len(dataset), epoch)
    for start in range(0, len(order), plan.batch_size):
        idx = order[start:start + plan.batch_size]
        if len(idx) < min_size:
            break
        yield dataset.images[idx], dataset.labels[idx]


def batch_indices(n: int, plan: BatchPlan, epoch: int, min_size: int = 2) -> list[np.ndarray]:
    order = plan.permutation(n, epoch)
    out = [order[s:s + plan.batch_size] for s in range(0, n, plan.batch_size)]
    return [b for b in out if len(b) >= min_size]


# ------------------------------------------------------ synthetic clouds


def synthetic_clouds(kind: str, n: int, dim: int = 2, seed: int = 0, clusters: int = 3,
                     separation: float = 100.0, spread: float = 0.1) -> np.ndarray:
    """Deterministic point clouds for topology tests.

    ``line`` puts point k at the k-th triangular number on the first axis
    (0, 1, 3, 6, ...), so consecutive gaps grow and the MST is the chain.
    ``blobs`` places ``clusters`` Gaussian clusters ``separation`` apart
    along the first axis. ``circle`` is a noisy unit ring in the first two
    coordinates.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    pts = np.zeros((n, dim))
    if kind == "line":
        k = np.arange(n, dtype=np.float64)
        pts[:, 0] = k * (k + 1) / 2
    elif kind == "blobs":
        labels = np.arange(n) % clusters
        pts = rng.normal(scale=spread, size=(n, dim))
        pts[:, 0] += labels * separation
    elif kind == "circle":
        if dim < 2:
            raise ValueError("circle needs dim >= 2")
        theta = rng.uniform(0, 2 * np.pi, n)
        pts = rng.normal(scale=spread, size=(n, dim))
        pts[:, 0] += np.cos(theta)
        pts[:, 1] += np.sin(theta)
    else:
        raise ValueError(f"unknown cloud kind {kind!r}")
    return pts


# --------------------------------------------------------------- exports


def export_latents(topoae, dataset: Dataset, path, batch_size: int = 256) -> int:
    """Write ``label,z0,...`` rows of TopoAE latent codes; returns row count."""
    d = topoae.arch.latent_dim
    lines = [",".join(["label"] + [f"z{i}" for i in range(d)])]
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        z = topoae.encode(x).data
        for label, row in zip(dataset.labels[start:start + batch_size], z):
            lines.append(",".join([str(int(label))] + [repr(float(v)) for v in row]))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(lines) - 1
