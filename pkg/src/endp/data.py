"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, subsetting and batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import rng
from .errors import (BadMagic, CountMismatch, LabelOutOfRange, SizeNotMultipleOfRecord, SubsetTooLarge,
                     TruncatedFile)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray        # (count, c, h, w) float32 in [0, 1]
    labels: np.ndarray        # (count,) int64
    name: str = ""
    split: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.name, self.split, self.num_classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: missing header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise TruncatedFile(f"{path}: expected {need} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "") -> Dataset:
    pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{pixels.shape[0]} images vs {labels.shape[0]} labels")
    images = (pixels.astype(np.float32) / np.float32(255.0))[:, None]
    return Dataset(images, labels.astype(np.int64), name, split)


def load_mnist(directory, split: str = "train") -> Dataset:
    directory = Path(directory)
    names = MNIST_FILES[split]
    paths = []
    for n in names:
        p = directory / n
        if not p.exists() and (directory / (n + ".gz")).exists():
            p = directory / (n + ".gz")
        paths.append(p)
    return load_idx(*paths, name="mnist", split=split)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write images (rounded to bytes) and labels in IDX format."""
    pixels = np.clip(np.rint(ds.images.reshape(len(ds), *ds.images.shape[2:]) * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(f">{pixels.ndim}I", *pixels.shape))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(ds)))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_cifar10(paths: Sequence, split: str = "") -> Dataset:
    images, labels = [], []
    for path in ([paths] if isinstance(paths, (str, os.PathLike)) else paths):
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise SizeNotMultipleOfRecord(f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(images) if images else np.zeros((0, 3, 32, 32), np.uint8)
    return Dataset(pixels.astype(np.float32) / np.float32(255.0),
                   np.concatenate(labels) if labels else np.zeros(0, np.int64), "cifar10", split)


def write_cifar10(ds: Dataset, path) -> None:
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8).reshape(len(ds), -1)
    rec = np.concatenate([ds.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(rec.tobytes())


def stratified_indices(labels: np.ndarray, size: int, seed: int, num_classes: int | None = None) -> np.ndarray:
    """Equal count per class (remainder to the lowest class ids), sorted ascending."""
    n = len(labels)
    if size > n:
        raise SubsetTooLarge(f"subset of {size} requested from {n} examples")
    if size == n:
        return np.arange(n)
    classes = num_classes or int(labels.max()) + 1
    per = np.full(classes, size // classes)
    per[: size % classes] += 1
    chosen = []
    for c in range(classes):
        pool = np.flatnonzero(labels == c)
        if per[c] > len(pool):
            raise SubsetTooLarge(f"class {c} has {len(pool)} examples, {per[c]} requested")
        perm = rng.keyed_generator(seed, (rng.SHUFFLE, 0xFFFF, c)).permutation(len(pool))
        chosen.append(pool[perm[: per[c]]])
    return np.sort(np.concatenate(chosen))


class BatchPlan:
    """A fixed stratified subset, reshuffled each epoch by a (seed, epoch)-keyed permutation."""

    def __init__(self, ds: Dataset, subset_size: int | None, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        size = len(ds) if subset_size is None else int(subset_size)
        self.indices = stratified_indices(ds.labels, size, seed, ds.num_classes)
        self.data = ds.take(self.indices)
        self.batch_size = batch_size
        self.seed = seed

    def __len__(self) -> int:
        return -(-len(self.data) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        return rng.keyed_generator(self.seed, (rng.SHUFFLE, epoch)).permutation(len(self.data))

    def batches(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self.order(epoch)
        for s in range(0, len(order), self.batch_size):
            idx = order[s:s + self.batch_size]
            yield self.data.images[idx], self.data.labels[idx]


def subset_and_batch(ds: Dataset, subset_size: int | None, batch_size: int, seed: int) -> BatchPlan:
    return BatchPlan(ds, subset_size, batch_size, seed)
