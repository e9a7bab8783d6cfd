"""MNIST IDX loading and the Split / i.i.d. / Permuted task streams."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import DTYPE, RngStream

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "SPARSECL_DATA_DIR"
SPLIT_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))
# mean and std of the canonical MNIST train pixels after scaling to [0, 1]
MNIST_MEAN, MNIST_STD = 0.1307, 0.3081
INPUT_NORMS = ("none", "standardize")

_FILE_STEMS = {
    ("train", "images"): ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    ("train", "labels"): ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    ("test", "images"): ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    ("test", "labels"): ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (count, 784) float32 in [0, 1]
    labels: np.ndarray  # (count,) int64
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, path, magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: header truncated ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: magic is 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    need = int(np.prod(dims))
    if len(body) != need:
        raise IdxFormatError(f"{path}: payload has {len(body)} bytes, dims {dims} need {need}")
    return dims, body


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an image/label IDX pair; pixels are scaled to [0, 1]."""
    dims, body = _parse_idx(_read_bytes(images_path), images_path, IMAGES_MAGIC, 3)
    count, rows, cols = dims
    if (rows, cols) != (28, 28):
        raise IdxFormatError(f"{images_path}: image dims are {rows}x{cols}, expected 28x28")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, rows * cols)
    (n_labels,), lbody = _parse_idx(_read_bytes(labels_path), labels_path, LABELS_MAGIC, 1)
    if n_labels != count:
        raise IdxFormatError(f"label count {n_labels} ({labels_path}) != image count {count} ({images_path})")
    labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise IdxFormatError(f"{labels_path}: label value {labels.max()} outside 0..9")
    images = pixels.astype(DTYPE) / DTYPE(255)
    images.setflags(write=False)
    labels.setflags(write=False)
    return Dataset(images, labels, split)


def normalize_inputs(ds: Dataset, mode: str) -> Dataset:
    """Optional preprocessing on top of the [0, 1] scaling; "none" returns ``ds``."""
    if mode not in INPUT_NORMS:
        raise ValueError(f"input_norm must be one of {INPUT_NORMS}, got {mode!r}")
    if mode == "none":
        return ds
    images = (ds.images - DTYPE(MNIST_MEAN)) / DTYPE(MNIST_STD)
    images.setflags(write=False)
    return Dataset(images, ds.labels, ds.split)


def find_idx_file(data_dir, split: str, what: str) -> Path:
    data_dir = Path(data_dir)
    for stem in _FILE_STEMS[(split, what)]:
        for suffix in ("", ".gz"):
            p = data_dir / (stem + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"no MNIST {split} {what} file in {data_dir}")


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir:
        return Path(data_dir)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise FileNotFoundError(f"no MNIST directory given and ${DATA_DIR_ENV} is not set")


def load_mnist(data_dir=None) -> tuple[Dataset, Dataset]:
    d = resolve_data_dir(data_dir)
    train = load_idx(find_idx_file(d, "train", "images"), find_idx_file(d, "train", "labels"), "train")
    test = load_idx(find_idx_file(d, "test", "images"), find_idx_file(d, "test", "labels"), "test")
    return train, test


@dataclass
class Task:
    task_id: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    permutation: np.ndarray | None = None
    classes: tuple[int, ...] = ()

    def images(self, ds: Dataset, idx: np.ndarray) -> np.ndarray:
        x = ds.images[idx]
        return x if self.permutation is None else x[:, self.permutation]


@dataclass
class TaskStream:
    mode: str
    train: Dataset
    test: Dataset
    tasks: list[Task] = field(default_factory=list)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]


def make_split_tasks(train: Dataset, test: Dataset, pairs=SPLIT_PAIRS) -> TaskStream:
    tasks = []
    for tid, pair in enumerate(pairs):
        tasks.append(
            Task(
                tid,
                np.flatnonzero(np.isin(train.labels, pair)),
                np.flatnonzero(np.isin(test.labels, pair)),
                classes=tuple(pair),
            )
        )
    return TaskStream("split", train, test, tasks)


def make_iid_task(train: Dataset, test: Dataset) -> TaskStream:
    task = Task(0, np.arange(len(train)), np.arange(len(test)), classes=tuple(range(10)))
    return TaskStream("iid", train, test, [task])


def task_permutation(rng: RngStream, task_id: int, n_pixels: int = 784) -> np.ndarray:
    if task_id == 0:
        return np.arange(n_pixels)
    return rng.derive("perm", task_id).permutation(n_pixels)


def make_permuted_tasks(train: Dataset, test: Dataset, n_tasks: int, rng: RngStream) -> TaskStream:
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    n_pixels = train.images.shape[1]
    all_train, all_test = np.arange(len(train)), np.arange(len(test))
    tasks = [
        Task(i, all_train, all_test, task_permutation(rng, i, n_pixels), tuple(range(10)))
        for i in range(n_tasks)
    ]
    return TaskStream("permuted", train, test, tasks)


def shuffled_batches(task: Task, epoch: int, run_seed: int, batch_size: int = 64) -> Iterator[np.ndarray]:
    """Index batches into the train set, in an order fixed by (seed, task, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = RngStream.root(run_seed).derive("shuffle", task.task_id, epoch).permutation(len(task.train_idx))
    idx = task.train_idx[order]
    for start in range(0, len(idx), batch_size):
        yield idx[start : start + batch_size]
