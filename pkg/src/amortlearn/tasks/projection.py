"""Random-projection classification tasks over a labeled base dataset.

Each task draws a Gaussian projection ``W`` and a relabeling map ``pi`` from
original classes to class slots. The map may merge classes but never splits
one. The base dataset is either the built-in synthetic prototype set or
MNIST-format IDX files.
"""

from __future__ import annotations

import functools
import gzip
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .base import Task, TaskData

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1

    @property
    def raw_dim(self) -> int:
        return self.x_train.shape[1]


def builtin_base_dataset(
    classes: int = 10,
    per_class: int = 200,
    seed: int = 0,
    raw_dim: int = 64,
    noise: float = 0.5,
    test_fraction: float = 0.25,
) -> LabeledDataset:
    """Gaussian class prototypes in ``raw_dim`` space plus isotropic noise."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((classes, raw_dim))
    labels = np.repeat(np.arange(classes), per_class)
    x = protos[labels] + noise * rng.standard_normal((labels.size, raw_dim))
    perm = rng.permutation(labels.size)
    x, labels = x[perm], labels[perm]
    n_test = int(round(test_fraction * labels.size))
    return LabeledDataset(x[n_test:], labels[n_test:], x[:n_test], labels[:n_test])


_builtin_cached = functools.lru_cache(maxsize=8)(builtin_base_dataset)


def read_idx(path: str | Path) -> np.ndarray:
    """Read an MNIST-style IDX file (optionally gzip-compressed)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        n, rows, cols = struct.unpack(">III", raw[4:16])
        return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)
    if magic == IDX_LABELS_MAGIC:
        (n,) = struct.unpack(">I", raw[4:8])
        return np.frombuffer(raw, dtype=np.uint8, offset=8).reshape(n)
    raise ValueError(f"{path}: unsupported IDX magic 0x{magic:08x}")


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *array.shape)
    elif array.ndim == 1:
        header = struct.pack(">II", IDX_LABELS_MAGIC, array.shape[0])
    else:
        raise ValueError("IDX writer supports image stacks (3-d) and label vectors (1-d)")
    Path(path).write_bytes(header + array.tobytes())


def load_idx_dataset(train_images, train_labels, test_images, test_labels) -> LabeledDataset:
    """MNIST/FashionMNIST files -> flattened pixels scaled to [0, 1]."""

    def flat(p):
        images = read_idx(p)
        return images.reshape(len(images), -1).astype(np.float64) / 255.0

    return LabeledDataset(
        flat(train_images), read_idx(train_labels).astype(np.int64), flat(test_images), read_idx(test_labels).astype(np.int64)
    )


def sample_label_map(n_classes: int, n_slots: int, rng: np.random.Generator, permutations_only: bool = False) -> np.ndarray:
    """Map from original class to slot. Uniform over all functions unless
    ``permutations_only`` (which needs ``n_slots >= n_classes``)."""
    if permutations_only:
        if n_slots < n_classes:
            raise ValueError("permutation relabeling needs at least as many slots as classes")
        return rng.permutation(n_slots)[:n_classes]
    return rng.integers(0, n_slots, size=n_classes)


def sample_projection_task(
    base: LabeledDataset,
    proj_dim: int,
    seed: int,
    n_train: int = 512,
    n_valid: int = 128,
    n_slots: int | None = None,
    permutations_only: bool = False,
    identity: bool = False,
    config: dict | None = None,
) -> Task:
    """Project base inputs with a fresh Gaussian matrix and relabel classes.

    Context comes from the base train split and queries from its test split.
    Projected features are divided by sqrt(raw_dim) to keep them O(1).
    ``identity`` skips both transforms (debug preset).
    """
    if len(base.x_train) == 0:
        raise ValueError("empty base dataset")
    if base.n_classes < 2:
        raise ValueError("base dataset needs at least 2 classes")
    rng = np.random.default_rng(seed)
    n_slots = n_slots or base.n_classes
    if identity:
        w = np.eye(base.raw_dim)
        label_map = np.arange(base.n_classes)
        scale = 1.0
    else:
        w = rng.standard_normal((base.raw_dim, proj_dim))
        label_map = sample_label_map(base.n_classes, n_slots, rng, permutations_only)
        scale = 1.0 / np.sqrt(base.raw_dim)
    tr = rng.choice(len(base.x_train), size=min(n_train, len(base.x_train)), replace=False)
    va = rng.choice(len(base.x_test), size=min(n_valid, len(base.x_test)), replace=False)
    data = TaskData(
        base.x_train[tr] @ w * scale,
        label_map[base.y_train[tr]],
        base.x_test[va] @ w * scale,
        label_map[base.y_test[va]],
    )
    hidden = {"W": w, "label_map": label_map, "train_classes": base.y_train[tr], "valid_classes": base.y_test[va]}
    return Task("projection", data, hidden, seed, dict(config or {}))


@dataclass
class ProjectionFamily:
    """Classification tasks over the built-in prototype dataset."""

    proj_dim: int = 16
    n_slots: int = 10
    classes: int = 10
    per_class: int = 200
    raw_dim: int = 64
    noise: float = 0.5
    base_seed: int = 0
    n_train: int = 512
    n_valid: int = 128
    permutations_only: bool = False
    identity: bool = False

    kind = "classification"

    @property
    def x_dim(self) -> int:
        return self.raw_dim if self.identity else self.proj_dim

    @property
    def y_dim(self) -> int:
        return self.n_slots

    def base(self) -> LabeledDataset:
        return _builtin_cached(self.classes, self.per_class, self.base_seed, self.raw_dim, self.noise)

    def sample(self, seed: int) -> Task:
        return sample_projection_task(
            self.base(),
            self.proj_dim,
            seed,
            self.n_train,
            self.n_valid,
            n_slots=self.n_slots,
            permutations_only=self.permutations_only,
            identity=self.identity,
            config=self.to_dict(),
        )

    def to_dict(self) -> dict:
        return {"name": "projection", **asdict(self)}
