"""Dataset ingestion, splitting and normalisation."""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, IngestError

CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck"]
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

EDGE_CLASSES = ["horizontal", "vertical", "positive_diagonal", "negative_diagonal", "none"]


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        k = len(self.class_names)
        if k and self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ConfigError(f"labels must lie in [0, {k})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> LabeledDataset:
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index], list(self.class_names))


# ---------------------------------------------------------------- CIFAR-10


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Decode one CIFAR-10 binary batch file into (uint8 images, labels)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"cannot read CIFAR-10 batch {path}: {exc.strerror or exc}") from exc
    n, rem = divmod(len(raw), CIFAR_RECORD_BYTES)
    if rem or n == 0:
        raise IngestError(
            f"{path}: truncated record at byte offset {n * CIFAR_RECORD_BYTES} "
            f"(file has {len(raw)} bytes, records are {CIFAR_RECORD_BYTES} bytes)")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise IngestError(f"{path}: label {labels[bad[0]]} out of range at byte offset "
                          f"{bad[0] * CIFAR_RECORD_BYTES}")
    return rec[:, 1:].reshape(n, 3, 32, 32), labels


def _read_cifar_files(directory: Path, names: list[str]) -> LabeledDataset:
    images, labels = [], []
    for name in names:
        img, lab = read_cifar_batch(directory / name)
        images.append(img)
        labels.append(lab)
    return LabeledDataset(np.concatenate(images) / 255.0, np.concatenate(labels), list(CIFAR10_CLASSES))


def find_cifar_dir(path) -> Path:
    """Accept either the batch directory itself or its parent."""
    path = Path(path)
    for cand in (path, path / "cifar-10-batches-bin"):
        if (cand / CIFAR_TEST_FILE).exists():
            return cand
    raise IngestError(f"no CIFAR-10 binary batches ({CIFAR_TEST_FILE}) under {path}")


def load_cifar10(path) -> tuple[LabeledDataset, LabeledDataset]:
    """Load the official binary distribution as (train, test), pixels scaled by 1/255."""
    directory = find_cifar_dir(path)
    return (_read_cifar_files(directory, CIFAR_TRAIN_FILES),
            _read_cifar_files(directory, [CIFAR_TEST_FILE]))


# ---------------------------------------------------------------- IDX


_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Read an IDX file (e.g. MNIST ``0x00000803`` images, ``0x00000801`` labels)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"cannot read IDX file {path}: {exc.strerror or exc}") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IngestError(f"{path}: bad IDX magic at offset 0")
    dtype, ndim = raw[2], raw[3]
    if dtype not in _IDX_DTYPES:
        raise IngestError(f"{path}: unknown IDX element type 0x{dtype:02x} at offset 2")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestError(f"{path}: truncated IDX header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dt = np.dtype(_IDX_DTYPES[dtype])
    expected = header + int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(raw) < expected:
        raise IngestError(f"{path}: truncated IDX payload at offset {len(raw)} (expected {expected} bytes)")
    return np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=header).reshape(dims)


# ---------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    val_fraction: float = 0.10
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


def stratified_split(ds: LabeledDataset, spec: SplitSpec = SplitSpec()) -> tuple[LabeledDataset, LabeledDataset]:
    """Send ``round(val_fraction * n_c)`` samples of each class to validation.

    Selection uses a seeded shuffle; both parts keep the original record order.
    """
    rng = np.random.default_rng(spec.seed)
    if not spec.stratified:
        n_val = int(math.floor(spec.val_fraction * len(ds) + 0.5))
        val_idx = np.sort(rng.permutation(len(ds))[:n_val])
    else:
        need = math.ceil(1 / spec.val_fraction - 1e-9)
        val_parts = []
        for c in np.unique(ds.labels):
            members = np.flatnonzero(ds.labels == c)
            if members.size < need:
                raise ConfigError(f"class {c} has {members.size} samples; at least {need} "
                                  f"needed for val_fraction={spec.val_fraction}")
            n_val = int(math.floor(spec.val_fraction * members.size + 0.5))
            val_parts.append(rng.permutation(members)[:n_val])
        val_idx = np.sort(np.concatenate(val_parts))
    mask = np.zeros(len(ds), dtype=bool)
    mask[val_idx] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(val_idx)


def cap_per_class(ds: LabeledDataset, n: int) -> LabeledDataset:
    """Keep the first ``n`` records of each class, preserving order."""
    if n < 1:
        raise ConfigError(f"per-class cap must be >= 1, got {n}")
    keep = np.zeros(len(ds), dtype=bool)
    for c in np.unique(ds.labels):
        keep[np.flatnonzero(ds.labels == c)[:n]] = True
    return ds.subset(np.flatnonzero(keep))


# ---------------------------------------------------------------- normalisation


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    images = np.asarray(images, dtype=np.float64)
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def _check_stats(mean, std, channels: int):
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    std = np.asarray(std, dtype=np.float64).reshape(-1)
    if mean.shape != (channels,) or std.shape != (channels,):
        raise ConfigError(f"mean/std need {channels} entries, got {mean.shape}, {std.shape}")
    if np.any(std <= 0):
        raise ConfigError(f"std must be positive per channel, got {std.tolist()}")
    return mean.reshape(1, -1, 1, 1), std.reshape(1, -1, 1, 1)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    m, s = _check_stats(mean, std, images.shape[1])
    return (images - m) / s


def denormalize(images: np.ndarray, mean, std) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    m, s = _check_stats(mean, std, images.shape[1])
    return images * s + m


def save_stats(path, mean, std) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps({"mean": [float(v) for v in mean], "std": [float(v) for v in std]},
                              indent=2) + "\n")
    os.replace(tmp, path)


def load_stats(path) -> tuple[np.ndarray, np.ndarray]:
    d = json.loads(Path(path).read_text())
    return np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64)


def cached_stats(path, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel mean/std from ``images``, cached in a JSON sidecar at ``path``."""
    path = Path(path)
    if path.exists():
        return load_stats(path)
    mean, std = channel_stats(images)
    save_stats(path, mean, std)
    return mean, std


# ---------------------------------------------------------------- synthetic corpus


def edge_image(kind: str, size: int, offset: int, low: float, high: float) -> np.ndarray:
    """Single-channel step-edge image; ``offset`` shifts the edge from centre."""
    r, c = np.mgrid[0:size, 0:size]
    mid = size // 2 + offset
    if kind == "horizontal":
        region = r < mid
    elif kind == "vertical":
        region = c < mid
    elif kind == "positive_diagonal":
        # boundary runs bottom-left to top-right
        region = r + c < (size - 1) + 2 * offset
    elif kind == "negative_diagonal":
        region = c - r > 2 * offset
    elif kind == "none":
        region = np.zeros((size, size), dtype=bool)
    else:
        raise ConfigError(f"unknown edge kind {kind!r}")
    return np.where(region, high, low)


def synthetic_edges(count: int, size: int = 16, seed: int = 0, noise: float = 0.0,
                    channels: int = 3) -> LabeledDataset:
    """Balanced corpus of step-edge images labelled by edge direction.

    Class ``none`` images are constant.  ``noise`` adds clipped Gaussian pixel
    noise to every image.
    """
    if size < 8:
        raise ConfigError(f"synthetic images need size >= 8, got {size}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % len(EDGE_CLASSES))
    images = np.empty((count, channels, size, size))
    span = max(1, size // 4)
    for n, lab in enumerate(labels):
        kind = EDGE_CLASSES[lab]
        offset = int(rng.integers(-span + 1, span))
        low = rng.uniform(0.0, 0.6)
        high = low + rng.uniform(0.3, 1.0 - low)
        if rng.random() < 0.5:
            low, high = high, low
        if kind == "none":
            images[n] = low
        else:
            images[n] = edge_image(kind, size, offset, low, high)
    if noise:
        images = np.clip(images + rng.normal(0.0, noise, images.shape), 0.0, 1.0)
    return LabeledDataset(images, labels, list(EDGE_CLASSES))
