"""Dataset ingestion, synthetic pair generation, and group sampling.

Supported on-disk formats are the big-endian IDX files used by MNIST and
Fashion-MNIST and the CIFAR-10 binary batches (1 label byte + 3072 pixel
bytes per record, R/G/B planes row-major). Pixels are scaled to [0, 1];
CIFAR-10 is additionally normalized per channel with constants computed from
its train batches and recorded in the preprocessing tag. The digest of a
dataset covers content plus preprocessing, so two loads agree iff both bytes
and pipeline agree.

Loaded datasets are immutable and freely shared across threads.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DataFormatError

__all__ = [
    "Dataset",
    "load_idx",
    "load_cifar10",
    "synthesize",
    "uniform_sampler",
    "epoch_groups",
    "sample_groups",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_LEN = 3073


@dataclass
class Dataset:
    """Images with optional labels and cached base-function targets.

    images: (N, channels, n, n) float32. labels: (N,) int64 or None.
    targets: (N, m) float32 cached outputs for label-free losses, or None.
    """

    images: np.ndarray
    labels: np.ndarray | None = None
    split: str = ""
    name: str = ""
    preprocessing: str = "raw01"
    targets: np.ndarray | None = None
    _digest: str | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[2] != self.images.shape[3]:
            raise ConfigurationError(
                f"images must have shape (N, C, n, n), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ConfigurationError(
                    f"{len(self.labels)} labels for {len(self.images)} images")
        if self.targets is not None:
            self.targets = np.ascontiguousarray(self.targets, dtype=np.float32)
            if len(self.targets) != len(self.images):
                raise ConfigurationError(
                    f"{len(self.targets)} targets for {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def n(self) -> int:
        return self.images.shape[2]

    @property
    def digest(self) -> str:
        if self._digest is None:
            h = hashlib.sha256()
            h.update(self.preprocessing.encode())
            h.update(str(self.images.shape).encode())
            h.update(self.images.tobytes())
            if self.labels is not None:
                h.update(self.labels.tobytes())
            if self.targets is not None:
                h.update(self.targets.tobytes())
            self._digest = h.hexdigest()
        return self._digest

    def subset(self, indices, split: str | None = None) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(
            images=self.images[indices],
            labels=None if self.labels is None else self.labels[indices],
            split=split if split is not None else self.split,
            name=self.name, preprocessing=self.preprocessing,
            targets=None if self.targets is None else self.targets[indices])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"images": self.images,
                   "meta": np.array([self.split, self.name, self.preprocessing])}
        if self.labels is not None:
            payload["labels"] = self.labels
        if self.targets is not None:
            payload["targets"] = self.targets
        np.savez_compressed(path, **payload)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        with np.load(path, allow_pickle=False) as archive:
            split, name, preprocessing = (str(s) for s in archive["meta"])
            return cls(images=archive["images"],
                       labels=archive["labels"] if "labels" in archive else None,
                       targets=archive["targets"] if "targets" in archive else None,
                       split=split, name=name, preprocessing=preprocessing)


def _read_exact(fh, count: int, offset: int, path) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise DataFormatError(
            f"{path}: truncated at offset {offset + len(data)} "
            f"(wanted {count} bytes, got {len(data)})")
    return data


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    return gzip.open(path, "rb") if magic == b"\x1f\x8b" else open(path, "rb")


def load_idx(images_path: str | Path, labels_path: str | Path | None = None, *,
             split: str = "", name: str = "") -> Dataset:
    """Parse big-endian IDX image/label files (gzip transparently handled)."""

    images_path = Path(images_path)
    with _open_maybe_gzip(images_path) as fh:
        header = _read_exact(fh, 16, 0, images_path)
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad image magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_IMAGE_MAGIC:08x})")
        raw = _read_exact(fh, count * rows * cols, 16, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    images = images.astype(np.float32) / 255.0

    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        with _open_maybe_gzip(labels_path) as fh:
            header = _read_exact(fh, 8, 0, labels_path)
            magic, label_count = struct.unpack(">II", header)
            if magic != IDX_LABEL_MAGIC:
                raise DataFormatError(
                    f"{labels_path}: bad label magic 0x{magic:08x} at offset 0 "
                    f"(expected 0x{IDX_LABEL_MAGIC:08x})")
            if label_count != count:
                raise DataFormatError(
                    f"{labels_path}: {label_count} labels for {count} images "
                    "(count mismatch at offset 4)")
            raw = _read_exact(fh, label_count, 8, labels_path)
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    return Dataset(images=images, labels=labels, split=split, name=name,
                   preprocessing="raw01")


def _read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD_LEN != 0:
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a multiple of the "
            f"{CIFAR_RECORD_LEN}-byte record length (offset "
            f"{len(raw) - len(raw) % CIFAR_RECORD_LEN})")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_LEN)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32)  # R, G, B planes, row-major
    return images, labels


def _cifar_paths(directory: Path, stems: list[str]) -> list[Path]:
    paths = []
    for stem in stems:
        for candidate in (directory / f"{stem}.bin", directory / stem):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise ConfigurationError(f"missing CIFAR-10 batch: {directory / stem}(.bin)")
    return paths


def load_cifar10(directory: str | Path, split: str = "train", *,
                 normalize: bool = True) -> Dataset:
    """Load CIFAR-10 binary batches from ``directory``.

    Normalization constants are always computed from the five train batches
    (regardless of the requested split) so train and test share one pipeline;
    they are recorded in the preprocessing tag and therefore in the digest.
    """

    directory = Path(directory)
    train_stems = [f"data_batch_{i}" for i in range(1, 6)]
    if split == "train":
        wanted = _cifar_paths(directory, train_stems)
    elif split == "test":
        wanted = _cifar_paths(directory, ["test_batch"])
    else:
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")

    parts = [_read_cifar_batch(p) for p in wanted]
    images = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    labels = np.concatenate([p[1] for p in parts])

    preprocessing = "raw01"
    if normalize:
        train_parts = [_read_cifar_batch(p)[0] for p in _cifar_paths(directory, train_stems)]
        train_pixels = np.concatenate(train_parts).astype(np.float32) / 255.0
        mean = train_pixels.mean(axis=(0, 2, 3))
        std = np.maximum(train_pixels.std(axis=(0, 2, 3)), 1e-6)
        images = (images - mean[None, :, None, None]) / std[None, :, None, None]
        fmt = ",".join(f"{v:.6f}" for v in mean) + ";" + ",".join(f"{v:.6f}" for v in std)
        preprocessing = f"cifar10-channelnorm[{fmt}]"

    return Dataset(images=images, labels=labels, split=split, name="cifar10",
                   preprocessing=preprocessing)


def uniform_sampler(low: float = 0.0, high: float = 1.0):
    """Sampler factory for :func:`synthesize`: uniform pixels in [low, high)."""

    def sample(count: int, shape: tuple[int, int, int], rng: np.random.Generator):
        return rng.uniform(low, high, size=(count, *shape)).astype(np.float32)

    return sample


def synthesize(base_model, sampler, count: int, *, seed: int = 0,
               name: str = "synthetic", batch_size: int = 1024) -> Dataset:
    """Generate an unlabeled dataset of inputs with cached base outputs.

    ``sampler(count, input_shape, rng)`` must yield inputs in the base
    function's domain. The cached targets equal a recomputation bit-for-bit.
    """

    rng = np.random.default_rng(seed)
    images = np.asarray(sampler(count, base_model.input_shape, rng), dtype=np.float32)
    targets = base_model.predict_scores(images, batch_size=batch_size)
    return Dataset(images=images, targets=targets, name=name,
                   preprocessing=f"synthetic-seed{seed}")


def epoch_groups(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """One epoch of groups: a permutation of [0, n) cut into floor(n/k) rows.

    Every index appears at most once per epoch; n mod k indices are unused.
    """

    if n < k:
        raise ConfigurationError(f"need at least k={k} items, got {n}")
    perm = rng.permutation(n)
    usable = (n // k) * k
    return perm[:usable].reshape(-1, k)


def sample_groups(dataset: Dataset | int, k: int, seed: int = 0):
    """Endless stream of k-image index groups, epoch by epoch.

    Within an epoch indices are drawn without replacement; each epoch starts
    a fresh permutation. The same seed reproduces the same stream.
    """

    n = dataset if isinstance(dataset, int) else len(dataset)
    seq = np.random.SeedSequence(seed)
    epoch = 0
    while True:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seq.entropy, spawn_key=(epoch,)))
        for group in epoch_groups(n, k, rng):
            yield group
        epoch += 1
