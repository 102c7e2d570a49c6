"""Dataset ingestion and generation: CIFAR-10 binary batches, a synthetic
grating dataset for fast controlled experiments, and epoch batching.

Pixels are stored channel-first as float64 in [0,1]; a raw byte b parses
to exactly b/255.0, and the writer inverts that losslessly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image: channel-first pixels in [0,1]."""

    pixels: np.ndarray  # [C, H, W]
    label: int
    source_index: int


@dataclass
class Dataset:
    records: list[ImageRecord]
    class_count: int
    name: str

    def __post_init__(self):
        if not self.records:
            raise ConfigError(f"dataset {self.name!r} is empty")
        shape = self.records[0].pixels.shape
        for r in self.records:
            if r.pixels.shape != shape:
                raise ConfigError(
                    f"dataset {self.name!r}: record {r.source_index} has shape"
                    f" {r.pixels.shape}, expected {shape}")
            if not 0 <= r.label < self.class_count:
                raise ConfigError(
                    f"dataset {self.name!r}: record {r.source_index} has label"
                    f" {r.label}, class_count {self.class_count}")

    def __len__(self):
        return len(self.records)

    @property
    def image_shape(self):
        return self.records[0].pixels.shape

    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.int64)


def _parse_cifar_file(path, class_count=10, start_index=0):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise ParseError(f"{path}: file not found") from None
    extra = len(raw) % CIFAR_RECORD_BYTES
    if extra or not raw:
        raise ParseError(
            f"{path}: truncated record at byte offset {len(raw) - extra}"
            f" ({extra} trailing bytes, need {CIFAR_RECORD_BYTES})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = arr[:, 0]
    bad = np.nonzero(labels >= class_count)[0]
    if bad.size:
        i = int(bad[0])
        raise ParseError(
            f"{path}: label byte {labels[i]} > {class_count - 1}"
            f" at byte offset {i * CIFAR_RECORD_BYTES}")
    pixels = arr[:, 1:].reshape(-1, 3, 32, 32) / 255.0
    return [
        ImageRecord(pixels=pixels[i], label=int(labels[i]), source_index=start_index + i)
        for i in range(pixels.shape[0])
    ]


def load_cifar10(dir_path, split="train", files=None):
    """Parse CIFAR-10 binary batch files from `dir_path`.

    Each 3073-byte record is one label byte then 1024 red, 1024 green and
    1024 blue bytes, row-major 32x32. `files` overrides the conventional
    per-split names.
    """
    if files is None:
        if split == "train":
            files = CIFAR_TRAIN_FILES
        elif split == "test":
            files = CIFAR_TEST_FILES
        else:
            raise ConfigError(f"load_cifar10: unknown split {split!r}")
    records = []
    for name in files:
        records.extend(_parse_cifar_file(os.path.join(dir_path, name),
                                         start_index=len(records)))
    return Dataset(records=records, class_count=10, name=f"cifar10-{split}")


def write_cifar10_batch(records, path):
    """Write records back to the binary batch layout (inverse of the parser)."""
    out = np.empty((len(records), CIFAR_RECORD_BYTES), dtype=np.uint8)
    for i, r in enumerate(records):
        if r.pixels.shape != (3, 32, 32):
            raise ConfigError(
                f"write_cifar10_batch: record {i} has shape {r.pixels.shape},"
                " format requires (3, 32, 32)")
        out[i, 0] = r.label
        out[i, 1:] = np.round(r.pixels * 255.0).astype(np.uint8).reshape(-1)
    with open(path, "wb") as f:
        f.write(out.tobytes())


@dataclass(frozen=True)
class SyntheticConfig:
    """Oriented-grating dataset: class c's gratings run at angle pi*c/classes."""

    classes: int = 3
    per_class: int = 100
    size: int = 32
    seed: int = 0
    frequency: float = 3.0       # cycles across the image, shared by all classes
    phase_jitter: float = 0.6    # radians, uniform in [-j, +j] per sample
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"synthetic: classes must be >= 2, got {self.classes}")
        if self.per_class < 1:
            raise ConfigError(f"synthetic: per_class must be >= 1, got {self.per_class}")
        if self.size < 8:
            raise ConfigError(f"synthetic: size must be >= 8, got {self.size}")


def make_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Deterministic labeled dataset whose only class signal is grating
    orientation; per-sample phase, contrast, channel gain and pixel noise
    provide the intra-class variation."""
    rng = np.random.default_rng(cfg.seed)
    coords = (np.arange(cfg.size) + 0.5) / cfg.size  # pixel centers in [0,1]
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    records = []
    idx = 0
    for c in range(cfg.classes):
        theta = np.pi * c / cfg.classes
        axis = xx * np.cos(theta) + yy * np.sin(theta)
        for _ in range(cfg.per_class):
            phase = rng.uniform(-cfg.phase_jitter, cfg.phase_jitter)
            contrast = rng.uniform(0.55, 0.95)
            gains = rng.uniform(0.75, 1.0, size=3)
            wave = np.sin(2.0 * np.pi * cfg.frequency * axis + phase)
            img = 0.5 + 0.5 * contrast * gains[:, None, None] * wave[None]
            img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
            np.clip(img, 0.0, 1.0, out=img)
            records.append(ImageRecord(pixels=img, label=c, source_index=idx))
            idx += 1
    return Dataset(records=records, class_count=cfg.classes,
                   name=f"synthetic-{cfg.classes}x{cfg.per_class}")


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int):
    """Yield lists of records under a fresh (seed, epoch)-keyed permutation.

    A final batch shorter than batch_size is dropped so every batch feeds
    batch-norm the same way.
    """
    if batch_size < 2:
        raise ConfigError(f"batches: batch_size must be >= 2, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds.records))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        yield [ds.records[i] for i in order[start:start + batch_size]]


def stack_pixels(records, dtype=np.float64):
    """[B, C, H, W] array of the records' pixels in the requested dtype."""
    return np.stack([r.pixels for r in records]).astype(dtype, copy=False)
