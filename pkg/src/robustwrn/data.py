"""Datasets: CIFAR binary and IDX readers plus a seeded synthetic generator."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel values outside [0, 1]")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.num_classes)

    def split_off(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Deterministic (rest, held-out) partition."""
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(self))
        k = int(round(fraction * len(self)))
        return self.subset(np.sort(perm[k:])), self.subset(np.sort(perm[:k]), "heldout")


def load_cifar_binary(paths, num_classes: int = 10) -> Dataset:
    """Read CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD:
            raise DataFormatError(f"{p}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record boundary")
        rec = raw.reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0].astype(np.int64)
        if lab.max() >= num_classes:
            raise DataFormatError(f"{p}: label {int(lab.max())} >= {num_classes}")
        labels.append(lab)
        images.append(rec[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels), "train", num_classes)


def load_idx(path, images: bool | None = None) -> np.ndarray:
    """Read an unsigned-byte IDX file.

    Image files (3 or more dimensions, or ``images=True``) are scaled by
    1/255; label files are returned as raw integers.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0 or buf[2] != 0x08:
        raise DataFormatError(f"{path}: bad IDX magic bytes {buf[:4].hex(' ')}")
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = tuple(int.from_bytes(buf[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    payload = np.frombuffer(buf, dtype=np.uint8, offset=header)
    if payload.size != int(np.prod(dims, dtype=np.int64)):
        raise DataFormatError(f"{path}: payload has {payload.size} bytes, header declares {dims}")
    arr = payload.reshape(dims)
    if images is None:
        images = ndim >= 3
    return arr.astype(np.float64) / 255.0 if images else arr.astype(np.int64)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    head = bytes([0, 0, 0x08, arr.ndim]) + b"".join(int(d).to_bytes(4, "big") for d in arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def _template(rng: np.random.Generator, channels: int, size: int, contrast: float) -> np.ndarray:
    # A few random low-frequency cosines per channel around mid-grey.
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((channels, size, size))
    for c in range(channels):
        for _ in range(3):
            fy, fx = rng.integers(0, 3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            img[c] += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        img[c] /= np.abs(img[c]).max() + 1e-12
    return 0.5 + contrast * img


def synth_dataset(
    classes: int,
    per_class: int,
    image_size: int = 16,
    noise: float = 0.1,
    seed: int = 0,
    channels: int = 3,
    contrast: float = 0.25,
    split: str = "train",
    template_seed: int | None = None,
) -> Dataset:
    """Class templates plus clamped Gaussian pixel noise.

    Templates depend only on ``template_seed`` (default ``seed``), so train
    and test splits drawn with different ``seed`` share the same classes.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    trng = np.random.default_rng(seed if template_seed is None else template_seed)
    templates = np.stack([_template(trng, channels, image_size, contrast) for _ in range(classes)])
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    imgs = templates[labels] + noise * rng.standard_normal((len(labels), channels, image_size, image_size))
    return Dataset(np.clip(imgs, 0.0, 1.0), labels, split, classes)
