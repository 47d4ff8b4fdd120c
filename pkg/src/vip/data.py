"""Dataset ingestion: CIFAR-10 binary batches, class-per-directory image
trees, and a deterministic synthetic generator for desk-scale runs.

All loaders return an in-memory :class:`ImageDataset` of float32 CHW images
in [0, 1]. Augmentation (horizontal flip + 4-pixel-pad random crop) is applied
per batch during training only.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_SIDE = 32
CROP_PAD = 4

FORMATS = ("cifar10-bin", "image-dir", "synthetic")


class DatasetError(ValueError):
    """Malformed or empty dataset input."""


@dataclass
class ImageDataset:
    """Labeled images: ``images`` float32 [N, 3, H, W] in [0, 1], int labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return self.images.shape[2], self.images.shape[3]


def load_dataset(path: str, fmt: str) -> ImageDataset:
    if fmt == "cifar10-bin":
        return load_cifar10_bin(path)
    if fmt == "image-dir":
        return load_image_dir(path)
    if fmt == "synthetic":
        return load_synthetic(path)
    raise DatasetError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")


def _cifar_files(path):
    if os.path.isfile(path):
        return [path]
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path)
                       if f.startswith("data_batch") and f.endswith(".bin"))
        if not names:
            names = sorted(f for f in os.listdir(path) if f.endswith(".bin"))
        return [os.path.join(path, f) for f in names]
    raise DatasetError(f"no such file or directory: {path}")


def load_cifar10_bin(path: str) -> ImageDataset:
    """CIFAR-10 binary batches: records of 3073 bytes, label then RGB planes."""
    files = _cifar_files(path)
    if not files:
        raise DatasetError(f"empty dataset: no .bin files under {path}")
    images, labels = [], []
    for fname in files:
        raw = np.fromfile(fname, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
            offset = raw.size - raw.size % CIFAR_RECORD_BYTES
            raise DatasetError(
                f"{fname}: malformed record at byte offset {offset} "
                f"(file size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES})")
        records = raw.reshape(-1, CIFAR_RECORD_BYTES)
        lab = records[:, 0]
        bad = np.nonzero(lab > 9)[0]
        if bad.size:
            raise DatasetError(
                f"{fname}: label {int(lab[bad[0]])} out of range [0, 9] at byte "
                f"offset {int(bad[0]) * CIFAR_RECORD_BYTES}")
        images.append(records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE))
        labels.append(lab)
    images = np.concatenate(images).astype(np.float32) / 255.0
    labels = np.concatenate(labels).astype(np.int64)
    return ImageDataset(images, labels, 10, name=f"cifar10-bin:{path}")


def load_image_dir(path: str) -> ImageDataset:
    """One subdirectory per class; images inside must share one geometry."""
    from PIL import Image

    if not os.path.isdir(path):
        raise DatasetError(f"no such directory: {path}")
    classes = sorted(d for d in os.listdir(path)
                     if os.path.isdir(os.path.join(path, d)))
    if not classes:
        raise DatasetError(f"empty dataset: no class directories under {path}")
    images, labels = [], []
    size = None
    for label, cls in enumerate(classes):
        cdir = os.path.join(path, cls)
        for fname in sorted(os.listdir(cdir)):
            try:
                with Image.open(os.path.join(cdir, fname)) as img:
                    rgb = np.asarray(img.convert("RGB"))
            except OSError as exc:
                raise DatasetError(f"{cdir}/{fname}: unreadable image ({exc})")
            if size is None:
                size = rgb.shape[:2]
            elif rgb.shape[:2] != size:
                raise DatasetError(
                    f"{cdir}/{fname}: geometry {rgb.shape[:2]} differs from {size}")
            images.append(rgb.transpose(2, 0, 1))
            labels.append(label)
    if not images:
        raise DatasetError(f"empty dataset: no images under {path}")
    arr = np.stack(images).astype(np.float32) / 255.0
    return ImageDataset(arr, np.asarray(labels, dtype=np.int64), len(classes),
                        name=f"image-dir:{path}")


def _parse_synthetic_spec(path: str) -> dict:
    opts = {"n": 512, "classes": 10, "seed": 0, "size": 32}
    if path:
        for item in path.split(","):
            if not item:
                continue
            if "=" not in item:
                raise DatasetError(f"bad synthetic option {item!r}; expected key=value")
            key, value = item.split("=", 1)
            if key not in opts:
                raise DatasetError(f"unknown synthetic option {key!r}")
            opts[key] = int(value)
    return opts


def load_synthetic(path: str = "") -> ImageDataset:
    """Deterministic class-patterned images, e.g. ``n=64,classes=4,seed=7``.

    Each class owns a fixed low-resolution random pattern; samples add small
    per-sample noise. Identical options always produce the identical stream.
    """
    opts = _parse_synthetic_spec(path)
    return synthetic(opts["n"], opts["classes"], opts["seed"], opts["size"])


def synthetic(n, classes, seed, size=32) -> ImageDataset:
    if n < 1 or classes < 2:
        raise DatasetError(f"need n >= 1 and classes >= 2, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    coarse = size // 4
    patterns = rng.normal(0.0, 1.0, size=(classes, 3, coarse, coarse))
    patterns = patterns.repeat(4, axis=2).repeat(4, axis=3)
    labels = np.arange(n, dtype=np.int64) % classes
    noise = rng.normal(0.0, 1.0, size=(n, 3, size, size))
    images = 0.5 + 0.2 * patterns[labels] + 0.05 * noise
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return ImageDataset(images, labels, classes,
                        name=f"synthetic:n={n},classes={classes},seed={seed}")


def augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p=0.5) and random crop from a 4-pixel zero pad."""
    n, _, h, w = images.shape
    out = images.copy()
    flips = rng.random(n) < 0.5
    out[flips] = out[flips, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD)))
    ys = rng.integers(0, 2 * CROP_PAD + 1, size=n)
    xs = rng.integers(0, 2 * CROP_PAD + 1, size=n)
    for i in range(n):
        out[i] = padded[i, :, ys[i]:ys[i] + h, xs[i]:xs[i] + w]
    return out
