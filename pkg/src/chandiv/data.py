"""Dataset loading, synthetic data generation, and training augmentation.

The binary image format handled here stores fixed 3073-byte records: one
label byte in [0, 9] followed by 3072 pixel bytes (red plane, green plane,
blue plane, each 32x32 row-major). Loading scales pixels to [0, 1] and is
exactly invertible back to the source bytes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10


@dataclass
class Dataset:
    """Labeled channels-first image collection."""

    images: np.ndarray            # (N, C, H, W) float32 in [0,1] pre-normalization
    labels: np.ndarray            # (N,) integer class ids
    class_count: int
    mean: np.ndarray | None = None   # per-channel stats once normalized
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise FormatError(
                f"dataset needs (N,C,H,W) images with N labels, got "
                f"{self.images.shape} and {self.labels.shape}")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise FormatError(
                f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.images)


def _load_records(raw: bytes, origin: str) -> Dataset:
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        raise FormatError(
            f"{origin}: size {len(raw)} is not a positive multiple of "
            f"{RECORD_BYTES}-byte records")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= NUM_CLASSES:
        raise FormatError(
            f"{origin}: label byte {labels.max()} exceeds class range 0..9")
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / 255.0
    return Dataset(images=images, labels=labels, class_count=NUM_CLASSES)


def load_cifar10(path: str) -> Dataset:
    """Load binary batch records from one file or every *.bin in a directory.

    Directory files are read in sorted name order so the record order is
    stable across runs.
    """
    if os.path.isdir(path):
        files = sorted(f for f in os.listdir(path) if f.endswith(".bin"))
        if not files:
            raise FormatError(f"{path}: no .bin batch files found")
        raw = b"".join(open(os.path.join(path, f), "rb").read() for f in files)
        return _load_records(raw, path)
    with open(path, "rb") as f:
        return _load_records(f.read(), path)


def record_bytes(ds: Dataset, index: int) -> bytes:
    """Serialize one record back to its exact 3073-byte source form."""
    img = np.rint(ds.images[index] * 255.0).astype(np.uint8)
    return bytes([int(ds.labels[index])]) + img.tobytes()


def synth_dataset(seed: int, n: int, classes: int, shape=(3, 16, 16)) -> Dataset:
    """Class-conditional Gaussian-blob images, bitwise reproducible per seed.

    Each class gets a fixed smooth template (a few signed Gaussian bumps per
    channel); samples are the template plus pixel noise, clipped to [0, 1].
    The classes are easily separable so small networks can verify training
    machinery quickly.
    """
    if n < classes:
        raise ConfigError(f"need at least one sample per class, got n={n}")
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    templates = np.zeros((classes, c, h, w))
    for cls in range(classes):
        for ch in range(c):
            for _ in range(2):
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                sg = rng.uniform(h / 6.0, h / 3.0)
                amp = rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
                templates[cls, ch] += amp * np.exp(
                    -((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sg * sg))
        templates[cls] /= max(np.abs(templates[cls]).max(), 1e-8)

    labels = rng.permutation(np.arange(n) % classes)
    noise = rng.normal(0.0, 1.0, size=(n, c, h, w))
    images = 0.5 + 0.35 * templates[labels] + 0.08 * noise
    return Dataset(images=np.clip(images, 0.0, 1.0).astype(np.float32),
                   labels=labels.astype(np.int64), class_count=classes)


def synth_split(seed: int, n_train: int, n_eval: int, classes: int,
                shape=(3, 16, 16)):
    """Train/eval datasets drawn from one synthetic distribution.

    Both splits share the class templates (a single generation pass is
    sliced), so evaluation measures generalization to new noise, not to a
    different task.
    """
    full = synth_dataset(seed, n_train + n_eval, classes, shape)
    train = Dataset(images=full.images[:n_train], labels=full.labels[:n_train],
                    class_count=classes)
    evald = Dataset(images=full.images[n_train:], labels=full.labels[n_train:],
                    class_count=classes)
    return train, evald


@dataclass
class AugmentConfig:
    """Zero-pad, random-crop, horizontal-mirror augmentation settings."""

    pad: int = 4
    crop: tuple | None = None      # target (H, W); None keeps the input size
    hflip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.pad < 0 or not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"invalid augmentation config {self}")


def pad_crop(image: np.ndarray, pad: int, oy: int, ox: int,
             out_h: int, out_w: int) -> np.ndarray:
    """Zero-pad then crop an (C,H,W) image at the given window offset."""
    c, h, w = image.shape
    if out_h > h + 2 * pad or out_w > w + 2 * pad:
        raise ConfigError(
            f"crop {out_h}x{out_w} exceeds padded extent of {image.shape}")
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, oy:oy + out_h, ox:ox + out_w]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1]


def augment(image: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator) -> np.ndarray:
    """One augmented view of an (C,H,W) image; deterministic given the rng state."""
    if not cfg.enabled:
        return image
    c, h, w = image.shape
    out_h, out_w = cfg.crop if cfg.crop is not None else (h, w)
    oy = int(rng.integers(0, h + 2 * cfg.pad - out_h + 1))
    ox = int(rng.integers(0, w + 2 * cfg.pad - out_w + 1))
    out = pad_crop(image, cfg.pad, oy, ox, out_h, out_w)
    if rng.random() < cfg.hflip_prob:
        out = hflip(out)
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, cfg: AugmentConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """Augment a batch with one rng; pads once and crops per image."""
    if not cfg.enabled:
        return images
    n, c, h, w = images.shape
    out_h, out_w = cfg.crop if cfg.crop is not None else (h, w)
    p = cfg.pad
    padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)))
    oys = rng.integers(0, h + 2 * p - out_h + 1, size=n)
    oxs = rng.integers(0, w + 2 * p - out_w + 1, size=n)
    flips = rng.random(n) < cfg.hflip_prob
    out = np.empty((n, c, out_h, out_w), dtype=images.dtype)
    for i in range(n):
        view = padded[i, :, oys[i]:oys[i] + out_h, oxs[i]:oxs[i] + out_w]
        out[i] = view[:, :, ::-1] if flips[i] else view
    return out


def channel_stats(ds: Dataset):
    """Per-channel mean and standard deviation over all pixels."""
    mean = ds.images.mean(axis=(0, 2, 3))
    std = ds.images.std(axis=(0, 2, 3))
    return mean, std


def normalize(ds: Dataset, mean=None, std=None) -> Dataset:
    """Per-channel (x - mean) / std; stats default to the dataset's own."""
    if mean is None or std is None:
        own_mean, own_std = channel_stats(ds)
        mean = own_mean if mean is None else mean
        std = own_std if std is None else std
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if np.any(std <= 0):
        raise ConfigError(f"std must be positive per channel, got {std}")
    images = (ds.images - mean[:, None, None]) / std[:, None, None]
    return Dataset(images=images, labels=ds.labels, class_count=ds.class_count,
                   mean=mean, std=std)
