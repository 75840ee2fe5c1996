"""Procedural 16x16 grayscale shape dataset and pixel-space corruptions.

Every sample is a pure function of ``(dataset seed, split, index)`` and every
corrupted sample additionally of the corruption kind, severity and seed, so any
subset of any split can be regenerated bit-for-bit without storing images.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

SPLITS = {"source_train": (0, 4096), "source_holdout": (1, 1024), "test": (2, 16384)}

# per-severity parameters, ordered so larger severity means a larger perturbation
SEVERITY = {
    "gaussian_noise": (0.06, 0.10, 0.14, 0.19, 0.25),
    "speckle_noise": (0.15, 0.20, 0.35, 0.45, 0.60),
    "box_blur": (2, 3, 4, 5, 6),
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),
    "pixelate": (0.6, 0.5, 0.4, 0.3, 0.25),
}
CORRUPTIONS = tuple(SEVERITY)
_KIND_CODE = {k: i for i, k in enumerate(CORRUPTIONS)}

SMOOTH = 0.8
SENSOR_NOISE = 0.08

EXPORT_MAGIC = b"FWDA"
EXPORT_VERSION = 1


class DataConfigError(ValueError):
    """Unknown split/corruption or a request the split cannot satisfy."""


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY:
            raise DataConfigError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTIONS}")
        if not 1 <= self.severity <= 5:
            raise DataConfigError(f"severity must be in 1..5, got {self.severity}")

    @property
    def level(self):
        return SEVERITY[self.kind][self.severity - 1]


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def render(label: int, rng: np.random.Generator, size: int = 16) -> np.ndarray:
    """Draw one jittered class prototype as a (size, size) image in [0, 1]."""
    yy, xx = _grid(size)
    c = (size - 1) / 2.0
    cy, cx = c + rng.uniform(-2, 2), c + rng.uniform(-2, 2)
    dy, dx = yy - cy, xx - cx
    period = rng.uniform(3.5, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    width = rng.uniform(1.2, 2.2)
    r = np.hypot(dy, dx)
    if label == 0:  # horizontal bars
        mask = np.cos(2 * np.pi * yy / period + phase) > 0.2
    elif label == 1:  # vertical bars
        mask = np.cos(2 * np.pi * xx / period + phase) > 0.2
    elif label == 2:  # plus
        mask = (np.abs(dy) < width) | (np.abs(dx) < width)
    elif label == 3:  # diagonal cross
        mask = (np.abs(dy - dx) < 1.2 * width) | (np.abs(dy + dx) < 1.2 * width)
    elif label == 4:  # disk
        mask = r < rng.uniform(3.5, 5.5)
    elif label == 5:  # ring
        rad = rng.uniform(4.0, 5.5)
        mask = np.abs(r - rad) < 0.9 * width
    elif label == 6:  # checkerboard
        cell = rng.uniform(3.0, 4.5)
        mask = (np.floor((yy + phase) / cell) + np.floor((xx + phase) / cell)) % 2 == 0
    elif label == 7:  # diagonal stripes
        mask = np.cos(2 * np.pi * (yy + xx) / (1.4 * period) + phase) > 0.2
    else:
        raise DataConfigError(f"label {label} out of range")
    fg, bg = rng.uniform(0.6, 1.0), rng.uniform(0.0, 0.25)
    soft = gaussian_filter(mask.astype(np.float64), SMOOTH, mode="nearest")
    img = bg + (fg - bg) * soft + rng.normal(0.0, rng.uniform(0.0, SENSOR_NOISE), (size, size))
    return np.clip(img, 0.0, 1.0)


def corrupt(img: np.ndarray, corruption: Corruption, rng: np.random.Generator) -> np.ndarray:
    """Apply one corruption to a (H, W) image; output clamped to [0, 1]."""
    s = corruption.level
    kind = corruption.kind
    if kind == "gaussian_noise":
        out = img + rng.normal(0.0, s, img.shape)
    elif kind == "speckle_noise":
        out = img + img * rng.normal(0.0, s, img.shape)
    elif kind == "box_blur":
        out = uniform_filter(img, size=s, mode="reflect")
    elif kind == "contrast":
        m = img.mean()
        out = (img - m) * s + m
    else:  # pixelate
        h = img.shape[0]
        k = max(1, int(round(h * s)))
        edges = np.linspace(0, h, k + 1).astype(int)
        idx = np.repeat(np.arange(k), np.diff(edges))
        block = np.zeros((k, k))
        np.add.at(block, (idx[:, None], idx[None, :]), img)
        block /= np.outer(np.diff(edges), np.diff(edges))
        out = block[idx][:, idx]
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class SyntheticDataset:
    seed: int = 0
    classes: int = 8
    size: int = 16

    def split_size(self, split: str) -> int:
        if split not in SPLITS:
            raise DataConfigError(f"unknown split {split!r}; expected one of {tuple(SPLITS)}")
        return SPLITS[split][1]

    def label(self, split: str, index) -> np.ndarray:
        self.split_size(split)
        return np.asarray(index) % self.classes

    def images(self, split: str, indices, corruption: Corruption | None = None) -> np.ndarray:
        """(N, 1, H, W) images for explicit sample indices."""
        code, n = SPLITS.get(split, (None, None))
        if code is None:
            raise DataConfigError(f"unknown split {split!r}; expected one of {tuple(SPLITS)}")
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= n):
            raise DataConfigError(f"index out of range for split {split!r} of size {n}")
        out = np.empty((len(indices), 1, self.size, self.size))
        for i, idx in enumerate(indices):
            img = render(int(idx) % self.classes, np.random.default_rng([self.seed, code, int(idx)]), self.size)
            if corruption is not None:
                crng = np.random.default_rng(
                    [self.seed, code, int(idx), 1 + _KIND_CODE[corruption.kind], corruption.severity, corruption.seed]
                )
                img = corrupt(img, corruption, crng)
            out[i, 0] = img
        return out

    def sample_batch(self, split: str, size: int, corruption: Corruption | None = None, seed: int = 0):
        """Draw ``size`` distinct samples of a split; returns ``(inputs, labels)``."""
        n = self.split_size(split)
        if size < 1 or size > n:
            raise DataConfigError(f"batch size must be in 1..{n} for split {split!r}, got {size}")
        idx = np.random.default_rng([self.seed, seed]).permutation(n)[:size]
        return self.images(split, idx, corruption), self.label(split, idx)

    def full_split(self, split: str, count: int | None = None, corruption: Corruption | None = None):
        n = self.split_size(split)
        idx = np.arange(n if count is None else min(count, n))
        return self.images(split, idx, corruption), self.label(split, idx)


def make_drls_sets(dataset: SyntheticDataset, n_per_domain: int, ood_corruption: Corruption, seed: int = 0):
    """Clean ID and corrupted OOD sets from disjoint source-holdout samples."""
    n = dataset.split_size("source_holdout")
    if n_per_domain < 1 or 2 * n_per_domain > n:
        raise DataConfigError(f"n_per_domain must be in 1..{n // 2}, got {n_per_domain}")
    idx = np.random.default_rng([dataset.seed, seed, 7]).permutation(n)
    d_id = dataset.images("source_holdout", idx[:n_per_domain])
    d_ood = dataset.images("source_holdout", idx[n_per_domain : 2 * n_per_domain], ood_corruption)
    return d_id, d_ood


def export_split(path, images: np.ndarray, labels: np.ndarray, classes: int) -> None:
    """Write the flat binary export: header then float32 images then uint16 labels (little endian)."""
    n, _, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHHHI", EXPORT_MAGIC, EXPORT_VERSION, classes, h, w, n))
        f.write(images.astype("<f4").tobytes())
        f.write(np.asarray(labels).astype("<u2").tobytes())


def read_export(path):
    with open(path, "rb") as f:
        magic, version, classes, h, w, n = struct.unpack("<4sHHHHI", f.read(16))
        if magic != EXPORT_MAGIC or version != EXPORT_VERSION:
            raise DataConfigError(f"{path}: not a version-{EXPORT_VERSION} export file")
        images = np.frombuffer(f.read(4 * n * h * w), dtype="<f4").reshape(n, 1, h, w)
        labels = np.frombuffer(f.read(2 * n), dtype="<u2")
    return images, labels, classes
