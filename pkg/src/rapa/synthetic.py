"""Deterministic synthetic 10-class image set in the CIFAR-10 binary format.

Each class is a fixed smooth random RGB pattern; each image is that pattern
under a random cyclic shift, contrast jitter, and pixel noise. The files
written are byte-compatible with the real binary batches (3073-byte
records, channel-planar), so the full loader/training path can run on desks
without the real data.
"""

from __future__ import annotations

import os

import numpy as np

from .numcore import SeededRng
from .training import TEST_FILE, TRAIN_FILES

__all__ = ["class_patterns", "write_synthetic_cifar10"]

SIDE = 32
CLASSES = 10


def class_patterns(rng: SeededRng) -> np.ndarray:
    """(10, 32, 32, 3) smooth per-class patterns with values in [0.15, 0.85]."""
    yy, xx = np.meshgrid(np.arange(SIDE), np.arange(SIDE), indexing="ij")
    patterns = np.zeros((CLASSES, SIDE, SIDE, 3))
    for cls in range(CLASSES):
        g = rng.derive("pattern", cls)
        for ch in range(3):
            field = np.zeros((SIDE, SIDE))
            for fy in range(3):
                for fx in range(3):
                    if fy == fx == 0:
                        continue
                    amp = g.normal(0.0, 1.0 / (fy + fx))
                    phase = g.uniform(0.0, 2 * np.pi)
                    field += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) / SIDE + phase)
            lo, hi = field.min(), field.max()
            patterns[cls, :, :, ch] = 0.15 + 0.7 * (field - lo) / (hi - lo)
    return patterns


def _render(pattern: np.ndarray, rng: SeededRng, noise: float) -> np.ndarray:
    dy, dx = rng.integers(0, SIDE, size=2)
    img = np.roll(pattern, (int(dy), int(dx)), axis=(0, 1))
    contrast = rng.uniform(0.75, 1.25)
    img = 0.5 + contrast * (img - 0.5)
    img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _records(patterns, count, rng, noise) -> bytes:
    out = bytearray()
    labels = np.arange(count) % CLASSES
    labels = labels[rng.permutation(count)]
    for i, label in enumerate(labels):
        img = _render(patterns[label], rng.derive("img", i), noise)
        out.append(int(label))
        out.extend(img.transpose(2, 0, 1).tobytes())  # channel-planar R,G,B
    return bytes(out)


def write_synthetic_cifar10(
    path: str,
    n_train: int = 2000,
    n_test: int = 1000,
    seed: int = 7,
    noise: float = 0.12,
) -> str:
    """Write the six standard batch files under `path`; returns `path`."""
    os.makedirs(path, exist_ok=True)
    rng = SeededRng(seed)
    patterns = class_patterns(rng)
    base, extra = divmod(n_train, len(TRAIN_FILES))
    for i, name in enumerate(TRAIN_FILES):
        count = base + (1 if i < extra else 0)
        with open(os.path.join(path, name), "wb") as f:
            f.write(_records(patterns, count, rng.derive("train", i), noise))
    with open(os.path.join(path, TEST_FILE), "wb") as f:
        f.write(_records(patterns, n_test, rng.derive("test"), noise))
    return path
