"""Datasets: CIFAR-10 binary batches and a synthetic class-conditional image generator."""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class ImageBatch:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64, evaluation only

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "ImageBatch":
        idx = np.asarray(idx)
        return ImageBatch(self.images[idx], self.labels[idx])

    def channel_stats(self) -> tuple[list[float], list[float]]:
        """Per-channel mean and std over the whole set (fallback 0/1 when empty)."""
        if len(self) == 0:
            C = self.images.shape[1] if self.images.ndim == 4 else 3
            return [0.0] * C, [1.0] * C
        m = self.images.mean(axis=(0, 2, 3))
        s = self.images.std(axis=(0, 2, 3))
        return m.tolist(), np.where(s > 0, s, 1.0).tolist()


def load_cifar10(path) -> ImageBatch:
    """Parse one or more CIFAR-10 binary files (label byte + 3072 R/G/B plane bytes per record).

    ``path`` may be a file or a directory (all ``*.bin`` files, sorted).
    """
    if os.path.isdir(path):
        files = sorted(os.path.join(path, f) for f in os.listdir(path) if f.endswith(".bin"))
    else:
        files = [path]
    images, labels = [], []
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size % CIFAR_RECORD:
            n_full = raw.size // CIFAR_RECORD
            raise ValueError(f"{f}: truncated record at byte offset {n_full * CIFAR_RECORD} "
                             f"({raw.size - n_full * CIFAR_RECORD} trailing bytes)")
        rec = raw.reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0].astype(np.int64)
        if np.any(lab > 9):
            bad = int(np.argmax(lab > 9))
            raise ValueError(f"{f}: label {lab[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
        labels.append(lab)
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    if not images:
        return ImageBatch(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64))
    return ImageBatch(np.concatenate(images), np.concatenate(labels))


def write_cifar10(path, batch: ImageBatch) -> None:
    """Write images/labels in the CIFAR-10 binary layout (used for fixtures)."""
    n = len(batch)
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = batch.labels.astype(np.uint8)
    rec[:, 1:] = np.clip(np.round(batch.images * 255), 0, 255).astype(np.uint8).reshape(n, -1)
    rec.tofile(path)


@dataclass
class SynthSpec:
    """Knobs for :func:`synth_clusters`. Defaults give well-separated classes."""

    position_jitter: float = 0.05  # std of blob centre, fraction of image size
    class_positions: bool = True  # class decides the blob position
    layout: str = "circle"  # "circle": centres on a ring; "rows": stacked vertically (flip-symmetric)
    class_colors: bool = True  # class decides the blob hue
    hue_noise: float = 0.03
    radius_range: tuple[float, float] = (0.18, 0.26)
    stripe_freq: float = 0.22  # cycles per pixel of the class texture
    background_noise: float = 0.05
    background_range: tuple[float, float] = (0.1, 0.4)
    background_tint: float = 0.0  # per-image, per-channel background offset amplitude
    value_range: tuple[float, float] = (0.7, 1.0)  # blob brightness (HSV value)


def _class_layout(c: int, n_classes: int, layout: str = "circle"):
    if layout == "rows":
        centre = ((c + 0.5) / n_classes, 0.5)
    else:
        angle = 2 * np.pi * c / n_classes
        centre = (0.5 + 0.25 * np.sin(angle), 0.5 + 0.25 * np.cos(angle))
    hue = c / n_classes
    orient = np.pi * c / n_classes
    return centre, hue, orient


def synth_clusters(n_classes: int, n_per_class: int, image_size: int = 16, seed: int = 0,
                   spec: SynthSpec | None = None) -> ImageBatch:
    """Class-conditional textured blobs on noisy backgrounds.

    Each class fixes a blob position, hue and stripe orientation; every image
    draws its own jitter around those, plus phase, radius and background.
    Class templates do not depend on ``seed`` so train and test sets drawn
    with different seeds share classes.
    """
    if n_classes <= 0 or image_size <= 0 or n_per_class < 0:
        raise ValueError("sizes must be positive")
    spec = spec or SynthSpec()
    rng = np.random.default_rng([int(seed), 0xC1A55])
    S = image_size
    yy, xx = np.meshgrid(np.arange(S) + 0.5, np.arange(S) + 0.5, indexing="ij")
    n = n_classes * n_per_class
    images = np.empty((n, 3, S, S))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    for i, c in enumerate(labels):
        centre, hue, orient = _class_layout(int(c), n_classes, spec.layout)
        if not spec.class_positions:
            centre = (rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7))
        cy = (centre[0] + rng.normal(0, spec.position_jitter)) * S
        cx = (centre[1] + rng.normal(0, spec.position_jitter)) * S
        radius = rng.uniform(*spec.radius_range) * S
        if not spec.class_colors:
            hue = rng.uniform()
        h = (hue + rng.normal(0, spec.hue_noise)) % 1.0
        colour = np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.6, 1.0), rng.uniform(*spec.value_range)))
        phase = rng.uniform(0, 2 * np.pi)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * spec.stripe_freq * (xx * np.cos(orient) + yy * np.sin(orient)) + phase)
        mask = 1.0 / (1.0 + np.exp(((yy - cy) ** 2 + (xx - cx) ** 2) ** 0.5 - radius))
        bg = rng.uniform(*spec.background_range) + rng.normal(0, spec.background_noise, size=(3, S, S))
        if spec.background_tint:
            bg = bg + rng.uniform(-spec.background_tint, spec.background_tint, size=(3, 1, 1))
        fg = colour[:, None, None] * (0.55 + 0.45 * stripes)
        images[i] = np.clip(bg * (1 - mask) + fg * mask, 0.0, 1.0)
    order = rng.permutation(n)
    return ImageBatch(images[order], labels[order].astype(np.int64))
