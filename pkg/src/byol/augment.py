"""Stochastic image transformations used to build the two views.

Images are float arrays in [0, 1] with layout (C, H, W); batches are
(B, C, H, W). Random draws happen per image from an :class:`RngStream`
keyed on the image's dataset index, so an image's transformation does not
depend on which other images share its batch. Drawing (``sample_transform``)
is separated from rendering (``render``) so that rendering can be
vectorised over a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

LUMA = np.array([0.2989, 0.5870, 0.1140])
CROP_ATTEMPTS = 10


@dataclass
class AugmentationParams:
    crop_prob: float = 1.0
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness_max: float = 0.4
    contrast_max: float = 0.4
    saturation_max: float = 0.2
    hue_max: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 1.0
    solarize_prob: float = 0.0
    target_size: tuple[int, int] = (32, 32)
    area_range: tuple[float, float] = (0.08, 1.0)
    aspect_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    blur_kernel_fraction: float = 23 / 224
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        self.target_size = tuple(int(v) for v in self.target_size)
        self.area_range = tuple(float(v) for v in self.area_range)
        self.aspect_ratio_range = tuple(float(v) for v in self.aspect_ratio_range)
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        for name in ("crop_prob", "flip_prob", "jitter_prob", "grayscale_prob", "blur_prob", "solarize_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        for name in ("brightness_max", "contrast_max", "saturation_max", "hue_max", "blur_kernel_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        lo, hi = self.area_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"area_range {self.area_range} must lie in (0, 1]")
        lo, hi = self.aspect_ratio_range
        if not (0 < lo <= hi):
            raise ValueError(f"aspect_ratio_range {self.aspect_ratio_range} invalid")
        lo, hi = self.blur_sigma_range
        if not (0 < lo <= hi):
            raise ValueError(f"blur_sigma_range {self.blur_sigma_range} invalid")

    @classmethod
    def view_one(cls, **kw) -> "AugmentationParams":
        """Defaults for the first view distribution (always blurred, never solarized)."""
        return cls(**kw)

    @classmethod
    def view_two(cls, **kw) -> "AugmentationParams":
        """Defaults for the second view distribution."""
        kw.setdefault("blur_prob", 0.1)
        kw.setdefault("solarize_prob", 0.2)
        return cls(**kw)

    def without(self, *primitives: str) -> "AugmentationParams":
        """Copy with the named primitives switched off (crop, flip, jitter, grayscale, blur, solarize)."""
        keys = {
            "crop": "crop_prob", "flip": "flip_prob", "jitter": "jitter_prob",
            "grayscale": "grayscale_prob", "blur": "blur_prob", "solarize": "solarize_prob",
        }
        return replace(self, **{keys[p]: 0.0 for p in primitives})


class RngStream:
    """Seeded source of independent per-image generators.

    ``stream.generator(step, index, view)`` always yields the same sequence
    for the same keys, whatever else is drawn elsewhere.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, *keys: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *[int(k) for k in keys]])


@dataclass
class Transform:
    """One fully drawn transformation for a single image."""

    crop: tuple[float, float, float, float]  # y0, x0, h, w in source pixels
    flip: bool = False
    jitter_order: tuple[int, ...] = ()  # empty when jitter not applied
    brightness: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    grayscale: bool = False
    blur_sigma: float | None = None
    solarize: bool = False


# -- crop --------------------------------------------------------------------

def sample_crop_box(rng: np.random.Generator, height: int, width: int,
                    area_range=(0.08, 1.0), ratio_range=(3 / 4, 4 / 3)) -> tuple[float, float, float, float]:
    """Draw a real-valued crop box (y0, x0, h, w).

    The area fraction is uniform on ``area_range``; the aspect ratio is
    log-uniform on the part of ``ratio_range`` for which a box of that area
    fits inside the image. Draws with no feasible ratio are retried, then
    the largest centred box with an admissible ratio is returned.
    """
    total = float(height * width)
    log_lo, log_hi = math.log(ratio_range[0]), math.log(ratio_range[1])
    for _ in range(CROP_ATTEMPTS):
        frac = rng.uniform(area_range[0], area_range[1])
        area = frac * total
        # w = sqrt(area*r) <= width and h = sqrt(area/r) <= height
        lo = max(log_lo, math.log(area / (height * height)))
        hi = min(log_hi, math.log(width * width / area))
        if lo > hi:
            continue
        ratio = math.exp(rng.uniform(lo, hi))
        w = min(math.sqrt(area * ratio), width)
        h = min(math.sqrt(area / ratio), height)
        y0 = rng.uniform(0.0, height - h)
        x0 = rng.uniform(0.0, width - w)
        return (y0, x0, h, w)
    in_ratio = width / height
    if in_ratio < ratio_range[0]:
        w = float(width)
        h = w / ratio_range[0]
    elif in_ratio > ratio_range[1]:
        h = float(height)
        w = h * ratio_range[1]
    else:
        h, w = float(height), float(width)
    return ((height - h) / 2, (width - w) / 2, h, w)


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def bicubic_matrices(starts, lengths, n_in: int, n_out: int) -> np.ndarray:
    """(B, n_out, n_in) matrices resampling source intervals [start, start+length) to n_out samples.

    Taps falling outside the image are clamped to the edge pixel; rows are
    renormalised to sum to one.
    """
    starts = np.asarray(starts, dtype=float).reshape(-1, 1)
    lengths = np.asarray(lengths, dtype=float).reshape(-1, 1)
    centres = starts + (np.arange(n_out) + 0.5) * (lengths / n_out) - 0.5  # (B, n_out)
    base = np.floor(centres).astype(int)
    taps = base[..., None] + np.arange(-1, 3)  # (B, n_out, 4)
    wts = _cubic(centres[..., None] - taps)
    onehot = np.clip(taps, 0, n_in - 1)[..., None] == np.arange(n_in)  # (B, n_out, 4, n_in)
    m = (wts[..., None] * onehot).sum(axis=2)
    return m / m.sum(axis=-1, keepdims=True)


def bicubic_matrix(start: float, length: float, n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) resampling matrix for one interval."""
    return bicubic_matrices([start], [length], n_in, n_out)[0]


def resize_crop(img: np.ndarray, box, size: tuple[int, int]) -> np.ndarray:
    """Crop ``box`` from a (C, H, W) image and resize it bicubically to ``size``."""
    y0, x0, h, w = box
    _, H, W = img.shape
    my = bicubic_matrix(y0, h, H, size[0])
    mx = bicubic_matrix(x0, w, W, size[1])
    return np.clip(my @ img @ mx.T, 0.0, 1.0)


def random_resized_crop(img: np.ndarray, rng: np.random.Generator, params: AugmentationParams) -> np.ndarray:
    box = sample_crop_box(rng, img.shape[1], img.shape[2], params.area_range, params.aspect_ratio_range)
    return resize_crop(img, box, params.target_size)


def center_crop_eval(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize the shorter side to 8/7 of the target, then take a centred crop of ``size``.

    Implemented as the equivalent crop-then-resize so it needs one resampling.
    """
    _, H, W = img.shape
    short = min(H, W)
    scale = short / (size[0] * 8 / 7)  # source pixels per output pixel
    h, w = size[0] * scale, size[1] * scale
    return resize_crop(img, ((H - h) / 2, (W - w) / 2, h, w), size)


# -- colour ------------------------------------------------------------------

def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Replace every channel by the luma 0.2989 r + 0.5870 g + 0.1140 b."""
    if img.shape[-3] != 3:
        raise ValueError(f"to_grayscale needs 3 channels, got {img.shape[-3]}")
    luma = np.tensordot(LUMA, img, axes=([0], [-3])) if img.ndim == 3 else np.einsum("c,bchw->bhw", LUMA, img)
    return np.repeat(np.expand_dims(luma, -3), 3, axis=-3)


def _luma(img: np.ndarray) -> np.ndarray:
    return np.einsum("c,...chw->...hw", LUMA, img)[..., None, :, :]


def adjust_brightness(img: np.ndarray, offset) -> np.ndarray:
    """Additive shift of every pixel."""
    return np.clip(img + offset, 0.0, 1.0)


def adjust_contrast(img: np.ndarray, factor) -> np.ndarray:
    """Scale deviations from the image's mean luma by ``factor``."""
    m = _luma(img).mean(axis=(-2, -1), keepdims=True)
    return np.clip((img - m) * factor + m, 0.0, 1.0)


def adjust_saturation(img: np.ndarray, factor) -> np.ndarray:
    """Interpolate between the per-pixel luma and the colour image."""
    g = _luma(img)
    return np.clip((img - g) * factor + g, 0.0, 1.0)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(d > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-3)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0, :, :], hsv[..., 1, :, :], hsv[..., 2, :, :]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-3)


def adjust_hue(img: np.ndarray, delta) -> np.ndarray:
    """Rotate hue by ``delta`` turns (1.0 is a full cycle)."""
    hsv = rgb_to_hsv(img)
    delta = np.asarray(delta, dtype=float)
    if delta.ndim:
        delta = delta.reshape(delta.shape + (1, 1))
    hsv[..., 0, :, :] = (hsv[..., 0, :, :] + delta) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


JITTER_OPS = ("brightness", "contrast", "saturation", "hue")


def sample_jitter(rng: np.random.Generator, params: AugmentationParams) -> dict:
    order = tuple(int(i) for i in rng.permutation(4))
    return dict(
        jitter_order=order,
        brightness=rng.uniform(-params.brightness_max, params.brightness_max),
        contrast=rng.uniform(1 - params.contrast_max, 1 + params.contrast_max),
        saturation=rng.uniform(1 - params.saturation_max, 1 + params.saturation_max),
        hue=rng.uniform(-params.hue_max, params.hue_max),
    )


def _apply_jitter_op(img: np.ndarray, op: int, t: dict) -> np.ndarray:
    if op == 0:
        return adjust_brightness(img, t["brightness"])
    if op == 1:
        return adjust_contrast(img, t["contrast"])
    if op == 2:
        return adjust_saturation(img, t["saturation"])
    return adjust_hue(img, t["hue"])


def color_jitter(img: np.ndarray, rng: np.random.Generator, params: AugmentationParams) -> np.ndarray:
    t = sample_jitter(rng, params)
    for op in t["jitter_order"]:
        img = _apply_jitter_op(img, op, t)
    return img


# -- blur / solarize ---------------------------------------------------------

def blur_kernel_size(height: int, fraction: float = 23 / 224) -> int:
    """Odd kernel size closest to ``fraction * height`` (23 at 224), at least 3."""
    return max(3, 2 * int(round((fraction * height - 1) / 2)) + 1)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    # mirror without repeating the edge sample (numpy "reflect" padding)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = idx % period
    return np.where(idx >= n, period - idx, idx)


def blur_matrices(n: int, size: int, sigmas) -> np.ndarray:
    """(B, n, n) matrices applying a 1-D Gaussian per sigma with reflect padding."""
    sigmas = np.asarray(sigmas, dtype=float).reshape(-1, 1)
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (r / sigmas) ** 2)
    k /= k.sum(axis=1, keepdims=True)  # (B, size)
    src = _reflect_index(np.arange(n)[:, None] + np.arange(size) - size // 2, n)  # (n, size)
    onehot = src[..., None] == np.arange(n)  # (n, size, n)
    return np.einsum("bk,ikj->bij", k, onehot.astype(float))


def blur_matrix(n: int, size: int, sigma: float) -> np.ndarray:
    return blur_matrices(n, size, [sigma])[0]


def blur_with_sigma(img: np.ndarray, sigma: float, fraction: float = 23 / 224) -> np.ndarray:
    _, H, W = img.shape
    size = blur_kernel_size(H, fraction)
    return blur_matrix(H, size, sigma) @ img @ blur_matrix(W, size, sigma).T


def gaussian_blur(img: np.ndarray, rng: np.random.Generator, params: AugmentationParams) -> np.ndarray:
    sigma = rng.uniform(*params.blur_sigma_range)
    return blur_with_sigma(img, sigma, params.blur_kernel_fraction)


def solarize(img: np.ndarray) -> np.ndarray:
    return np.where(img < 0.5, img, 1.0 - img)


# -- full pipeline -----------------------------------------------------------

def sample_transform(rng: np.random.Generator, params: AugmentationParams, height: int, width: int) -> Transform:
    """Draw every random choice for one image, in pipeline order."""
    if rng.uniform() < params.crop_prob:
        box = sample_crop_box(rng, height, width, params.area_range, params.aspect_ratio_range)
    else:
        box = (0.0, 0.0, float(height), float(width))
    t = Transform(crop=box)
    t.flip = bool(rng.uniform() < params.flip_prob)
    if rng.uniform() < params.jitter_prob:
        for k, v in sample_jitter(rng, params).items():
            setattr(t, k, v)
    t.grayscale = bool(rng.uniform() < params.grayscale_prob)
    if rng.uniform() < params.blur_prob:
        t.blur_sigma = float(rng.uniform(*params.blur_sigma_range))
    t.solarize = bool(rng.uniform() < params.solarize_prob)
    return t


def render(images: np.ndarray, transforms: Sequence[Transform], params: AugmentationParams) -> np.ndarray:
    """Apply drawn transforms to a (B, C, H, W) batch; values stay in [0, 1]."""
    B, C, H, W = images.shape
    th, tw = params.target_size
    boxes = np.array([t.crop for t in transforms], dtype=float).reshape(-1, 4)
    my = bicubic_matrices(boxes[:, 0], boxes[:, 2], H, th)
    mx = bicubic_matrices(boxes[:, 1], boxes[:, 3], W, tw)
    flip = np.array([t.flip for t in transforms])
    mx[flip] = mx[flip, ::-1]
    out = np.clip(my[:, None] @ images @ np.swapaxes(mx, 1, 2)[:, None], 0.0, 1.0)

    jit = np.array([bool(t.jitter_order) for t in transforms])
    if jit.any() and C == 3:
        factors = {
            0: np.array([t.brightness for t in transforms]),
            1: np.array([t.contrast for t in transforms]),
            2: np.array([t.saturation for t in transforms]),
            3: np.array([t.hue for t in transforms]),
        }
        for slot in range(4):
            for op in range(4):
                sel = np.array([bool(t.jitter_order) and t.jitter_order[slot] == op for t in transforms])
                if not sel.any():
                    continue
                f = factors[op][sel]
                sub = out[sel]
                if op == 0:
                    sub = adjust_brightness(sub, f[:, None, None, None])
                elif op == 1:
                    sub = adjust_contrast(sub, f[:, None, None, None])
                elif op == 2:
                    sub = adjust_saturation(sub, f[:, None, None, None])
                else:
                    sub = adjust_hue(sub, f)
                out[sel] = sub

    gray = np.array([t.grayscale for t in transforms])
    if gray.any() and C == 3:
        out[gray] = to_grayscale(out[gray])

    blur = np.array([t.blur_sigma is not None for t in transforms])
    if blur.any():
        size = blur_kernel_size(th, params.blur_kernel_fraction)
        sig = [t.blur_sigma for t in transforms if t.blur_sigma is not None]
        by = blur_matrices(th, size, sig)
        bx = by if th == tw else blur_matrices(tw, size, sig)
        out[blur] = np.clip(by[:, None] @ out[blur] @ np.swapaxes(bx, 1, 2)[:, None], 0.0, 1.0)

    sol = np.array([t.solarize for t in transforms])
    if sol.any():
        out[sol] = solarize(out[sol])
    return out


def normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=float).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=float).reshape(-1, 1, 1)
    return (images - m) / s


def apply_pipeline(img: np.ndarray, params: AugmentationParams, rng: np.random.Generator,
                   mean: Sequence[float] | None = None, std: Sequence[float] | None = None) -> np.ndarray:
    """Full stochastic pipeline on one (C, H, W) image, followed by channel normalisation."""
    t = sample_transform(rng, params, img.shape[1], img.shape[2])
    out = render(img[None], [t], params)[0]
    C = img.shape[0]
    return normalize(out, mean if mean is not None else [0.0] * C, std if std is not None else [1.0] * C)


def augment_batch(images: np.ndarray, indices: Sequence[int], params: AugmentationParams,
                  stream: RngStream, step: int, view: int,
                  mean: Sequence[float] | None = None, std: Sequence[float] | None = None) -> np.ndarray:
    """Augment a batch; image ``i`` draws from ``stream.generator(step, indices[i], view)``."""
    H, W = images.shape[2], images.shape[3]
    transforms = [sample_transform(stream.generator(step, idx, view), params, H, W) for idx in indices]
    out = render(images, transforms, params)
    C = images.shape[1]
    return normalize(out, mean if mean is not None else [0.0] * C, std if std is not None else [1.0] * C)


def eval_batch(images: np.ndarray, size: tuple[int, int], mean=None, std=None) -> np.ndarray:
    out = np.stack([center_crop_eval(img, size) for img in images]) if len(images) else images
    C = images.shape[1]
    return normalize(out, mean if mean is not None else [0.0] * C, std if std is not None else [1.0] * C)
