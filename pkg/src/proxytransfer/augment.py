"""Training-time augmentation and normalization of channels-first RGB patches.

Images are float arrays of shape (3, H, W) with values in [0, 1].  Every
random draw for a sample comes from a generator derived from
(run_seed, epoch, sample_index), so an epoch can be replayed exactly no matter
how samples are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import ConfigError, IngestionError

LUMA = np.array([0.299, 0.587, 0.114])
ROTATION_MODES = ("quarter", "continuous", "none")


@dataclass
class AugmentConfig:
    pad_fraction: float = 0.125
    crop_size: int | None = None  # None: keep the input size
    jitter_threshold: float = 0.4
    rotation_mode: str = "quarter"
    flip_prob: float = 0.5
    channel_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    channel_std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    resize_target: int | None = None

    def __post_init__(self):
        if not 0 <= self.jitter_threshold < 1:
            raise ConfigError(f"jitter_threshold must lie in [0, 1), got {self.jitter_threshold}")
        if self.pad_fraction < 0:
            raise ConfigError("pad_fraction must be >= 0")
        if self.rotation_mode not in ROTATION_MODES:
            raise ConfigError(f"rotation_mode must be one of {ROTATION_MODES}")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if np.any(np.asarray(self.channel_std) <= 0):
            raise ConfigError(f"channel_std must be positive, got {self.channel_std}")
        if self.crop_size is not None and self.crop_size < 1:
            raise ConfigError("crop_size must be >= 1")

    @classmethod
    def no_augmentation(cls, **kwargs) -> "AugmentConfig":
        """Only resize/normalization; no randomness at all."""
        return cls(pad_fraction=0.0, jitter_threshold=0.0, rotation_mode="none", flip_prob=0.0, **kwargs)


def sample_rng(run_seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(run_seed), int(epoch), int(index)]))


def read_image(path) -> np.ndarray:
    """Decode an 8-bit PNG to a (3, H, W) uint8 array."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from None
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, img_u8: np.ndarray) -> None:
    PILImage.fromarray(np.ascontiguousarray(img_u8.transpose(1, 2, 0))).save(Path(path), format="PNG")


def to_float(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float32) / np.float32(255.0)


# -- geometric ops ----------------------------------------------------------------

def reflect_pad(img: np.ndarray, fraction: float) -> np.ndarray:
    """Pad each side by floor(fraction * side), mirroring about the border pixel."""
    _, h, w = img.shape
    ph, pw = int(np.floor(fraction * h)), int(np.floor(fraction * w))
    if ph >= h or pw >= w:
        raise ConfigError(f"reflection pad {ph}x{pw} too large for {h}x{w} image")
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, 0), (ph, ph), (pw, pw)), mode="reflect")


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    if size > h or size > w:
        raise ConfigError(f"crop size {size} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[:, top:top + size, left:left + size]


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    if size > h or size > w:
        raise ConfigError(f"crop size {size} exceeds image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[:, top:top + size, left:left + size]


def _resize_axis(img: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    if n == out:
        return img
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    wgt = (src - i0).astype(img.dtype)
    shape = [1] * img.ndim
    shape[axis] = out
    wgt = wgt.reshape(shape)
    v0 = np.take(img, i0, axis=axis)
    v1 = np.take(img, i1, axis=axis)
    return v0 + wgt * (v1 - v0)


def resize_bilinear(img: np.ndarray, target: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel centers at (i + 0.5) / N (align_corners off)."""
    th, tw = (target, target) if np.isscalar(target) else target
    if th < 1 or tw < 1:
        raise ConfigError(f"resize target must be >= 1, got {target}")
    return _resize_axis(_resize_axis(img, int(th), 1), int(tw), 2)


def random_flip_rotate(img: np.ndarray, rng: np.random.Generator, mode: str = "quarter",
                       flip_prob: float = 0.5) -> np.ndarray:
    if mode not in ROTATION_MODES:
        raise ConfigError(f"rotation_mode must be one of {ROTATION_MODES}")
    if mode == "quarter" and img.shape[1] != img.shape[2]:
        raise ConfigError(f"90-degree rotations need a square image, got {img.shape[1]}x{img.shape[2]}")
    if rng.random() < flip_prob:
        img = img[:, :, ::-1]
    if mode == "quarter":
        img = np.rot90(img, int(rng.integers(0, 4)), axes=(1, 2))
    elif mode == "continuous":
        angle = rng.uniform(-180.0, 180.0)
        img = np.clip(ndimage.rotate(img, angle, axes=(1, 2), reshape=False, order=1, mode="reflect"), 0, 1)
    return img


# -- photometric ops --------------------------------------------------------------

def _gray(img: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA.astype(img.dtype), img, axes=(0, 0))


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * img.dtype.type(factor), 0, 1)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    m = _gray(img).mean()
    return np.clip(m + img.dtype.type(factor) * (img - m), 0, 1)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    g = _gray(img)[None]
    return np.clip(g + img.dtype.type(factor) * (img - g), 0, 1)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Channels-first RGB in [0, 1] to HSV with hue in turns."""
    r, g, b = img
    v = img.max(axis=0)
    delta = v - img.min(axis=0)
    safe = np.where(delta > 0, delta, 1)
    s = np.where(v > 0, delta / np.where(v > 0, v, 1), 0)
    h = np.where(v == r, (g - b) / safe, np.where(v == g, 2 + (b - r) / safe, 4 + (r - g) / safe))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0)
    return np.stack([h, s, v])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    h6 = h * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    # (R, G, B) choices for sectors 0..5
    r = np.choose(sector, (v, q, p, p, t, v))
    g = np.choose(sector, (t, v, v, q, p, p))
    b = np.choose(sector, (p, p, t, v, v, q))
    return np.stack([r, g, b])


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by ``shift`` turns of the color wheel."""
    hsv = rgb_to_hsv(img)
    hsv[0] = (hsv[0] + shift) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0, 1).astype(img.dtype, copy=False)


def color_jitter(img: np.ndarray, threshold: float, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter applied in a random order.

    Factors are drawn from U[1 - t, 1 + t] and the hue shift from U[-t, t].
    A factor of exactly 1 (or a zero shift) skips its op, so ``t = 0`` is an
    exact identity.
    """
    if not 0 <= threshold < 1:
        raise ConfigError(f"jitter threshold must lie in [0, 1), got {threshold}")
    order = rng.permutation(4)
    b, c, s = rng.uniform(1 - threshold, 1 + threshold, size=3)
    h = rng.uniform(-threshold, threshold)
    for op in order:
        if op == 0 and b != 1:
            img = adjust_brightness(img, b)
        elif op == 1 and c != 1:
            img = adjust_contrast(img, c)
        elif op == 2 and s != 1:
            img = adjust_saturation(img, s)
        elif op == 3 and h != 0:
            img = adjust_hue(img, h)
    return img


def channel_normalize(img: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    mean = np.asarray(mean, dtype=img.dtype).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=img.dtype).reshape(-1, 1, 1)
    if np.any(std <= 0):
        raise ConfigError(f"channel std must be positive, got {std.ravel().tolist()}")
    return (img - mean) / std


# -- pipelines --------------------------------------------------------------------

def train_transform(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.resize_target is not None:
        img = resize_bilinear(img, cfg.resize_target)
    size = cfg.crop_size or img.shape[1]
    img = reflect_pad(img, cfg.pad_fraction)
    if img.shape[1] != size or img.shape[2] != size:
        img = random_crop(img, size, rng)
    img = random_flip_rotate(img, rng, cfg.rotation_mode, cfg.flip_prob)
    if cfg.jitter_threshold > 0:
        img = color_jitter(img, cfg.jitter_threshold, rng)
    return channel_normalize(img, cfg.channel_mean, cfg.channel_std)


def eval_transform(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    if cfg.resize_target is not None:
        img = resize_bilinear(img, cfg.resize_target)
    if cfg.crop_size is not None and (img.shape[1] > cfg.crop_size or img.shape[2] > cfg.crop_size):
        img = center_crop(img, cfg.crop_size)
    return channel_normalize(img, cfg.channel_mean, cfg.channel_std)


def transform_batch(images_u8: np.ndarray, indices: Sequence[int], cfg: AugmentConfig, *,
                    train: bool, run_seed: int = 0, epoch: int = 0) -> np.ndarray:
    """Float32 batch (B, 3, H, W) for ``indices`` of a uint8 image store."""
    out = []
    for idx in indices:
        img = to_float(images_u8[idx])
        if train:
            img = train_transform(img, cfg, sample_rng(run_seed, epoch, idx))
        else:
            img = eval_transform(img, cfg)
        out.append(np.ascontiguousarray(img, dtype=np.float32))
    return np.stack(out)
