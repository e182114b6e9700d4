"""Offline rotation and the online crop -> erase -> noise -> mixup pipeline.

Online stages draw from per-image generators keyed by
``(seed, epoch, batch, stage, image)``, so results do not depend on the order
images are processed in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_CROP, _ERASE, _NOISE, _MIXUP = 1, 2, 3, 4


@dataclass
class AugmentConfig:
    crop_reduction: int = 10
    erase_extent: int = 20
    noise_sigma: float = 0.01
    mixup_beta_alpha: float = 0.2
    seed: int = 0
    offline_rotation: bool = True  # quadruple the training split by rotation before training

    def __post_init__(self):
        if self.crop_reduction < 0 or self.erase_extent < 0:
            raise ValueError("crop_reduction and erase_extent must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.mixup_beta_alpha <= 0:
            raise ValueError("mixup_beta_alpha must be positive")


@dataclass
class Batch:
    images: np.ndarray  # [N, H, W, 3] float32 in [0, 1]
    labels: np.ndarray  # [N, C] rows on the simplex

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} label rows")

    def __len__(self):
        return len(self.images)


@dataclass
class KeyedRng:
    """Source of independent generators keyed by stage and image index."""

    seed: int
    epoch: int = 0
    batch: int = 0
    draws: int = field(default=0, compare=False)

    def child(self, stage: int, index: int) -> np.random.Generator:
        self.draws += 1
        return np.random.default_rng([self.seed, self.epoch, self.batch, stage, index])


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------- offline

def rot90_cw(image: np.ndarray, k: int = 1) -> np.ndarray:
    return np.rot90(image, k=-k, axes=(0, 1))


def rotate_dataset(images: np.ndarray, labels: np.ndarray | None = None):
    """Originals followed by their 90, 180 and 270 degree clockwise rotations."""
    if images.ndim != 4 or images.shape[1] != images.shape[2]:
        raise ValueError(f"rotation needs square images [N, H, H, C], got {images.shape}")
    out = np.concatenate([np.rot90(images, k=-k, axes=(1, 2)) for k in range(4)], axis=0)
    out = np.ascontiguousarray(out)
    if labels is None:
        return out
    return out, np.concatenate([labels] * 4, axis=0)


# ---------------------------------------------------------------- online

def _resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    factors = (h / img.shape[0], w / img.shape[1], 1)
    return ndimage.zoom(img, factors, order=1, mode="nearest", grid_mode=True)


def random_crop(batch: Batch, cfg: AugmentConfig, rng: KeyedRng) -> Batch:
    k = cfg.crop_reduction
    n, h, w = batch.images.shape[:3]
    if k >= min(h, w):
        raise ValueError(f"crop_reduction {k} must be below image size {h}x{w}")
    if k == 0:
        return batch
    out = np.empty_like(batch.images)
    for i in range(n):
        g = rng.child(_CROP, i)
        top, left = g.integers(0, k + 1, size=2)
        window = batch.images[i, top:top + h - k, left:left + w - k]
        out[i] = _resize_bilinear(window, h, w)
    return Batch(np.clip(out, 0.0, 1.0), batch.labels)


def random_erase(batch: Batch, cfg: AugmentConfig, rng: KeyedRng) -> Batch:
    e = cfg.erase_extent
    n, h, w = batch.images.shape[:3]
    if e > min(h, w):
        raise ValueError(f"erase_extent {e} exceeds image size {h}x{w}")
    if e == 0:
        return batch
    out = batch.images.copy()
    for i in range(n):
        g = rng.child(_ERASE, i)
        top = g.integers(0, h - e + 1)
        left = g.integers(0, w - e + 1)
        out[i, top:top + e, left:left + e, :] = 0.0
    return Batch(out, batch.labels)


def add_gaussian_noise(batch: Batch, cfg: AugmentConfig, rng: KeyedRng) -> Batch:
    if cfg.noise_sigma == 0:
        return batch
    out = np.empty_like(batch.images)
    for i in range(len(batch)):
        noise = rng.child(_NOISE, i).normal(0.0, cfg.noise_sigma, size=batch.images.shape[1:])
        out[i] = batch.images[i] + noise
    return Batch(np.clip(out, 0.0, 1.0), batch.labels)


def mix(batch: Batch, partner: np.ndarray, lam: np.ndarray) -> Batch:
    """Convex combination ``lam * x_i + (1 - lam) * x_partner[i]`` of images and labels."""
    lam = np.asarray(lam, dtype=np.float64)
    li = lam[:, None, None, None]
    x = batch.images.astype(np.float64)
    y = batch.labels.astype(np.float64)
    images = li * x + (1 - li) * x[partner]
    labels = lam[:, None] * y + (1 - lam[:, None]) * y[partner]
    return Batch(images.astype(np.float32), labels.astype(np.float32))


def mixup_batch(batch: Batch, cfg: AugmentConfig, rng: KeyedRng) -> Batch:
    """Originals, then a Uniform(0,1)-mixed copy, then a Beta(a,a)-mixed copy (N -> 3N)."""
    n = len(batch)
    if n < 2:
        raise ValueError(f"mixup needs at least 2 samples, got {n}")
    g_uni = rng.child(_MIXUP, 0)
    g_beta = rng.child(_MIXUP, 1)
    uni = mix(batch, g_uni.permutation(n), g_uni.uniform(0.0, 1.0, size=n))
    a = cfg.mixup_beta_alpha
    beta = mix(batch, g_beta.permutation(n), g_beta.beta(a, a, size=n))
    return Batch(np.concatenate([batch.images, uni.images, beta.images]),
                 np.concatenate([batch.labels, uni.labels, beta.labels]))


class OnlineAugmenter:
    """Applies the online stages to one loader batch; counts generator draws."""

    def __init__(self, cfg: AugmentConfig):
        self.cfg = cfg
        self.draws = 0

    def __call__(self, batch: Batch, epoch: int, batch_index: int) -> Batch:
        rng = KeyedRng(self.cfg.seed, epoch, batch_index)
        batch = random_crop(batch, self.cfg, rng)
        batch = random_erase(batch, self.cfg, rng)
        batch = add_gaussian_noise(batch, self.cfg, rng)
        batch = mixup_batch(batch, self.cfg, rng)
        self.draws += rng.draws
        return batch
