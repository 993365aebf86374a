"""Intensity-only augmentations for unlabeled batches.

Every transform maps a ``(B, 1, H, W)`` tensor in [0, 1] to a tensor of the same
shape and leaves pixel geometry untouched, so pseudo labels stay aligned.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy import ndimage

from .config import AugmentationSpec


def _clamp(x: torch.Tensor) -> torch.Tensor:
    return x.clamp(0.0, 1.0)


def _from_numpy(arr: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).to(like.dtype)


def coarse_dropout(x: torch.Tensor, rate: float, cell: int, rng: np.random.Generator) -> torch.Tensor:
    """Zero whole ``cell x cell`` patches, each independently with probability ``rate``."""
    b, c, h, w = x.shape
    gh, gw = -(-h // cell), -(-w // cell)
    keep = rng.random((b, 1, gh, gw)) >= rate
    keep = keep.repeat(cell, axis=2).repeat(cell, axis=3)[:, :, :h, :w]
    return x * _from_numpy(keep.astype(np.float64), x)


def gaussian_noise(x: torch.Tensor, std: float, rng: np.random.Generator) -> torch.Tensor:
    if std == 0:
        return x.clone()
    return _clamp(x + _from_numpy(rng.normal(0.0, std, size=x.shape), x))


def weak_augment(x: torch.Tensor, spec: AugmentationSpec, rng: np.random.Generator,
                 k: int = 2) -> list[torch.Tensor]:
    """``k`` weakly perturbed views; even views use coarse dropout, odd views noise."""
    views = []
    lo, hi = spec.dropout_range
    for i in range(k):
        if i % 2 == 0:
            rate = lo if lo == hi else float(rng.uniform(lo, hi))
            views.append(coarse_dropout(x, rate, spec.dropout_cell, rng))
        else:
            views.append(gaussian_noise(x, spec.noise_std, rng))
    return views


def _per_image(x: torch.Tensor, fn) -> torch.Tensor:
    arr = x.detach().cpu().numpy().astype(np.float64)
    out = np.stack([np.stack([fn(ch) for ch in img]) for img in arr])
    return _clamp(_from_numpy(out, x))


def gaussian_blur(x, sigma: float):
    return _per_image(x, lambda im: ndimage.gaussian_filter(im, sigma, mode="reflect"))


def unsharp(x, amount: float, sigma: float = 1.0):
    return _per_image(x, lambda im: im + amount * (im - ndimage.gaussian_filter(im, sigma, mode="reflect")))


def gamma(x, g: float):
    return _clamp(x.clamp_min(0.0) ** g)


def brightness(x, delta: float):
    return _clamp(x + delta)


def contrast(x, factor: float):
    mean = x.mean(dim=(-2, -1), keepdim=True)
    return _clamp((x - mean) * factor + mean)


def heavy_noise(x, std: float, rng: np.random.Generator):
    return gaussian_noise(x, std, rng)


def salt_pepper(x, amount: float, rng: np.random.Generator):
    u = rng.random(x.shape)
    out = x.detach().clone()
    out[_from_numpy(u < amount / 2, x).bool()] = 0.0
    out[_from_numpy(u > 1 - amount / 2, x).bool()] = 1.0
    return out


def equalize(x, bins: int = 256):
    def eq(im):
        q = np.clip((im * (bins - 1)).round().astype(np.int64), 0, bins - 1)
        hist = np.bincount(q.ravel(), minlength=bins)
        cdf = hist.cumsum()
        lo = cdf[hist.nonzero()[0][0]]
        if cdf[-1] == lo:
            return im
        lut = (cdf - lo) / (cdf[-1] - lo)
        return lut[q]
    return _per_image(x, eq)


STRONG_NAMES = (
    "gaussian_blur", "sharpen", "gamma", "brightness",
    "contrast", "heavy_noise", "salt_pepper", "equalize",
)


def apply_strong(x: torch.Tensor, transform_id: int, spec: AugmentationSpec,
                 rng: np.random.Generator) -> torch.Tensor:
    """Apply strong transform ``transform_id`` with parameters drawn from ``rng``."""
    if transform_id == 0:
        return gaussian_blur(x, rng.uniform(0.5, 1.5))
    if transform_id == 1:
        return unsharp(x, rng.uniform(0.5, 1.5))
    if transform_id == 2:
        return gamma(x, float(np.exp(rng.uniform(np.log(0.5), np.log(2.0)))))
    if transform_id == 3:
        return brightness(x, rng.uniform(-0.2, 0.2))
    if transform_id == 4:
        return contrast(x, rng.uniform(0.5, 1.5))
    if transform_id == 5:
        return heavy_noise(x, spec.strong_noise_std, rng)
    if transform_id == 6:
        return salt_pepper(x, spec.salt_pepper, rng)
    if transform_id == 7:
        return equalize(x)
    raise ValueError(f"unknown strong transform id {transform_id}")


def strong_augment(x: torch.Tensor, spec: AugmentationSpec,
                   rng: np.random.Generator) -> tuple[torch.Tensor, int]:
    """Pick one of the eight strong transforms uniformly and apply it to the batch."""
    transform_id = int(rng.integers(len(STRONG_NAMES)))
    return apply_strong(x, transform_id, spec, rng), transform_id
