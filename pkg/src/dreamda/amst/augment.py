"""Weak and strong augmentations for NCHW batches in [-1, 1]."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

BACKGROUND = -1.0
STRONG_OPS = ("rotate", "intensity", "noise", "erase")


def _flip_and_shift(img: np.ndarray, rng: np.random.Generator, max_shift: int = 2) -> np.ndarray:
    if rng.random() < 0.5:
        img = img[..., ::-1]
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (max_shift, max_shift), (max_shift, max_shift)),
                    constant_values=BACKGROUND)
    dy, dx = rng.integers(0, 2 * max_shift + 1, size=2)
    return padded[:, dy:dy + h, dx:dx + w]


def _strong_op(img: np.ndarray, op: str, rng: np.random.Generator) -> np.ndarray:
    if op == "rotate":
        angle = rng.uniform(-30.0, 30.0)
        return ndimage.rotate(img, angle, axes=(1, 2), reshape=False, order=1,
                              mode="constant", cval=BACKGROUND)
    if op == "intensity":
        return BACKGROUND + rng.uniform(0.5, 1.5) * (img - BACKGROUND)
    if op == "noise":
        return img + rng.normal(0.0, 0.1, size=img.shape)
    if op == "erase":
        _, h, w = img.shape
        area = rng.uniform(0.05, 0.25) * h * w
        aspect = rng.uniform(0.5, 2.0)
        eh = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
        ew = int(np.clip(round(np.sqrt(area / aspect)), 1, w))
        y0, x0 = rng.integers(0, h - eh + 1), rng.integers(0, w - ew + 1)
        out = img.copy()
        out[:, y0:y0 + eh, x0:x0 + ew] = rng.uniform(-1.0, 1.0)
        return out
    raise ValueError(f"unknown strong op {op!r}")


def weak_aug(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip (p=0.5) and pad-and-crop by up to 2 px, per image."""
    x = np.asarray(x)
    out = np.stack([_flip_and_shift(img, rng) for img in x])
    return out.astype(x.dtype, copy=False)


def strong_aug(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Weak augmentation followed by two distinct randomly chosen strong ops."""
    x = np.asarray(x)
    out = []
    for img in x:
        img = _flip_and_shift(img, rng)
        for k in rng.choice(len(STRONG_OPS), size=2, replace=False):
            img = _strong_op(img, STRONG_OPS[k], rng)
        out.append(np.clip(img, -1.0, 1.0))
    return np.stack(out).astype(x.dtype, copy=False)
