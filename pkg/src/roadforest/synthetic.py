"""Procedural road scenes and a small Gabor filter bank for demos and tests.

Road pixels carry a smooth, low-frequency texture; everything else is
high-frequency noise. Both share the mean colour and draw their contrast
from the same range, so the classes differ in spatial frequency only.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .features import KernelBank, save_kernel_bank
from .raster import Image, LabelMask, save_image, save_mask

__all__ = ["gabor_bank", "random_bank", "road_scene", "write_dataset"]


def gabor_bank(size: int = 7, orientations: int = 4, wavelengths=(3.0, 6.0), sigma: float = 2.0) -> KernelBank:
    """Zero-mean even Gabor kernels, identical across the RGB inputs."""
    r = (size - 1) / 2.0
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    kernels = []
    for lam in wavelengths:
        for i in range(orientations):
            theta = np.pi * i / orientations
            u = xx * np.cos(theta) + yy * np.sin(theta)
            g = np.exp(-(xx**2 + yy**2) / (2 * sigma**2)) * np.cos(2 * np.pi * u / lam)
            g -= g.mean()
            g /= np.abs(g).sum()
            kernels.append(np.repeat(g[None] / 3.0, 3, axis=0))
    weights = np.stack(kernels).astype(np.float32)
    return KernelBank(weights, np.zeros(len(kernels), np.float32), stride=1, apply_relu=True)


def random_bank(
    num_kernels: int = 64, size: int = 11, stride: int = 4, seed: int = 0
) -> KernelBank:
    """Seeded zero-mean random RGB filters, shaped like a first conv layer."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(num_kernels, 3, size, size))
    w -= w.mean(axis=(1, 2, 3), keepdims=True)
    w /= np.abs(w).sum(axis=(1, 2, 3), keepdims=True)
    biases = rng.normal(scale=0.01, size=num_kernels)
    return KernelBank(w.astype(np.float32), biases.astype(np.float32), stride=stride, apply_relu=True)


def _unit_texture(rng: np.random.Generator, height: int, width: int, sigma: float) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to unit standard deviation."""
    t = gaussian_filter(rng.normal(size=(height, width)), sigma=sigma)
    return t / (t.std() + 1e-12)


def road_scene(rng: np.random.Generator, width: int = 128, height: int = 128) -> tuple[Image, LabelMask]:
    """One scene: a road trapezoid rising from the bottom edge toward a horizon."""
    horizon = rng.uniform(0.38, 0.5) * height
    vanish_x = (0.5 + rng.uniform(-0.08, 0.08)) * width
    half_bottom = rng.uniform(0.3, 0.42) * width
    bottom_x = (0.5 + rng.uniform(-0.06, 0.06)) * width
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    t = np.clip((yy - horizon) / (height - 1 - horizon), 0.0, 1.0)
    centre = vanish_x + t * (bottom_x - vanish_x)
    half = 0.03 * width + t * half_bottom
    road = (yy >= horizon) & (np.abs(xx - centre) <= half)

    base = rng.uniform(95, 135)
    tint = rng.uniform(-12, 12, size=3)
    smooth = _unit_texture(rng, height, width, sigma=1.2) * rng.uniform(15, 45)
    rough = _unit_texture(rng, height, width, sigma=0.5) * rng.uniform(15, 45)
    texture = np.where(road, smooth, rough)
    rgb = base + tint[None, None, :] + texture[:, :, None]
    rgb += rng.normal(size=(height, width, 3)) * 2.0
    image = Image(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))
    return image, LabelMask(road.astype(np.uint8))


def write_dataset(
    root: str | os.PathLike,
    n_train: int = 20,
    n_test: int = 20,
    seed: int = 0,
    width: int = 128,
    height: int = 128,
    bank_path: str | os.PathLike | None = None,
) -> Path:
    """Write a procedural dataset in the standard layout (and optionally the bank)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    stems = {"train": [], "test": []}
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        stem = f"{split}_{i:04d}"
        image, mask = road_scene(rng, width, height)
        save_image(image, root / "images" / f"{stem}.ppm")
        save_mask(mask, root / "masks" / f"{stem}.pgm")
        stems[split].append(stem)
    for split, names in stems.items():
        (root / f"{split}.txt").write_text("".join(f"{s}\n" for s in names))
    if bank_path is not None:
        save_kernel_bank(gabor_bank(), bank_path)
    return root
