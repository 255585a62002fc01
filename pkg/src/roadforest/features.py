"""Dense hypercolumn features from a single convolutional filter bank.

The bank holds the weights of one convolution layer (typically ``conv1`` of a
pretrained network, exported to a KBNK file). Images are scaled to [0, 1],
optionally mean-shifted, cross-correlated with zero "same" padding, rectified
and resized back to the input resolution.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .raster import Image

__all__ = [
    "FormatError",
    "KernelBank",
    "FeatureStack",
    "load_kernel_bank",
    "save_kernel_bank",
    "convolve",
    "upsample_bilinear",
    "extract_hypercolumns",
    "import_feature_stack",
    "export_feature_stack",
]

KBNK_MAGIC = b"KBNK"
FSTK_MAGIC = b"FSTK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised when a KBNK/FSTK file is malformed."""


@dataclass(frozen=True)
class KernelBank:
    weights: np.ndarray  # (K, C, kh, kw) float32
    biases: np.ndarray  # (K,) float32
    stride: int = 1
    apply_relu: bool = True
    channel_means: np.ndarray | None = None  # (3,) float32, subtracted after /255

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        b = np.ascontiguousarray(self.biases, dtype=np.float32).reshape(-1)
        if w.ndim != 4 or min(w.shape) < 1:
            raise ValueError(f"weights must be K x C x kh x kw, got {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise ValueError("one bias per kernel required")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        if self.channel_means is not None:
            m = np.ascontiguousarray(self.channel_means, dtype=np.float32).reshape(-1)
            if m.shape[0] != 3:
                raise ValueError("channel means must be a triple")
            object.__setattr__(self, "channel_means", m)

    @property
    def num_kernels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]


@dataclass(frozen=True)
class FeatureStack:
    """Channel-major float32 feature planes, shape ``(K, height, width)``."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"feature stack must be K x H x W, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated payload while reading {what}")
    return buf


def load_kernel_bank(path: str | os.PathLike) -> KernelBank:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != KBNK_MAGIC:
            raise FormatError("bad magic")
        version, k, c, kh, kw, stride = struct.unpack("<6I", _read_exact(fh, 24, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported KBNK version {version}")
        if k == 0:
            raise FormatError("zero kernels")
        if min(c, kh, kw, stride) == 0:
            raise FormatError("zero-sized kernel dimension")
        relu, has_mean = struct.unpack("<BB", _read_exact(fh, 2, "flags"))
        means = None
        if has_mean:
            means = np.frombuffer(_read_exact(fh, 12, "channel means"), dtype="<f4")
        n = k * c * kh * kw
        weights = np.frombuffer(_read_exact(fh, 4 * n, "weights"), dtype="<f4")
        biases = np.frombuffer(_read_exact(fh, 4 * k, "biases"), dtype="<f4")
        if fh.read(1):
            raise FormatError("trailing bytes after biases")
    return KernelBank(
        weights.reshape(k, c, kh, kw).astype(np.float32),
        biases.astype(np.float32),
        stride=int(stride),
        apply_relu=bool(relu),
        channel_means=None if means is None else means.astype(np.float32),
    )


def save_kernel_bank(bank: KernelBank, path: str | os.PathLike) -> None:
    k, c, kh, kw = bank.weights.shape
    has_mean = bank.channel_means is not None
    with open(path, "wb") as fh:
        fh.write(KBNK_MAGIC)
        fh.write(struct.pack("<6I", FORMAT_VERSION, k, c, kh, kw, bank.stride))
        fh.write(struct.pack("<BB", int(bank.apply_relu), int(has_mean)))
        if has_mean:
            fh.write(bank.channel_means.astype("<f4").tobytes())
        fh.write(bank.weights.astype("<f4").tobytes())
        fh.write(bank.biases.astype("<f4").tobytes())


def _normalize(image: Image, bank: KernelBank) -> np.ndarray:
    """Return the image as a ``(C, H, W)`` float64 array ready for filtering."""
    x = image.data.astype(np.float64) / 255.0
    if bank.in_channels != image.channels:
        if bank.in_channels == 3 and image.channels == 1:
            x = np.repeat(x, 3, axis=2)
        elif bank.in_channels == 1 and image.channels == 3:
            x = x.mean(axis=2, keepdims=True)
        else:
            raise ValueError(
                f"channel mismatch: bank expects {bank.in_channels}, image has {image.channels}"
            )
    if bank.channel_means is not None:
        x = x - bank.channel_means.astype(np.float64)[: x.shape[2]]
    return np.transpose(x, (2, 0, 1))


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2


def convolve(image: Image, bank: KernelBank) -> FeatureStack:
    """Cross-correlate ``image`` with every kernel in ``bank``.

    Zero "same" padding with stride; the output has ``ceil(size / stride)``
    rows and columns. Biases are added per kernel and negatives clamped when
    the bank requests rectification.
    """
    x = _normalize(image, bank)
    c, h, w = x.shape
    kh, kw, s = bank.kernel_h, bank.kernel_w, bank.stride
    out_h, pad_top = _same_padding(h, kh, s)
    out_w, pad_left = _same_padding(w, kw, s)
    rows = max((out_h - 1) * s + kh, pad_top + h)
    cols = max((out_w - 1) * s + kw, pad_left + w)
    padded = np.zeros((c, rows, cols))
    padded[:, pad_top : pad_top + h, pad_left : pad_left + w] = x
    weights = bank.weights.astype(np.float64)
    acc = np.zeros((bank.num_kernels, out_h, out_w))
    # accumulate shifted views in a fixed order; no BLAS, so results are reproducible
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = padded[ci, i : i + (out_h - 1) * s + 1 : s, j : j + (out_w - 1) * s + 1 : s]
                acc += weights[:, ci, i, j][:, None, None] * patch[None, :, :]
    acc += bank.biases.astype(np.float64)[:, None, None]
    if bank.apply_relu:
        np.maximum(acc, 0.0, out=acc)
    return FeatureStack(acc.astype(np.float32))


def _bilinear_axis(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, clamped at the borders
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def upsample_bilinear(stack: FeatureStack, target_w: int, target_h: int) -> FeatureStack:
    """Resize each channel independently to ``(target_h, target_w)``."""
    if target_w < 1 or target_h < 1:
        raise ValueError("target dimensions must be >= 1")
    data = stack.data
    if data.shape[1:] == (target_h, target_w):
        return FeatureStack(data.copy())
    y0, y1, fy = _bilinear_axis(data.shape[1], target_h)
    x0, x1, fx = _bilinear_axis(data.shape[2], target_w)
    d = data.astype(np.float64)
    rows = d[:, y0, :] * (1.0 - fy)[None, :, None] + d[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1.0 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]
    return FeatureStack(out.astype(np.float32))


def extract_hypercolumns(image: Image, bank: KernelBank) -> FeatureStack:
    stack = convolve(image, bank)
    return upsample_bilinear(stack, image.width, image.height)


def export_feature_stack(stack: FeatureStack, path: str | os.PathLike) -> None:
    k, h, w = stack.data.shape
    with open(path, "wb") as fh:
        fh.write(FSTK_MAGIC)
        fh.write(struct.pack("<4I", FORMAT_VERSION, k, w, h))
        fh.write(stack.data.astype("<f4").tobytes())


def import_feature_stack(path: str | os.PathLike) -> FeatureStack:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != FSTK_MAGIC:
            raise FormatError("bad magic")
        version, k, w, h = struct.unpack("<4I", _read_exact(fh, 16, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported FSTK version {version}")
        if min(k, w, h) == 0:
            raise FormatError("empty feature stack")
        payload = _read_exact(fh, 4 * k * w * h, "feature planes")
    return FeatureStack(np.frombuffer(payload, dtype="<f4").reshape(k, h, w).astype(np.float32))
