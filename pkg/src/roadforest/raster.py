"""Image, mask and confidence-map containers with binary PNM (P5/P6) I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PNMError",
    "Image",
    "LabelMask",
    "ConfidenceMap",
    "read_pnm",
    "write_pnm",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "save_confidence",
    "load_confidence",
    "quantize",
    "overlay",
]

_WHITESPACE = b" \t\r\n\x0b\x0c"


class PNMError(ValueError):
    """Raised for unreadable or unsupported PNM files."""


@dataclass(frozen=True)
class Image:
    """8-bit image stored as an ``(height, width, channels)`` uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        data = np.ascontiguousarray(data, dtype=np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def as_rgb(self) -> Image:
        if self.channels == 3:
            return self
        return Image(np.repeat(self.data, 3, axis=2))


@dataclass(frozen=True)
class LabelMask:
    """Binary road mask, ``(height, width)`` uint8 with values in {0, 1}."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if data.ndim != 2:
            raise ValueError("mask must be two-dimensional")
        if data.size and data.max() > 1:
            raise ValueError("mask values must be 0 or 1")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ConfidenceMap:
    """Per-pixel road probability, ``(height, width)`` float32 in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError("confidence map must be two-dimensional")
        if not np.all((data >= 0.0) & (data <= 1.0)):
            raise ValueError("confidence values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos]
        if c == 0x23:  # '#' comment runs to end of line
            while pos < n and buf[pos] not in (0x0A, 0x0D):
                pos += 1
        elif c in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in _WHITESPACE and buf[pos] != 0x23:
        pos += 1
    if start == pos:
        raise PNMError("malformed header: unexpected end of header")
    return buf[start:pos], pos


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM/PPM file into an ``(h, w, c)`` uint8 array."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError:
        raise PNMError(f"missing file: {path}") from None
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise PNMError(f"malformed header: {path} is not a binary PGM/PPM file")
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _next_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PNMError(f"malformed header: bad integer {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PNMError("malformed header: non-positive dimensions")
    if maxval != 255:
        raise PNMError(f"unsupported sample depth (maxval {maxval})")
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise PNMError("malformed header: missing separator before raster")
    pos += 1
    size = width * height * channels
    payload = buf[pos : pos + size]
    if len(payload) != size:
        raise PNMError(f"truncated raster: expected {size} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels).copy()


def write_pnm(path: str | os.PathLike, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.uint8)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w, c = data.shape
    magic = {1: b"P5", 3: b"P6"}[c]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(data).tobytes())


def load_image(path: str | os.PathLike) -> Image:
    return Image(read_pnm(path))


def save_image(image: Image, path: str | os.PathLike) -> None:
    write_pnm(path, image.data)


def load_mask(path: str | os.PathLike, road_threshold: int = 128) -> LabelMask:
    """Binarize a P5/P6 ground-truth file.

    For colour files only the red channel is consulted; a pixel is road when
    its sample is at least ``road_threshold``.
    """
    raw = read_pnm(path)
    return LabelMask((raw[:, :, 0] >= road_threshold).astype(np.uint8))


def save_mask(mask: LabelMask, path: str | os.PathLike) -> None:
    write_pnm(path, mask.data * np.uint8(255))


def quantize(values: np.ndarray) -> np.ndarray:
    """Map probabilities to 8-bit levels with round-half-up."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(v * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_confidence(cmap: ConfidenceMap, path: str | os.PathLike) -> None:
    write_pnm(path, quantize(cmap.data))


def load_confidence(path: str | os.PathLike) -> ConfidenceMap:
    raw = read_pnm(path)
    if raw.shape[2] != 1:
        raise PNMError(f"confidence map {path} must be single-channel (P5)")
    return ConfidenceMap(raw[:, :, 0].astype(np.float32) / np.float32(255.0))


def overlay(
    image: Image,
    cmap: ConfidenceMap,
    gt: LabelMask | None = None,
    gt_strength: float = 0.6,
) -> Image:
    """Blend predictions into the blue channel and ground truth into red.

    Where both are present the pixel turns pink. With zero confidence and no
    ground truth the (RGB) input is returned unchanged.
    """
    if (cmap.height, cmap.width) != (image.height, image.width):
        raise ValueError("dimension mismatch between image and confidence map")
    rgb = image.as_rgb().data.astype(np.float64)
    p = cmap.data.astype(np.float64)
    rgb[:, :, 2] += p * (255.0 - rgb[:, :, 2])
    if gt is not None:
        if (gt.height, gt.width) != (image.height, image.width):
            raise ValueError("dimension mismatch between image and ground truth")
        g = gt.data.astype(np.float64) * gt_strength
        rgb[:, :, 0] += g * (255.0 - rgb[:, :, 0])
    return Image(np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8))
