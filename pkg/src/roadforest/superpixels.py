"""SLIC superpixels and per-region pooling of hypercolumn features."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numba
import numpy as np

from .features import FeatureStack
from .raster import ConfidenceMap, Image, LabelMask, write_pnm

__all__ = [
    "SuperpixelMap",
    "SuperpixelFeatureTable",
    "rgb_to_lab",
    "slic",
    "pool_features",
    "assign_region_labels",
    "label_image_from_regions",
    "save_superpixel_map",
]


@dataclass(frozen=True)
class SuperpixelMap:
    labels: np.ndarray  # (H, W) int32, dense ids 0..R-1
    region_count: int
    region_sizes: np.ndarray = field(repr=False)

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> SuperpixelMap:
        labels = np.ascontiguousarray(labels, dtype=np.int32)
        if labels.ndim != 2:
            raise ValueError("labels must be two-dimensional")
        count = int(labels.max()) + 1
        sizes = np.bincount(labels.ravel(), minlength=count).astype(np.int64)
        if labels.min() < 0 or np.any(sizes == 0):
            raise ValueError("labels must form a dense partition 0..R-1")
        return cls(labels, count, sizes)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


@dataclass
class SuperpixelFeatureTable:
    """Pooled descriptors, one row per region.

    Columns are ``[mean_0, std_0, mean_1, std_1, ...]`` so that the two
    statistics of kernel ``k`` sit at ``2k`` and ``2k + 1``.
    """

    descriptors: np.ndarray  # (R, 2K) float32
    labels: np.ndarray | None = None  # (R,) uint8
    scale: int = 0

    @property
    def region_count(self) -> int:
        return self.descriptors.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def num_kernels(self) -> int:
        return self.descriptors.shape[1] // 2


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB uint8 ``(H, W, 3)`` to CIE L*a*b* (D65) float64."""
    c = rgb.astype(np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    m = np.array(
        [
            [0.412453, 0.357580, 0.180423],
            [0.212671, 0.715160, 0.072169],
            [0.019334, 0.119193, 0.950227],
        ]
    )
    xyz = lin @ m.T
    xyz /= np.array([0.950456, 1.0, 1.088754])
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _grid_seeds(h: int, w: int, n: int) -> np.ndarray:
    ny = min(h, max(1, int(round(math.sqrt(n * h / w)))))
    nx = min(w, max(1, int(round(n / ny))))
    ys = ((np.arange(ny) + 0.5) * h / ny).astype(np.int64)
    xs = ((np.arange(nx) + 0.5) * w / nx).astype(np.int64)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


@numba.njit(cache=True)
def _perturb_seeds(lab, seeds):
    h, w, _ = lab.shape
    grad = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            xm, xp = max(x - 1, 0), min(x + 1, w - 1)
            ym, yp = max(y - 1, 0), min(y + 1, h - 1)
            g = 0.0
            for c in range(3):
                dx = lab[y, xp, c] - lab[y, xm, c]
                dy = lab[yp, x, c] - lab[ym, x, c]
                g += dx * dx + dy * dy
            grad[y, x] = g
    out = seeds.copy()
    for k in range(seeds.shape[0]):
        cy, cx = seeds[k, 0], seeds[k, 1]
        best = grad[cy, cx]
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                y, x = cy + dy, cx + dx
                if 0 <= y < h and 0 <= x < w and grad[y, x] < best:
                    best = grad[y, x]
                    out[k, 0], out[k, 1] = y, x
    return out


@numba.njit(cache=True)
def _slic_iterate(lab, seeds, step, compactness, max_iters):
    h, w, _ = lab.shape
    n = seeds.shape[0]
    centers = np.empty((n, 5))
    for k in range(n):
        y, x = seeds[k, 0], seeds[k, 1]
        centers[k, 0] = lab[y, x, 0]
        centers[k, 1] = lab[y, x, 1]
        centers[k, 2] = lab[y, x, 2]
        centers[k, 3] = y
        centers[k, 4] = x
    labels = np.full((h, w), -1, dtype=np.int32)
    dist = np.empty((h, w))
    radius = int(math.ceil(step))
    spatial = (compactness / step) ** 2
    acc = np.zeros((n, 6))
    for _ in range(max_iters):
        dist[:, :] = np.inf
        for k in range(n):
            cy = int(math.floor(centers[k, 3] + 0.5))
            cx = int(math.floor(centers[k, 4] + 0.5))
            y0, y1 = max(cy - radius, 0), min(cy + radius + 1, h)
            x0, x1 = max(cx - radius, 0), min(cx + radius + 1, w)
            for y in range(y0, y1):
                for x in range(x0, x1):
                    d0 = lab[y, x, 0] - centers[k, 0]
                    d1 = lab[y, x, 1] - centers[k, 1]
                    d2 = lab[y, x, 2] - centers[k, 2]
                    dy = y - centers[k, 3]
                    dx = x - centers[k, 4]
                    d = d0 * d0 + d1 * d1 + d2 * d2 + spatial * (dy * dy + dx * dx)
                    if d < dist[y, x]:
                        dist[y, x] = d
                        labels[y, x] = k
        acc[:, :] = 0.0
        for y in range(h):
            for x in range(w):
                k = labels[y, x]
                if k >= 0:
                    acc[k, 0] += lab[y, x, 0]
                    acc[k, 1] += lab[y, x, 1]
                    acc[k, 2] += lab[y, x, 2]
                    acc[k, 3] += y
                    acc[k, 4] += x
                    acc[k, 5] += 1.0
        for k in range(n):
            if acc[k, 5] > 0:
                for c in range(5):
                    centers[k, c] = acc[k, c] / acc[k, 5]
    return labels


@numba.njit(cache=True)
def _components(labels):
    """4-connected components of equal labels, numbered in raster order."""
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    stack = np.empty(h * w, dtype=np.int64)
    sizes = np.zeros(h * w, dtype=np.int64)
    comp_label = np.zeros(h * w, dtype=np.int64)
    ncomp = 0
    for sy in range(h):
        for sx in range(w):
            if comp[sy, sx] >= 0:
                continue
            lab = labels[sy, sx]
            comp[sy, sx] = ncomp
            stack[0] = sy * w + sx
            top = 1
            size = 0
            while top > 0:
                top -= 1
                p = stack[top]
                y, x = p // w, p % w
                size += 1
                for d in range(4):
                    ny, nx = y, x
                    if d == 0:
                        ny = y - 1
                    elif d == 1:
                        ny = y + 1
                    elif d == 2:
                        nx = x - 1
                    else:
                        nx = x + 1
                    if 0 <= ny < h and 0 <= nx < w and comp[ny, nx] < 0 and labels[ny, nx] == lab:
                        comp[ny, nx] = ncomp
                        stack[top] = ny * w + nx
                        top += 1
            sizes[ncomp] = size
            comp_label[ncomp] = lab
            ncomp += 1
    return comp, sizes[:ncomp], comp_label[:ncomp]


@numba.njit(cache=True)
def _component_edges(comp):
    h, w = comp.shape
    edges = np.empty((2 * h * w, 2), dtype=np.int64)
    m = 0
    for y in range(h):
        for x in range(w):
            a = comp[y, x]
            if x + 1 < w and comp[y, x + 1] != a:
                edges[m, 0] = a
                edges[m, 1] = comp[y, x + 1]
                m += 1
            if y + 1 < h and comp[y + 1, x] != a:
                edges[m, 0] = a
                edges[m, 1] = comp[y + 1, x]
                m += 1
    return edges[:m]


@numba.njit(cache=True)
def _merge_orphans(sizes, main, starts, neighbours):
    """Attach orphan pieces to surviving regions in rounds.

    Each round, every orphan touching a surviving region joins the largest
    such region (sizes frozen for the round, ties to the lower id). Orphans
    only surrounded by other orphans wait for a later round, so orphans never
    chain into new regions.
    """
    ncomp = sizes.shape[0]
    owner = np.full(ncomp, -1, dtype=np.int64)
    region_size = np.zeros(ncomp, dtype=np.int64)
    pending = 0
    for c in range(ncomp):
        if main[c]:
            owner[c] = c
            region_size[c] = sizes[c]
        else:
            pending += 1
    chosen = np.full(ncomp, -1, dtype=np.int64)
    while pending > 0:
        for c in range(ncomp):
            if owner[c] >= 0:
                continue
            best, best_size = -1, -1
            for e in range(starts[c], starts[c + 1]):
                r = owner[neighbours[e]]
                if r < 0:
                    continue
                if region_size[r] > best_size or (region_size[r] == best_size and r < best):
                    best, best_size = r, region_size[r]
            chosen[c] = best
        progressed = False
        for c in range(ncomp):
            if owner[c] < 0 and chosen[c] >= 0:
                owner[c] = chosen[c]
                region_size[chosen[c]] += sizes[c]
                pending -= 1
                progressed = True
        if not progressed:
            break
    return owner


def _enforce_connectivity(labels: np.ndarray, min_size: int = 1) -> np.ndarray:
    """Make every region a single 4-connected piece.

    The largest piece of each cluster survives if it has at least
    ``min_size`` pixels; all other pieces are orphans and are absorbed by the
    largest adjacent surviving region.
    """
    comp, sizes, comp_label = _components(labels)
    ncomp = sizes.shape[0]
    order = np.lexsort((np.arange(ncomp), -sizes, comp_label))
    is_first = np.ones(ncomp, dtype=bool)
    is_first[1:] = comp_label[order][1:] != comp_label[order][:-1]
    main = np.zeros(ncomp, dtype=bool)
    main[order[is_first]] = True
    main &= (comp_label >= 0) & (sizes >= min_size)
    if not main.any():
        main[np.argmax(sizes)] = True
    if main.all():
        roots = np.arange(ncomp)
    else:
        edges = _component_edges(comp)
        keys = np.unique(np.concatenate([edges[:, 0] * ncomp + edges[:, 1], edges[:, 1] * ncomp + edges[:, 0]]))
        starts = np.searchsorted(keys // ncomp, np.arange(ncomp + 1))
        roots = _merge_orphans(sizes, main, starts, keys % ncomp)
    # dense ids in order of first appearance in raster scan
    pix_roots = roots[comp.ravel()]
    uniq, first = np.unique(pix_roots, return_index=True)
    remap = np.empty(ncomp, dtype=np.int32)
    remap[uniq[np.argsort(first)]] = np.arange(len(uniq), dtype=np.int32)
    return remap[pix_roots].reshape(labels.shape)


def slic(
    image: Image,
    n_superpixels: int,
    compactness: float = 10.0,
    max_iters: int = 10,
) -> SuperpixelMap:
    """Oversegment ``image`` into roughly ``n_superpixels`` connected regions.

    Clustering runs in joint (L*a*b*, y, x) space with the search for every
    centre limited to a window of +-S pixels, S = sqrt(w*h/n). The procedure
    is fully deterministic.
    """
    h, w = image.height, image.width
    if not 1 <= n_superpixels <= h * w:
        raise ValueError(f"n_superpixels must be in [1, {h * w}], got {n_superpixels}")
    if compactness <= 0:
        raise ValueError("compactness must be positive")
    lab = np.ascontiguousarray(rgb_to_lab(image.as_rgb().data))
    step = math.sqrt(h * w / n_superpixels)
    seeds = _perturb_seeds(lab, _grid_seeds(h, w, n_superpixels))
    labels = _slic_iterate(lab, seeds, step, float(compactness), int(max_iters))
    return SuperpixelMap.from_labels(_enforce_connectivity(labels))


def pool_features(stack: FeatureStack, spmap: SuperpixelMap) -> SuperpixelFeatureTable:
    """Per-region mean and population standard deviation of every channel."""
    if (stack.height, stack.width) != (spmap.height, spmap.width):
        raise ValueError("dimension mismatch between feature stack and superpixel map")
    idx = spmap.labels.ravel()
    r = spmap.region_count
    counts = spmap.region_sizes.astype(np.float64)
    out = np.empty((r, 2 * stack.channels), dtype=np.float32)
    for k in range(stack.channels):
        v = stack.data[k].ravel().astype(np.float64)
        mean = np.bincount(idx, weights=v, minlength=r) / counts
        dev = v - mean[idx]
        var = np.bincount(idx, weights=dev * dev, minlength=r) / counts
        out[:, 2 * k] = mean
        out[:, 2 * k + 1] = np.sqrt(var)
    return SuperpixelFeatureTable(out)


def assign_region_labels(spmap: SuperpixelMap, gt: LabelMask) -> np.ndarray:
    """Majority ground-truth label per region; an exact tie counts as non-road."""
    if (gt.height, gt.width) != (spmap.height, spmap.width):
        raise ValueError("dimension mismatch between superpixel map and mask")
    road = np.bincount(spmap.labels.ravel(), weights=gt.data.ravel(), minlength=spmap.region_count)
    return (2 * road > spmap.region_sizes).astype(np.uint8)


def label_image_from_regions(spmap: SuperpixelMap, region_values) -> ConfidenceMap:
    values = np.asarray(region_values, dtype=np.float32).reshape(-1)
    if values.shape[0] != spmap.region_count:
        raise ValueError(
            f"expected {spmap.region_count} region values, got {values.shape[0]}"
        )
    return ConfidenceMap(values[spmap.labels])


def save_superpixel_map(spmap: SuperpixelMap, path: str | os.PathLike) -> None:
    """Debug dump: P5 of ``label mod 256`` plus a ``region_count=R`` sidecar."""
    write_pnm(path, (spmap.labels % 256).astype(np.uint8))
    with open(os.fspath(path) + ".txt", "w") as fh:
        fh.write(f"region_count={spmap.region_count}\n")
