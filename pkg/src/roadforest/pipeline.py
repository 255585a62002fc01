"""End-to-end training and prediction across superpixel scales."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureStack, KernelBank, extract_hypercolumns, import_feature_stack, upsample_bilinear
from .forest import ForestConfig, ForestModel, train_forest
from .raster import ConfidenceMap, Image, LabelMask, load_image, load_mask
from .superpixels import (
    assign_region_labels,
    label_image_from_regions,
    pool_features,
    slic,
)

__all__ = [
    "DEFAULT_SCALES",
    "PRIOR_FLOOR",
    "PRIOR_SIZE",
    "validate_scales",
    "PriorMask",
    "DatasetIndex",
    "PipelineModel",
    "learn_prior",
    "resize_prior",
    "image_tables",
    "build_training_tables",
    "train_pipeline",
    "predict_image",
    "pool_scales",
]

log = logging.getLogger(__name__)

DEFAULT_SCALES = (400, 800, 1200)
PRIOR_FLOOR = 0.05
PRIOR_SIZE = (512, 256)  # width, height
IMAGE_SUFFIXES = (".ppm", ".pgm")


def validate_scales(scales=DEFAULT_SCALES) -> tuple[int, ...]:
    """Validate superpixel counts: non-empty, strictly increasing, positive."""
    out = tuple(int(s) for s in scales)
    if not out or out[0] < 1 or any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError(f"scales must be non-empty, positive and strictly increasing: {scales}")
    return out


@dataclass(frozen=True)
class PriorMask:
    data: np.ndarray  # (H, W) float32 in [PRIOR_FLOOR, 1]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def _resize_plane(plane: np.ndarray, width: int, height: int) -> np.ndarray:
    return upsample_bilinear(FeatureStack(plane[None].astype(np.float32)), width, height).data[0]


def learn_prior(masks: list[LabelMask], target_w: int = PRIOR_SIZE[0], target_h: int = PRIOR_SIZE[1]) -> PriorMask:
    """Per-pixel road frequency over the training masks, floored at 0.05."""
    if not masks:
        raise ValueError("learn_prior needs at least one mask")
    acc = np.zeros((target_h, target_w))
    for m in masks:
        acc += _resize_plane(m.data, target_w, target_h)
    freq = acc / len(masks)
    return PriorMask(np.clip(freq, PRIOR_FLOOR, 1.0).astype(np.float32))


def resize_prior(prior: PriorMask, width: int, height: int) -> np.ndarray:
    return np.clip(_resize_plane(prior.data, width, height), PRIOR_FLOOR, 1.0)


@dataclass
class DatasetIndex:
    """Image/mask pairs of one split, following the on-disk layout::

        root/images/<stem>.ppm|pgm
        root/masks/<stem>.pgm
        root/train.txt, root/test.txt   (one stem per line)
        root/features/<stem>.fstk       (optional precomputed feature stacks)
    """

    pairs: list[tuple[Path, Path | None]]
    split: str = "train"
    features: dict[str, Path] = field(default_factory=dict)

    @classmethod
    def from_root(cls, root: str | os.PathLike, split: str = "train", require_masks: bool = True) -> DatasetIndex:
        root = Path(root)
        listing = root / f"{split}.txt"
        if not listing.is_file():
            raise FileNotFoundError(f"missing split file {listing}")
        stems = [ln.strip() for ln in listing.read_text().splitlines() if ln.strip()]
        pairs, features = [], {}
        for stem in stems:
            image = next((root / "images" / f"{stem}{s}" for s in IMAGE_SUFFIXES if (root / "images" / f"{stem}{s}").is_file()), None)
            if image is None:
                raise FileNotFoundError(f"no image for stem {stem!r} under {root / 'images'}")
            mask = next((root / "masks" / f"{stem}{s}" for s in (".pgm", ".ppm") if (root / "masks" / f"{stem}{s}").is_file()), None)
            if mask is None and require_masks:
                raise FileNotFoundError(f"no mask for stem {stem!r} under {root / 'masks'}")
            fstk = root / "features" / f"{stem}.fstk"
            if fstk.is_file():
                features[stem] = fstk
            pairs.append((image, mask))
        return cls(pairs, split, features)

    def stems(self) -> list[str]:
        return [p[0].stem for p in self.pairs]


@dataclass
class PipelineModel:
    models: list[ForestModel]
    scales: tuple[int, ...]
    prior: PriorMask | None


def _features_for(image: Image, bank: KernelBank, feature_path: Path | None) -> FeatureStack:
    if feature_path is None:
        return extract_hypercolumns(image, bank)
    stack = import_feature_stack(feature_path)
    if (stack.height, stack.width) != (image.height, image.width):
        raise ValueError(
            f"feature stack {feature_path} is {stack.width}x{stack.height}, image is {image.width}x{image.height}"
        )
    return stack


def image_tables(
    image: Image,
    bank: KernelBank,
    scales,
    mask: LabelMask | None = None,
    stack: FeatureStack | None = None,
) -> list[tuple]:
    """Superpixel map and pooled table for every scale of one image."""
    if stack is None:
        stack = extract_hypercolumns(image, bank)
    out = []
    for n in scales:
        spmap = slic(image, min(n, image.width * image.height))
        table = pool_features(stack, spmap)
        table.scale = n
        if mask is not None:
            table.labels = assign_region_labels(spmap, mask)
        out.append((spmap, table))
    return out


def _map_ordered(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def build_training_tables(index: DatasetIndex, bank: KernelBank, scales, threads: int = 1):
    """Per-scale lists of labelled tables, plus the loaded masks."""

    def work(pair):
        image_path, mask_path = pair
        image = load_image(image_path)
        mask = load_mask(mask_path)
        if (mask.height, mask.width) != (image.height, image.width):
            raise ValueError(f"image {image_path} and mask {mask_path} differ in size")
        stack = _features_for(image, bank, index.features.get(image_path.stem))
        return mask, [t for _, t in image_tables(image, bank, scales, mask, stack)]

    results = _map_ordered(work, index.pairs, threads)
    masks = [m for m, _ in results]
    per_scale = [[tables[s] for _, tables in results] for s in range(len(scales))]
    return per_scale, masks


def train_pipeline(
    index: DatasetIndex,
    bank: KernelBank,
    scales=DEFAULT_SCALES,
    fconfig: ForestConfig = ForestConfig(),
    threads: int | None = None,
    use_prior: bool = True,
) -> PipelineModel:
    """One forest per scale plus the location prior."""
    scales = validate_scales(scales)
    if not index.pairs:
        raise ValueError("no training pairs")
    threads = max(1, threads or os.cpu_count() or 1)
    per_scale, masks = build_training_tables(index, bank, scales, threads)
    models = []
    for n, tables in zip(scales, per_scale):
        log.info("training forest for scale %d on %d regions", n, sum(t.region_count for t in tables))
        models.append(train_forest(tables, fconfig, threads))
    prior = learn_prior(masks) if use_prior else None
    return PipelineModel(models, scales, prior)


def pool_scales(maps: list[ConfidenceMap]) -> np.ndarray:
    """Per-pixel arithmetic mean, summed in scale order in float64."""
    acc = maps[0].data.astype(np.float64)
    for m in maps[1:]:
        acc = acc + m.data.astype(np.float64)
    return acc / len(maps)


def predict_image(
    image: Image,
    bank: KernelBank,
    models: list[ForestModel],
    scales,
    prior: PriorMask | None = None,
    stack: FeatureStack | None = None,
    return_scales: bool = False,
):
    """Pooled, prior-weighted road confidence for one image.

    With ``return_scales`` the per-scale maps are returned as well.
    """
    scales = validate_scales(scales)
    if len(models) != len(scales):
        raise ValueError(f"{len(models)} models for {len(scales)} scales")
    if stack is None:
        stack = extract_hypercolumns(image, bank)
    for m in models:
        if m.num_kernels != stack.channels:
            raise ValueError(f"model expects {m.num_kernels} channels, features have {stack.channels}")
    scale_maps = []
    for model, (spmap, table) in zip(models, image_tables(image, bank, scales, stack=stack)):
        scale_maps.append(label_image_from_regions(spmap, model.predict_batch(table.descriptors)))
    pooled = pool_scales(scale_maps)
    if prior is not None:
        pooled = pooled * resize_prior(prior, image.width, image.height)
    final = ConfidenceMap(np.clip(pooled, 0.0, 1.0).astype(np.float32))
    if return_scales:
        return final, scale_maps
    return final
