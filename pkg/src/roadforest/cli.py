"""Command-line front end: train, predict, evaluate, inspect (and synth)."""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .config import KEYS, ConfigError, RunConfig, load_config
from .features import FeatureStack, export_feature_stack, import_feature_stack, load_kernel_bank
from .forest import ModelFormatError, estimate_memory, load_model, save_model, serialize_model
from .metrics import evaluate
from .pipeline import DatasetIndex, PriorMask, predict_image, train_pipeline
from .raster import PNMError, load_confidence, load_image, load_mask, overlay, save_confidence, save_image

log = logging.getLogger("roadforest")

MANIFEST = "manifest.cfg"
BANK_FILE = "bank.kbnk"
PRIOR_FILE = "prior.fstk"
IMAGE_SUFFIXES = (".ppm", ".pgm")


class UserError(Exception):
    """Bad input or data; reported with exit code 1."""


def model_file(scale: int) -> str:
    return f"forest_s{scale}.rfle"


# -- train ------------------------------------------------------------------


def _parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise UserError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = _parse_overrides(args.overrides)
    for key in KEYS:
        flag = getattr(args, f"opt_{key}", None)
        if flag is not None:
            overrides[key] = flag
    cfg = cfg.with_overrides(overrides)
    if not cfg.kernel_bank or not Path(cfg.kernel_bank).is_file():
        raise UserError(f"kernel_bank: file not found: {cfg.kernel_bank!r}")
    if not cfg.dataset_root or not Path(cfg.dataset_root).is_dir():
        raise UserError(f"dataset_root: directory not found: {cfg.dataset_root!r}")
    bank = load_kernel_bank(cfg.kernel_bank)
    index = DatasetIndex.from_root(cfg.dataset_root, "train")
    if not index.pairs:
        raise UserError("train split is empty")
    model = train_pipeline(
        index, bank, cfg.scales, cfg.forest_config(), threads=cfg.worker_threads(), use_prior=cfg.prior
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for scale, forest in zip(model.scales, model.models):
        save_model(forest, out / model_file(scale))
    if model.prior is not None:
        export_feature_stack(FeatureStack(model.prior.data[None]), out / PRIOR_FILE)
    shutil.copyfile(cfg.kernel_bank, out / BANK_FILE)
    (out / MANIFEST).write_text(cfg.to_text())
    print(f"wrote {len(model.models)} model(s) to {out}")
    return 0


# -- predict ----------------------------------------------------------------


def load_bundle(model_dir: Path):
    manifest = model_dir / MANIFEST
    if not manifest.is_file():
        raise UserError(f"missing bundle piece: {manifest}")
    cfg = load_config(manifest)
    needed = [model_dir / BANK_FILE] + [model_dir / model_file(s) for s in cfg.scales]
    if cfg.prior:
        needed.append(model_dir / PRIOR_FILE)
    missing = [str(p) for p in needed if not p.is_file()]
    if missing:
        raise UserError("missing bundle piece(s): " + ", ".join(missing))
    bank = load_kernel_bank(model_dir / BANK_FILE)
    models = [load_model(model_dir / model_file(s)) for s in cfg.scales]
    prior = None
    if cfg.prior:
        stack = import_feature_stack(model_dir / PRIOR_FILE)
        prior = PriorMask(stack.data[0])
    return cfg, bank, models, prior


def _resolve_entry(base: Path, item: str) -> Path:
    p = Path(item) if Path(item).is_absolute() else base / item
    if p.suffix.lower() in IMAGE_SUFFIXES:
        return p
    # bare stem, as in a dataset split list
    for suffix in IMAGE_SUFFIXES:
        q = base / "images" / f"{item}{suffix}"
        if q.is_file():
            return q
    raise UserError(f"--images: cannot resolve list entry {item!r}")


def _image_list(source: str) -> list[Path]:
    p = Path(source)
    if p.is_dir():
        return sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
    if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
        return [p]
    if p.is_file():
        base = p.parent
        items = [ln.strip() for ln in p.read_text().splitlines() if ln.strip()]
        return [_resolve_entry(base, i) for i in items]
    raise UserError(f"--images: no such file or directory: {source}")


def cmd_predict(args) -> int:
    model_dir = Path(args.model_dir)
    cfg, bank, models, prior = load_bundle(model_dir)
    images = _image_list(args.images)
    if not images:
        raise UserError("no images to predict")
    out = Path(args.out) if args.out else model_dir / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    for path in images:
        image = load_image(path)
        final, scale_maps = predict_image(image, bank, models, cfg.scales, prior, return_scales=True)
        stem = path.stem
        save_confidence(final, out / f"{stem}_conf.pgm")
        gt = None
        if args.gt:
            gt_path = _find_mask(Path(args.gt), stem)
            gt = load_mask(gt_path) if gt_path else None
        save_image(overlay(image, final, gt), out / f"{stem}_overlay.ppm")
        if args.debug:
            for scale, m in zip(cfg.scales, scale_maps):
                save_confidence(m, out / f"{stem}_s{scale}.pgm")
        log.info("predicted %s", path)
    print(f"wrote predictions for {len(images)} image(s) to {out}")
    return 0


# -- evaluate ---------------------------------------------------------------


def _find_mask(gt_dir: Path, stem: str) -> Path | None:
    for suffix in (".pgm", ".ppm"):
        p = gt_dir / f"{stem}{suffix}"
        if p.is_file():
            return p
    return None


def _prediction_files(pred_dir: Path) -> dict[str, Path]:
    found = {}
    for p in sorted(pred_dir.glob("*.pgm")):
        if p.stem.endswith("_conf"):
            found[p.stem[: -len("_conf")]] = p
    if not found:
        # plain <stem>.pgm files, skipping per-scale debug dumps
        for p in sorted(pred_dir.glob("*.pgm")):
            found[p.stem] = p
    return found


def cmd_evaluate(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir():
        raise UserError(f"--pred: not a directory: {pred_dir}")
    if not gt_dir.is_dir():
        raise UserError(f"--gt: not a directory: {gt_dir}")
    preds = _prediction_files(pred_dir)
    if not preds:
        raise UserError(f"no predictions found in {pred_dir}")
    missing = [s for s in preds if _find_mask(gt_dir, s) is None]
    if missing:
        raise UserError("no ground truth for stem(s): " + ", ".join(missing))
    maps = [load_confidence(preds[s]) for s in preds]
    gts = [load_mask(_find_mask(gt_dir, s)) for s in preds]
    report = evaluate(maps, gts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv", out / "pr_curve.csv")
    for name, value in report.rows():
        print(f"{name}: {value:.4f}")
    return 0


# -- inspect ----------------------------------------------------------------


def cmd_inspect(args) -> int:
    model_dir = Path(args.model_dir)
    manifest = model_dir / MANIFEST
    if not manifest.is_file():
        raise UserError(f"missing bundle piece: {manifest}")
    cfg = load_config(manifest)
    lines = [f"scales: {','.join(str(s) for s in cfg.scales)}"]
    for scale in cfg.scales:
        path = model_dir / model_file(scale)
        if not path.is_file():
            raise UserError(f"missing bundle piece: {path}")
        model = load_model(path)
        hist: Counter = Counter()
        kernels_per_split = []
        for tree in model.trees:
            hist.update(tree.depths().tolist())
            splits = np.flatnonzero(tree.kind == 0)
            kernels_per_split.extend((tree.kernel_ptr[splits + 1] - tree.kernel_ptr[splits]).tolist())
        size = len(serialize_model(model))
        prefix = f"scale_{scale}"
        lines += [
            f"{prefix}.trees: {len(model.trees)}",
            f"{prefix}.kernels: {model.num_kernels}",
            f"{prefix}.max_depth: {model.config.max_depth}",
            f"{prefix}.node_counts: {','.join(str(t.node_count) for t in model.trees)}",
            f"{prefix}.depth_histogram: {' '.join(f'{d}:{hist[d]}' for d in sorted(hist))}",
            f"{prefix}.mean_kernels_per_node: {np.mean(kernels_per_split) if kernels_per_split else 0.0:.4f}",
            f"{prefix}.serialized_bytes: {size}",
            f"{prefix}.memory_bound_bytes: {estimate_memory(len(model.trees), model.config.max_depth, model.num_kernels, 4)}",
        ]
    print("\n".join(lines))
    return 0


# -- synth ------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synthetic import write_dataset

    root = Path(args.out)
    write_dataset(root, args.train, args.test, args.seed, bank_path=root / "gabor8.kbnk")
    (root / "run.cfg").write_text(
        RunConfig(
            dataset_root=str(root), kernel_bank=str(root / "gabor8.kbnk"), output_dir=str(root / "model")
        ).to_text()
    )
    print(f"wrote synthetic dataset, gabor8.kbnk and run.cfg to {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roadforest", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one forest per superpixel scale")
    p.add_argument("--config", help="key=value config file")
    for key in KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}", metavar="VALUE")
    p.add_argument("overrides", nargs="*", help="key=value overrides")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write confidence maps and overlays")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--images", required=True, help="image file, directory, or list file")
    p.add_argument("--out", help="output directory (default: <model-dir>/predictions)")
    p.add_argument("--gt", help="optional ground-truth directory for overlays")
    p.add_argument("--debug", action="store_true", help="also write per-scale maps")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="pixel metrics against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="summarise a trained model bundle")
    p.add_argument("--model-dir", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write a procedural demo dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UserError, ConfigError, PNMError, ModelFormatError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # invariant violation inside the library
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
