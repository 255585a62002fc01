"""Acceptance suite: one check per numbered criterion, each printing PASS/FAIL.

Run with ``pytest -v tests/test_acceptance.py``; the summary block at the end
of the session lists every criterion with its measured numbers. The module
can also be executed directly with ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import math
import sys
import time
from itertools import product

import numpy as np
import pytest
from scipy.ndimage import label as cc_label

from roadforest.features import FeatureStack, export_feature_stack, import_feature_stack, load_kernel_bank
from roadforest.forest import (
    FeatureSelection,
    ForestConfig,
    estimate_memory,
    evaluate_candidate,
    information_gain,
    serialize_model,
    train_forest,
)
from roadforest.metrics import confusion_sweep, evaluate
from roadforest.pipeline import DEFAULT_SCALES, DatasetIndex, build_training_tables, predict_image, train_pipeline
from roadforest.raster import ConfidenceMap, Image, LabelMask, load_image, load_mask, quantize
from roadforest.superpixels import SuperpixelMap, pool_features, slic
from roadforest.svm import SvmConfig, score_batch, svm_objective, train_svm
from roadforest.synthetic import random_bank, write_dataset

RESULTS: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} ({title}): {detail}"
    RESULTS.append(line)
    print(line, file=sys.__stdout__, flush=True)


# -- shared fixtures --------------------------------------------------------


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    """20 + 20 procedural 128x128 scenes and the 8-kernel Gabor bank on disk."""
    root = tmp_path_factory.mktemp("bench")
    write_dataset(root, n_train=20, n_test=20, seed=0, bank_path=root / "gabor8.kbnk")
    bank = load_kernel_bank(root / "gabor8.kbnk")
    test = DatasetIndex.from_root(root, "test")
    images = [(load_image(i), load_mask(m)) for i, m in test.pairs]
    return root, bank, images


def _run_pipeline(bench, fconfig: ForestConfig, threads: int):
    root, bank, images = bench
    start = time.perf_counter()
    model = train_pipeline(DatasetIndex.from_root(root, "train"), bank, DEFAULT_SCALES, fconfig, threads=threads)
    maps = [predict_image(img, bank, model.models, model.scales, model.prior) for img, _ in images]
    elapsed = time.perf_counter() - start
    return model, maps, evaluate(maps, [g for _, g in images]), elapsed


@pytest.fixture(scope="module")
def expert_run(bench):
    return _run_pipeline(bench, ForestConfig(), threads=1)


@pytest.fixture(scope="module")
def wide_tables(bench):
    """Superpixel tables over 64 random conv-style channels (scale 400)."""
    root, _, _ = bench
    per_scale, _ = build_training_tables(DatasetIndex.from_root(root, "train"), random_bank(64, seed=7), (400,))
    return per_scale[0]


@pytest.fixture(scope="module")
def wide_forest(wide_tables):
    start = time.perf_counter()
    model = train_forest(wide_tables, ForestConfig(num_trees=10, max_depth=10), threads=1)
    return model, time.perf_counter() - start


# -- criteria ---------------------------------------------------------------


def test_criterion_01_memory_model():
    start = time.perf_counter()
    value = estimate_memory(10, 10, 64, 4)
    elapsed = time.perf_counter() - start
    mib = f"{value / 2**20:.3f}"
    ok = value == 5_283_840 and mib == "5.039" and elapsed < 1e-3
    report(1, "memory model", ok, f"{value} bytes = {mib} MiB in {elapsed * 1e6:.1f} us")
    assert ok


def test_criterion_02_size_bound(wide_forest):
    model, elapsed = wide_forest
    size = len(serialize_model(model))
    bound = estimate_memory(10, 10, 64, 4)
    ok = size < bound and elapsed < 300
    report(2, "size bound", ok, f"serialized {size} B < bound {bound} B; trained in {elapsed:.1f} s")
    assert ok


def _direct_entropy(a: int, b: int) -> float:
    n = a + b
    return -sum(c / n * math.log2(c / n) for c in (a, b) if c)


def test_criterion_03_information_gain_oracle():
    worst, checked = 0.0, 0
    for n in range(2, 13):
        for labels in product((0, 1), repeat=n):
            ones = np.cumsum(labels)
            total = int(ones[-1])
            parent = _direct_entropy(n - total, total)
            for cut in range(1, n):
                l1 = int(ones[cut - 1])
                r1 = total - l1
                oracle = (
                    parent
                    - cut / n * _direct_entropy(cut - l1, l1)
                    - (n - cut) / n * _direct_entropy(n - cut - r1, r1)
                )
                got = information_gain([n - total, total], [cut - l1, l1], [n - cut - r1, r1])
                worst = max(worst, abs(got - oracle))
                checked += 1
    ok = worst <= 1e-12
    report(3, "information-gain oracle", ok, f"{checked} splits, max |error| = {worst:.2e}")
    assert ok


def _h(a: float, b: float) -> float:
    n = a + b
    h = 0.0
    for c in (a, b):
        if c > 0:
            h -= c / n * math.log2(c / n)
    return h


def _sweep_oracle(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    distinct = np.unique(scores)
    n, pos = len(labels), float(labels.sum())
    best_tau, best_gain = None, -math.inf
    for tau in 0.5 * (distinct[:-1] + distinct[1:]):
        left = scores <= tau
        nl, l1 = float(left.sum()), float(labels[left].sum())
        gain = _h(n - pos, pos) - nl / n * _h(nl - l1, l1) - (n - nl) / n * _h(n - nl - (pos - l1), pos - l1)
        if gain > best_gain:
            best_tau, best_gain = float(tau), gain
    return best_tau, best_gain


def test_criterion_04_threshold_search_oracle():
    rng = np.random.default_rng(2024)
    mismatches = compared = 0
    for _ in range(200):
        k = int(rng.integers(1, 5))
        X = rng.normal(size=(12, 2 * k)).astype(np.float32)
        y = rng.integers(0, 2, size=12).astype(np.uint8)
        y[:2] = (0, 1)
        sel = FeatureSelection(tuple(rng.choice(k, size=int(rng.integers(1, k + 1)), replace=False)))
        cand = evaluate_candidate(X, y, sel, SvmConfig(seed=int(rng.integers(2**32))))
        scores = score_batch(cand.expert, X[:, sel.columns])
        if np.unique(scores).size < 2:
            continue  # constant scores admit no split
        compared += 1
        tau, gain = _sweep_oracle(scores, y)
        if cand.threshold != tau or cand.gain != gain:
            mismatches += 1
    ok = mismatches == 0 and compared >= 190
    report(4, "threshold-search oracle", ok, f"{compared - mismatches}/{compared} fixtures match exactly")
    assert ok


def _naive_pool(stack: np.ndarray, labels: np.ndarray) -> np.ndarray:
    k, r = stack.shape[0], labels.max() + 1
    out = np.zeros((r, 2 * k))
    for region in range(r):
        for kk in range(k):
            vals = [float(v) for v in stack[kk][labels == region]]
            mean = sum(vals) / len(vals)
            out[region, 2 * kk] = mean
            out[region, 2 * kk + 1] = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
    return out


def test_criterion_05_pooling_oracle():
    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(100):
        h, w, k = (int(v) for v in rng.integers(2, 17, size=3))
        labels = np.unique(rng.integers(0, int(rng.integers(1, 9)), size=(h, w)), return_inverse=True)[1]
        labels = labels.reshape(h, w)
        stack = (rng.normal(size=(k, h, w)) * 5).astype(np.float32)
        table = pool_features(FeatureStack(stack), SuperpixelMap.from_labels(labels))
        worst = max(worst, float(np.abs(table.descriptors - _naive_pool(stack, labels)).max()))
    singles = pool_features(
        FeatureStack(rng.normal(size=(4, 5, 6)).astype(np.float32)),
        SuperpixelMap.from_labels(np.arange(30).reshape(5, 6)),
    )
    zero_std = bool(np.all(singles.descriptors[:, 1::2] == 0.0))
    ok = worst <= 1e-5 and zero_std
    report(5, "pooling oracle", ok, f"max |error| = {worst:.2e} over 100 fixtures; single-pixel std exactly 0: {zero_std}")
    assert ok


def test_criterion_06_slic_properties():
    rng = np.random.default_rng(66)
    failures = []
    counts = []
    for i in range(20):
        h, w = (int(v) for v in rng.integers(32, 129, size=2))
        data = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        if i % 2:  # smooth half of the set with blocky structure
            data = np.repeat(np.repeat(data[::8, ::8], 8, axis=0), 8, axis=1)[:h, :w]
            data = np.ascontiguousarray(data)
            h, w = data.shape[:2]
        image = Image(data)
        n = int(rng.integers(10, 400))
        spmap = slic(image, n)
        dense = np.array_equal(np.unique(spmap.labels), np.arange(spmap.region_count))
        connected = all(cc_label(spmap.labels == r)[1] == 1 for r in range(spmap.region_count))
        stable = np.array_equal(slic(image, n).labels, spmap.labels)
        in_range = 0.5 * n <= spmap.region_count <= 1.5 * n
        counts.append(spmap.region_count / n)
        if not (dense and connected and stable and in_range):
            failures.append((i, dense, connected, stable, spmap.region_count, n))
    halves = np.zeros((64, 64, 3), np.uint8)
    halves[:, 32:] = 255
    spmap = slic(Image(halves), 2)
    colour = (halves[..., 0] > 0).astype(np.int64)
    ones = np.bincount(spmap.labels.ravel(), weights=colour.ravel(), minlength=spmap.region_count)
    majority = (2 * ones > spmap.region_sizes).astype(np.int64)
    violations = float(np.mean(majority[spmap.labels] != colour))
    ok = not failures and violations < 0.02
    report(
        6,
        "SLIC properties",
        ok,
        f"{20 - len(failures)}/20 images pass; count ratio {min(counts):.2f}..{max(counts):.2f}; "
        f"two-half violations {100 * violations:.2f}%",
    )
    assert ok


def _grid_minimum(X, y, C):
    grid = np.linspace(-3, 3, 1201)
    W, B = np.meshgrid(grid, grid, indexing="ij")
    s = np.where(y > 0, 1.0, -1.0)
    m = s * (W[..., None] * X[:, 0] + B[..., None])
    return float((0.5 * W**2 + C * np.maximum(0.0, 1.0 - m).sum(axis=-1)).min())


def _separable_set(rng, n=20, margin=0.1):
    normal = rng.normal(size=2)
    normal /= np.linalg.norm(normal)
    offset = rng.uniform(-0.5, 0.5)
    while True:
        pts = []
        while len(pts) < n:
            p = rng.uniform(-1, 1, size=2)
            if abs(p @ normal + offset) >= margin:
                pts.append(p)
        X = np.array(pts)
        y = (X @ normal + offset > 0).astype(np.int64)
        if 0 < y.sum() < n:
            return X, y


def test_criterion_07_svm_oracle():
    X4 = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y4 = np.array([0, 0, 1, 1])
    e = train_svm(X4, y4, SvmConfig(C=0.5))
    obj = svm_objective(e.weights, e.bias, X4, y4, 0.5)
    ref = _grid_minimum(X4, y4, 0.5)
    grid_ok = obj <= 1.01 * ref
    rng = np.random.default_rng(77)
    perfect = 0
    for _ in range(50):
        X, y = _separable_set(rng)
        e = train_svm(X, y, SvmConfig(C=0.5))
        perfect += int(np.array_equal((score_batch(e, X) > 0).astype(np.int64), y))
    ok = grid_ok and perfect == 50
    report(
        7,
        "SVM oracle",
        ok,
        f"four-point objective {obj:.6f} vs grid {ref:.6f}; zero training error on {perfect}/50 margin-0.1 sets",
    )
    assert ok


def test_criterion_08_metric_oracle():
    rng = np.random.default_rng(88)
    mismatches = 0
    for _ in range(50):
        preds, gts = [], []
        for _ in range(int(rng.integers(1, 4))):
            h, w = (int(v) for v in rng.integers(1, 33, size=2))
            preds.append(ConfidenceMap((rng.integers(0, 256, size=(h, w)) / 255.0).astype(np.float32)))
            gts.append(LabelMask((rng.random((h, w)) < 0.4).astype(np.uint8)))
        swept = np.stack(confusion_sweep(preds, gts), axis=1)
        brute = np.zeros((256, 4), np.int64)
        for i in range(256):
            t = np.float32(i / 255.0)
            for p, g in zip(preds, gts):
                pos, road = p.data >= t, g.data == 1
                brute[i] += [np.sum(pos & road), np.sum(pos & ~road), np.sum(~pos & ~road), np.sum(~pos & road)]
        mismatches += int(not np.array_equal(swept, brute))
    g = LabelMask((rng.random((40, 50)) < 0.3).astype(np.uint8))
    perfect = evaluate([ConfidenceMap(g.data.astype(np.float32))], [g])
    perfect_ok = perfect.max_f == 100.0 and perfect.fpr_at_maxf == 0.0 and perfect.fnr_at_maxf == 0.0
    ok = mismatches == 0 and perfect_ok
    report(
        8,
        "metric oracle",
        ok,
        f"{50 - mismatches}/50 fixtures match brute force; perfect map MaxF={perfect.max_f} "
        f"FPR={perfect.fpr_at_maxf} FNR={perfect.fnr_at_maxf}",
    )
    assert ok


def test_criterion_09_scale_pooling(bench, expert_run, tmp_path):
    _, bank, images = bench
    model = expert_run[0]
    exact = 0
    for idx, (image, _) in enumerate(images[:5]):
        final, maps = predict_image(image, bank, model.models, model.scales, None, return_scales=True)
        dumped = []
        for s, m in zip(model.scales, maps):
            path = tmp_path / f"{idx}_s{s}.fstk"
            export_feature_stack(FeatureStack(m.data[None]), path)
            dumped.append(import_feature_stack(path).data[0].astype(np.float64))
        mean = dumped[0]
        for d in dumped[1:]:
            mean = mean + d
        mean = (mean / len(dumped)).astype(np.float32)
        exact += int(np.array_equal(mean.view(np.uint32), final.data.view(np.uint32)))
    ok = exact == 5
    report(9, "scale pooling", ok, f"{exact}/5 images bit-identical to the mean of dumped per-scale maps")
    assert ok


def test_criterion_10_synthetic_benchmark(bench, expert_run):
    _, maps, expert, elapsed = expert_run
    _, _, stump, stump_elapsed = _run_pipeline(bench, ForestConfig(split_mode="stump"), threads=1)
    ok = expert.accuracy >= 90.0 and expert.max_f >= 90.0 and expert.max_f >= stump.max_f and elapsed <= 600
    report(
        10,
        "synthetic benchmark",
        ok,
        f"accuracy {expert.accuracy:.2f}%, MaxF {expert.max_f:.2f}% (stump MaxF {stump.max_f:.2f}%); "
        f"expert run {elapsed:.0f} s, stump run {stump_elapsed:.0f} s",
    )
    assert ok


def test_criterion_11_prediction_latency(wide_forest, wide_tables):
    model, _ = wide_forest
    rng = np.random.default_rng(11)
    pool = np.concatenate([t.descriptors for t in wide_tables])
    tables = [pool[rng.choice(pool.shape[0], size=n, replace=False)] for n in DEFAULT_SCALES]
    model.predict_batch(tables[0][:2])  # compile outside the timed region
    best = math.inf
    for _ in range(5):
        start = time.perf_counter()
        for t in tables:
            model.predict_batch(t)
        best = min(best, time.perf_counter() - start)
    ok = best < 0.1
    report(11, "prediction latency", ok, f"{sum(DEFAULT_SCALES)} regions x 64 channels in {1e3 * best:.1f} ms")
    assert ok


def test_criterion_12_determinism(bench, expert_run, wide_tables, wide_forest):
    wide_again = train_forest(wide_tables, ForestConfig(num_trees=10, max_depth=10), threads=8)
    wide_same = serialize_model(wide_again) == serialize_model(wide_forest[0])
    model, maps, _, _ = expert_run
    model8, maps8, _, _ = _run_pipeline(bench, ForestConfig(), threads=8)
    models_same = all(serialize_model(a) == serialize_model(b) for a, b in zip(model.models, model8.models))
    prior_same = np.array_equal(model.prior.data, model8.prior.data)
    maps_same = all(
        np.array_equal(a.data.view(np.uint32), b.data.view(np.uint32)) and np.array_equal(quantize(a.data), quantize(b.data))
        for a, b in zip(maps, maps8)
    )
    ok = wide_same and models_same and prior_same and maps_same
    report(
        12,
        "determinism",
        ok,
        f"1 vs 8 threads: 64-channel forest identical {wide_same}; pipeline models identical {models_same}; "
        f"prior identical {prior_same}; confidence maps identical {maps_same}",
    )
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
