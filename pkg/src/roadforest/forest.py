"""Random forest of local experts.

Each split node owns a random selection of kernels (both statistics of each
selected kernel), a linear SVM trained on the node's samples restricted to
that selection, and a threshold on the SVM score picked to maximise
information gain. Samples with ``score <= threshold`` go left.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .svm import LinearExpert, SvmConfig, _affine_rows, train_svm

__all__ = [
    "ForestConfig",
    "FeatureSelection",
    "CandidateSplit",
    "Tree",
    "ForestModel",
    "ModelFormatError",
    "entropy",
    "information_gain",
    "threshold_candidates",
    "best_threshold",
    "evaluate_candidate",
    "train_tree",
    "train_forest",
    "predict",
    "estimate_memory",
    "save_model",
    "load_model",
    "serialize_model",
]

RFLE_MAGIC = b"RFLE"
RFLE_VERSION = 1
SPLIT, LEAF = 0, 1


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 10
    max_depth: int = 10
    num_candidates: int = 10
    min_samples_leaf: int = 10
    min_gain: float = 1e-6
    bagging: bool = True
    seed: int = 0
    svm: SvmConfig = field(default_factory=SvmConfig)
    max_kernels_per_node: int = 8
    max_thresholds: int = 64
    # "expert" trains an SVM per candidate; "stump" is the axis-aligned baseline
    split_mode: str = "expert"
    standardize: bool = True

    def __post_init__(self):
        if self.num_trees < 1 or self.max_depth < 1 or self.num_candidates < 1:
            raise ValueError("num_trees, max_depth and num_candidates must be >= 1")
        if self.min_samples_leaf < 1 or self.max_kernels_per_node < 1:
            raise ValueError("min_samples_leaf and max_kernels_per_node must be >= 1")
        if self.split_mode not in ("expert", "stump"):
            raise ValueError(f"unknown split_mode {self.split_mode!r}")


@dataclass(frozen=True)
class FeatureSelection:
    kernel_ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(sorted(int(k) for k in self.kernel_ids))
        if not ids or len(set(ids)) != len(ids) or ids[0] < 0:
            raise ValueError("kernel ids must be distinct, non-negative and non-empty")
        object.__setattr__(self, "kernel_ids", ids)

    @property
    def columns(self) -> np.ndarray:
        """Descriptor columns: ``(mean, std)`` of each kernel, kernels ascending."""
        k = np.asarray(self.kernel_ids, dtype=np.intp)
        return np.stack([2 * k, 2 * k + 1], axis=1).ravel()


@dataclass(frozen=True)
class CandidateSplit:
    selection: FeatureSelection
    expert: LinearExpert
    threshold: float
    gain: float


# -- purity ---------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _h2(a, b):
    n = a + b
    h = 0.0
    if a > 0:
        p = a / n
        h -= p * math.log2(p)
    if b > 0:
        p = b / n
        h -= p * math.log2(p)
    return h


@numba.njit(cache=True, nogil=True)
def _gain2(p0, p1, l0, l1):
    r0, r1 = p0 - l0, p1 - l1
    n = p0 + p1
    nl = l0 + l1
    nr = r0 + r1
    g = _h2(p0, p1)
    if nl > 0:
        g -= (nl / n) * _h2(l0, l1)
    if nr > 0:
        g -= (nr / n) * _h2(r0, r1)
    return g


def entropy(counts) -> float:
    """Shannon entropy (bits) of a class histogram; ``0 log 0 = 0``."""
    c = [float(v) for v in counts]
    if any(v < 0 for v in c):
        raise ValueError("counts must be non-negative")
    n = sum(c)
    if n <= 0:
        raise ValueError("entropy of an empty set")
    if len(c) == 2:
        return float(_h2(c[0], c[1]))
    h = 0.0
    for v in c:
        if v > 0:
            p = v / n
            h -= p * math.log2(p)
    return h


def information_gain(parent, left, right) -> float:
    """Parent entropy minus the size-weighted entropies of both children."""
    p, lc, rc = (np.asarray(v, dtype=np.float64) for v in (parent, left, right))
    if not (p.shape == lc.shape == rc.shape) or not np.array_equal(lc + rc, p):
        raise ValueError("inconsistent counts: left + right must equal parent")
    if lc.sum() <= 0 or rc.sum() <= 0:
        raise ValueError("entropy of an empty set")
    if p.shape[0] == 2:
        return float(_gain2(p[0], p[1], lc[0], lc[1]))
    n = p.sum()
    return entropy(p) - lc.sum() / n * entropy(lc) - rc.sum() / n * entropy(rc)


# -- threshold search -----------------------------------------------------


def threshold_candidates(scores: np.ndarray, max_thresholds: int = 64) -> np.ndarray:
    """Midpoints between distinct scores, or evenly spaced quantiles, then 0."""
    distinct = np.unique(scores)
    if distinct.shape[0] <= max_thresholds:
        cands = 0.5 * (distinct[:-1] + distinct[1:])
    else:
        levels = np.arange(1, max_thresholds + 1) / (max_thresholds + 1)
        cands = np.quantile(scores, levels)
    # the SVM's own boundary goes last so that it only wins on a strict improvement
    return np.append(cands, 0.0)


@numba.njit(cache=True, nogil=True)
def _sweep(sorted_scores, sorted_labels, thresholds):
    n = sorted_scores.shape[0]
    pos_total = 0.0
    for i in range(n):
        pos_total += sorted_labels[i]
    neg_total = n - pos_total
    cum_pos = np.zeros(n + 1)
    for i in range(n):
        cum_pos[i + 1] = cum_pos[i] + sorted_labels[i]
    best_gain = -np.inf
    best_idx = -1
    for t in range(thresholds.shape[0]):
        nl = np.searchsorted(sorted_scores, thresholds[t], side="right")
        l1 = cum_pos[nl]
        l0 = nl - l1
        g = _gain2(neg_total, pos_total, l0, l1)
        if nl == 0 or nl == n:
            g = 0.0
        if g > best_gain:
            best_gain = g
            best_idx = t
    return best_idx, best_gain


def best_threshold(scores, labels, max_thresholds: int = 64) -> tuple[float, float]:
    """Threshold maximising information gain of ``{score <= t}`` vs the rest.

    Ties go to the earliest candidate in :func:`threshold_candidates` order.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    order = np.argsort(s, kind="stable")
    cands = threshold_candidates(s, max_thresholds)
    idx, gain = _sweep(s[order], y[order], cands)
    return float(cands[idx]), float(gain)


def _fit_expert(Xs: np.ndarray, y: np.ndarray, svm: SvmConfig, standardize: bool) -> LinearExpert:
    X = Xs.astype(np.float64)
    if not standardize:
        return train_svm(X, y, svm)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd <= 1e-12] = 1.0
    z = train_svm((X - mu) / sd, y, svm)
    # fold the scaling back so the expert applies to raw descriptors
    w = z.weights.astype(np.float64) / sd
    b = float(z.bias) - float(w @ mu)
    return LinearExpert(w, b)


def evaluate_candidate(
    samples: np.ndarray,
    labels: np.ndarray,
    selection: FeatureSelection,
    svm_config: SvmConfig = SvmConfig(),
    max_thresholds: int = 64,
    standardize: bool = True,
) -> CandidateSplit:
    """Train the node expert on the selected columns and pick its threshold.

    ``samples`` are full descriptors (``N x 2K``); the node must hold both
    classes.
    """
    Xs = np.ascontiguousarray(np.asarray(samples, dtype=np.float32)[:, selection.columns])
    expert = _fit_expert(Xs, labels, svm_config, standardize)
    scores = _affine_rows(Xs, expert.weights, expert.bias)
    tau, gain = best_threshold(scores, labels, max_thresholds)
    return CandidateSplit(selection, expert, tau, gain)


def _evaluate_stump(Xnode, y, kernel: int, stat: int, max_thresholds: int) -> CandidateSplit:
    sel = FeatureSelection((kernel,))
    w = np.zeros(2, dtype=np.float32)
    w[stat] = 1.0
    expert = LinearExpert(w, 0.0)
    Xs = np.ascontiguousarray(Xnode[:, sel.columns])
    scores = _affine_rows(Xs, expert.weights, expert.bias)
    tau, gain = best_threshold(scores, y, max_thresholds)
    return CandidateSplit(sel, expert, tau, gain)


# -- trees ----------------------------------------------------------------


@dataclass
class Tree:
    """Flat node arrays in depth-first (pre-order) layout; node 0 is the root."""

    kind: np.ndarray  # uint8, 0 split / 1 leaf
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    threshold: np.ndarray  # float32
    bias: np.ndarray  # float32
    posterior: np.ndarray  # float32
    sample_count: np.ndarray  # uint32
    kernel_ptr: np.ndarray  # int64, node -> slice into kernels
    kernels: np.ndarray  # uint32
    weights: np.ndarray  # float32, two per kernel

    @property
    def node_count(self) -> int:
        return self.kind.shape[0]

    def depths(self) -> np.ndarray:
        d = np.zeros(self.node_count, dtype=np.int64)
        for i in range(self.node_count):
            if self.kind[i] == SPLIT:
                d[self.left[i]] = d[i] + 1
                d[self.right[i]] = d[i] + 1
        return d

    def columns(self) -> np.ndarray:
        k = self.kernels.astype(np.int64)
        return np.stack([2 * k, 2 * k + 1], axis=1).ravel()


class _TreeBuilder:
    def __init__(self):
        self.nodes: list[dict] = []

    def add(self, **node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def finish(self) -> Tree:
        n = len(self.nodes)
        kind = np.array([nd["kind"] for nd in self.nodes], dtype=np.uint8)
        left = np.zeros(n, np.int32)
        right = np.zeros(n, np.int32)
        tau = np.zeros(n, np.float32)
        bias = np.zeros(n, np.float32)
        post = np.zeros(n, np.float32)
        count = np.zeros(n, np.uint32)
        ptr = np.zeros(n + 1, np.int64)
        kernels, weights = [], []
        for i, nd in enumerate(self.nodes):
            if nd["kind"] == SPLIT:
                left[i], right[i] = nd["left"], nd["right"]
                tau[i] = nd["threshold"]
                bias[i] = nd["expert"].bias
                kernels.extend(nd["selection"].kernel_ids)
                weights.append(nd["expert"].weights)
                ptr[i + 1] = ptr[i] + len(nd["selection"].kernel_ids)
            else:
                post[i] = nd["posterior"]
                count[i] = nd["count"]
                ptr[i + 1] = ptr[i]
        return Tree(
            kind,
            left,
            right,
            tau,
            bias,
            post,
            count,
            ptr,
            np.asarray(kernels, dtype=np.uint32),
            np.concatenate(weights).astype(np.float32) if weights else np.zeros(0, np.float32),
        )


def _leaf(builder: _TreeBuilder, y: np.ndarray) -> int:
    n = y.shape[0]
    road = int(y.sum())
    return builder.add(kind=LEAF, posterior=np.float32((road + 1) / (n + 2)), count=n)


def _draw_candidates(rng: np.random.Generator, k_total: int, config: ForestConfig) -> list:
    draws = []
    for _ in range(config.num_candidates):
        if config.split_mode == "stump":
            draws.append((int(rng.integers(k_total)), int(rng.integers(2))))
        else:
            k = int(rng.integers(1, min(k_total, config.max_kernels_per_node) + 1))
            ids = rng.choice(k_total, size=k, replace=False)
            seed = int(rng.integers(2**63))
            draws.append((FeatureSelection(tuple(ids)), seed))
    return draws


def _grow(builder, X, y, depth, rng, config, k_total) -> int:
    n = y.shape[0]
    road = int(y.sum())
    if depth >= config.max_depth or n < 2 * config.min_samples_leaf or road in (0, n):
        return _leaf(builder, y)
    best = None
    for draw in _draw_candidates(rng, k_total, config):
        if config.split_mode == "stump":
            cand = _evaluate_stump(X, y, draw[0], draw[1], config.max_thresholds)
        else:
            svm = replace(config.svm, seed=draw[1])
            cand = evaluate_candidate(
                X, y, draw[0], svm, config.max_thresholds, config.standardize
            )
        if best is None or cand.gain > best.gain:
            best = cand
    if best.gain < config.min_gain:
        return _leaf(builder, y)
    tau = np.float32(best.threshold)
    Xs = np.ascontiguousarray(X[:, best.selection.columns])
    go_left = _affine_rows(Xs, best.expert.weights, best.expert.bias) <= np.float64(tau)
    n_left = int(go_left.sum())
    if n_left == 0 or n_left == n:
        return _leaf(builder, y)
    node = builder.add(kind=SPLIT, selection=best.selection, expert=best.expert, threshold=tau)
    builder.nodes[node]["left"] = _grow(builder, X[go_left], y[go_left], depth + 1, rng, config, k_total)
    builder.nodes[node]["right"] = _grow(builder, X[~go_left], y[~go_left], depth + 1, rng, config, k_total)
    return node


def train_tree(
    samples: np.ndarray,
    labels: np.ndarray,
    config: ForestConfig = ForestConfig(),
    tree_seed: int | np.random.SeedSequence = 0,
) -> Tree:
    """Grow one tree top-down on the given descriptors (``N x 2K``)."""
    X = np.ascontiguousarray(samples, dtype=np.float32)
    y = np.asarray(labels).reshape(-1).astype(np.uint8)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty training input")
    if X.shape[0] != y.shape[0] or X.shape[1] % 2:
        raise ValueError("descriptors must be N x 2K with one label per row")
    rng = np.random.default_rng(tree_seed)
    builder = _TreeBuilder()
    _grow(builder, X, y, 0, rng, config, X.shape[1] // 2)
    return builder.finish()


@dataclass
class ForestModel:
    trees: list[Tree]
    config: ForestConfig
    num_kernels: int

    def predict(self, descriptor) -> float:
        return predict(self, descriptor)

    def predict_batch(self, descriptors: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(descriptors, dtype=np.float32)
        if X.ndim != 2 or X.shape[1] != 2 * self.num_kernels:
            raise ValueError(
                f"descriptor dimension must be {2 * self.num_kernels}, got {X.shape[-1]}"
            )
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            _route_add(
                X,
                tree.kind,
                tree.left,
                tree.right,
                tree.threshold,
                tree.bias,
                tree.posterior,
                tree.kernel_ptr,
                tree.columns(),
                tree.weights,
                total,
            )
        return total / len(self.trees)


@numba.njit(cache=True, nogil=True)
def _route_add(X, kind, left, right, tau, bias, post, ptr, cols, weights, total):
    for r in range(X.shape[0]):
        node = 0
        while kind[node] == 0:
            acc = np.float64(bias[node])
            for e in range(2 * ptr[node], 2 * ptr[node + 1]):
                acc += np.float64(weights[e]) * np.float64(X[r, cols[e]])
            if acc <= np.float64(tau[node]):
                node = left[node]
            else:
                node = right[node]
        total[r] += np.float64(post[node])


def predict(model: ForestModel, descriptor) -> float:
    """Mean leaf posterior across trees for one descriptor."""
    x = np.asarray(descriptor, dtype=np.float32).reshape(1, -1)
    return float(model.predict_batch(x)[0])


def _tree_seed(seed: int, t: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, t])


def _train_one(X, y, config: ForestConfig, t: int) -> Tree:
    ss = _tree_seed(config.seed, t)
    bag_ss, grow_ss = ss.spawn(2)
    if config.bagging:
        idx = np.random.default_rng(bag_ss).integers(0, X.shape[0], X.shape[0])
        Xt, yt = X[idx], y[idx]
    else:
        Xt, yt = X, y
    return train_tree(Xt, yt, config, grow_ss)


def train_forest(tables, config: ForestConfig = ForestConfig(), threads: int | None = None) -> ForestModel:
    """Train ``config.num_trees`` independent trees.

    ``tables`` is a list of labelled :class:`SuperpixelFeatureTable` or a
    ``(descriptors, labels)`` pair. Results do not depend on ``threads``.
    """
    if isinstance(tables, tuple):
        X, y = tables
    else:
        labelled = [t for t in tables if t.labels is not None]
        if not labelled:
            raise ValueError("no labelled training data")
        X = np.concatenate([t.descriptors for t in labelled])
        y = np.concatenate([t.labels for t in labelled])
    X = np.ascontiguousarray(X, dtype=np.float32)
    y = np.asarray(y).astype(np.uint8)
    if X.shape[0] == 0:
        raise ValueError("no labelled training data")
    workers = max(1, threads or os.cpu_count() or 1)
    if workers == 1:
        trees = [_train_one(X, y, config, t) for t in range(config.num_trees)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(lambda t: _train_one(X, y, config, t), range(config.num_trees)))
    return ForestModel(trees, config, X.shape[1] // 2)


def estimate_memory(num_trees: int, levels: int, max_kernels: int, float_bytes: int = 4) -> int:
    """Upper bound on forest storage: ``T * 2**l * (2K + 1) * float_bytes``."""
    if min(num_trees, levels, max_kernels, float_bytes) < 1:
        raise ValueError("all arguments must be >= 1")
    if levels > 62:
        raise OverflowError("tree depth too large for the memory model")
    total = num_trees * (1 << levels) * (2 * max_kernels + 1) * float_bytes
    if total >= 2**63:
        raise OverflowError("memory estimate overflows 64 bits")
    return total


# -- serialization --------------------------------------------------------


class ModelFormatError(ValueError):
    """Raised on malformed RFLE files."""


def serialize_model(model: ForestModel) -> bytes:
    out = [RFLE_MAGIC, struct.pack("<4I", RFLE_VERSION, len(model.trees), model.num_kernels, model.config.max_depth)]
    for tree in model.trees:
        out.append(struct.pack("<I", tree.node_count))
        for i in range(tree.node_count):
            if tree.kind[i] == SPLIT:
                a, b = tree.kernel_ptr[i], tree.kernel_ptr[i + 1]
                out.append(struct.pack("<BI", SPLIT, b - a))
                out.append(tree.kernels[a:b].astype("<u4").tobytes())
                out.append(tree.weights[2 * a : 2 * b].astype("<f4").tobytes())
                out.append(
                    struct.pack("<ffII", tree.bias[i], tree.threshold[i], tree.left[i], tree.right[i])
                )
            else:
                out.append(struct.pack("<BfI", LEAF, tree.posterior[i], tree.sample_count[i]))
    return b"".join(out)


def save_model(model: ForestModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ModelFormatError("truncated model file")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.buf):
            raise ModelFormatError("truncated model file")
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return arr


def load_model(path: str | os.PathLike) -> ForestModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise ModelFormatError("empty or truncated model file")
    if buf[:4] != RFLE_MAGIC:
        raise ModelFormatError("bad magic")
    rd = _Reader(buf)
    rd.pos = 4
    version, n_trees, k_total, max_depth = rd.take("<4I")
    if version != RFLE_VERSION:
        raise ModelFormatError(f"version mismatch: file has {version}, expected {RFLE_VERSION}")
    if n_trees < 1 or k_total < 1 or max_depth < 1:
        raise ModelFormatError("invalid model header")
    trees = []
    for _ in range(n_trees):
        (n_nodes,) = rd.take("<I")
        builder = _TreeBuilder()
        for _ in range(n_nodes):
            (kind,) = rd.take("<B")
            if kind == SPLIT:
                (nk,) = rd.take("<I")
                kernels = rd.array("<u4", nk)
                weights = rd.array("<f4", 2 * nk)
                bias, tau, left, right = rd.take("<ffII")
                if nk == 0 or kernels.max() >= k_total or max(left, right) >= n_nodes:
                    raise ModelFormatError("invalid split node")
                builder.add(
                    kind=SPLIT,
                    selection=FeatureSelection(tuple(int(k) for k in kernels)),
                    expert=LinearExpert(weights.astype(np.float32), bias),
                    threshold=np.float32(tau),
                    left=left,
                    right=right,
                )
            elif kind == LEAF:
                post, count = rd.take("<fI")
                builder.add(kind=LEAF, posterior=np.float32(post), count=count)
            else:
                raise ModelFormatError(f"unknown node kind {kind}")
        trees.append(builder.finish())
    if rd.pos != len(buf):
        raise ModelFormatError("trailing bytes after last tree")
    config = ForestConfig(num_trees=n_trees, max_depth=max_depth)
    return ForestModel(trees, config, k_total)
