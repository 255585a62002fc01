"""Linear SVM node experts.

Training minimises ``0.5 * ||w||^2 + C * sum(hinge(y_i * (w.x_i + b)))`` with
dual coordinate descent. The bias is learnt through an appended constant
feature, so it is (weakly) regularised as well; the iterate with the lowest
true primal objective seen at the end of any epoch is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

__all__ = ["SvmConfig", "LinearExpert", "train_svm", "score", "score_batch", "svm_objective"]


@dataclass(frozen=True)
class SvmConfig:
    C: float = 0.5
    max_epochs: int = 1000
    tolerance: float = 1e-4
    seed: int = 0
    max_node_samples: int = 2000
    bias_scale: float = 1.0
    # (negative, positive) multipliers on C; None means unweighted
    class_weight: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.max_epochs < 1 or self.max_node_samples < 2:
            raise ValueError("max_epochs must be >= 1 and max_node_samples >= 2")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class LinearExpert:
    weights: np.ndarray  # float32
    bias: np.float32

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32).reshape(-1)
        if w.shape[0] < 1 or not np.all(np.isfinite(w)):
            raise ValueError("expert weights must be finite and non-empty")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", np.float32(self.bias))

    @property
    def dim(self) -> int:
        return self.weights.shape[0]


@numba.njit(cache=True)
def _affine(x, w, b):
    # fixed left-to-right order: the forest relies on training and prediction agreeing bit for bit
    acc = np.float64(b)
    for j in range(w.shape[0]):
        acc += np.float64(w[j]) * np.float64(x[j])
    return acc


@numba.njit(cache=True)
def _affine_rows(X, w, b):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        out[i] = _affine(X[i], w, b)
    return out


def score(expert: LinearExpert, x) -> float:
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    if x.shape[0] != expert.dim:
        raise ValueError(f"dimension mismatch: expert has {expert.dim}, input has {x.shape[0]}")
    return float(_affine(x, expert.weights, expert.bias))


def score_batch(expert: LinearExpert, X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[1] != expert.dim:
        raise ValueError("dimension mismatch between expert and samples")
    return _affine_rows(X, expert.weights, expert.bias)


def svm_objective(weights, bias, X, labels, C: float) -> float:
    """Primal hinge objective; the bias is not regularised."""
    w = np.asarray(weights, dtype=np.float64)
    y = np.where(np.asarray(labels) > 0, 1.0, -1.0)
    margins = y * (np.asarray(X, dtype=np.float64) @ w + float(bias))
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - margins).sum())


@numba.njit(cache=True)
def _splitmix(state):
    state = (state + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = state
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return state, z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _primal(w, Xa, y, cost):
    d = w.shape[0] - 1
    reg = 0.0
    for j in range(d):
        reg += w[j] * w[j]
    loss = 0.0
    for i in range(Xa.shape[0]):
        m = 1.0 - y[i] * _affine(Xa[i], w, 0.0)
        if m > 0.0:
            loss += cost[i] * m
    return 0.5 * reg + loss


@numba.njit(cache=True)
def _dual_cd(Xa, y, cost, max_epochs, tol, seed):
    """Dual coordinate descent with active-set shrinking.

    Returns the iterate with the lowest primal objective seen at the end of
    any epoch, plus the running minimum of that objective per epoch.
    """
    n, d = Xa.shape
    alpha = np.zeros(n)
    w = np.zeros(d)
    qii = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += Xa[i, j] * Xa[i, j]
        qii[i] = s
    index = np.arange(n)
    active = n
    pg_max_old = np.inf
    pg_min_old = -np.inf
    state = np.uint64(seed)
    best_w = w.copy()
    best_obj = _primal(w, Xa, y, cost)
    trace = np.empty(max_epochs)
    epochs = 0
    for epoch in range(max_epochs):
        for i in range(active - 1, 0, -1):
            state, r = _splitmix(state)
            k = np.int64(r % np.uint64(i + 1))
            index[i], index[k] = index[k], index[i]
        pg_max = -np.inf
        pg_min = np.inf
        t = 0
        while t < active:
            i = index[t]
            g = y[i] * _affine(Xa[i], w, 0.0) - 1.0
            pg = 0.0
            if alpha[i] == 0.0:
                if g > pg_max_old:
                    # bound and unlikely to move: drop from the active set
                    active -= 1
                    index[t], index[active] = index[active], index[t]
                    continue
                if g < 0.0:
                    pg = g
            elif alpha[i] == cost[i]:
                if g < pg_min_old:
                    active -= 1
                    index[t], index[active] = index[active], index[t]
                    continue
                if g > 0.0:
                    pg = g
            else:
                pg = g
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if abs(pg) > 1e-12 and qii[i] > 0.0:
                old = alpha[i]
                alpha[i] = min(max(old - g / qii[i], 0.0), cost[i])
                delta = (alpha[i] - old) * y[i]
                for j in range(d):
                    w[j] += delta * Xa[i, j]
            t += 1
        obj = _primal(w, Xa, y, cost)
        if obj < best_obj:
            best_obj = obj
            best_w[:] = w
        trace[epoch] = best_obj
        epochs = epoch + 1
        if pg_max - pg_min <= tol:
            if active == n:
                break
            # converged on the shrunk problem: recheck everything
            active = n
            pg_max_old = np.inf
            pg_min_old = -np.inf
            continue
        pg_max_old = pg_max if pg_max > 0.0 else np.inf
        pg_min_old = pg_min if pg_min < 0.0 else -np.inf
    return best_w, trace[:epochs]


def _subsample(labels: np.ndarray, limit: int, seed: int) -> np.ndarray:
    n = labels.shape[0]
    if n <= limit:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=limit, replace=False))
    for cls in (0, 1):
        if not np.any(labels[idx] == cls):
            # keep both classes represented
            pool = np.flatnonzero(labels == cls)
            idx[rng.integers(limit)] = pool[rng.integers(pool.shape[0])]
            idx = np.sort(idx)
    return idx


def train_svm(
    samples: np.ndarray,
    labels: np.ndarray,
    config: SvmConfig = SvmConfig(),
    history: list | None = None,
) -> LinearExpert:
    """Fit a linear max-margin expert on binary ``labels`` (0/1).

    If ``history`` is given, the best primal objective reached after every
    epoch is appended to it.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y01 = np.asarray(labels).reshape(-1).astype(np.int64)
    if X.shape[0] != y01.shape[0]:
        raise ValueError("samples and labels differ in length")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite features")
    if X.shape[0] < 2 or not (np.any(y01 == 0) and np.any(y01 == 1)):
        raise ValueError("train_svm needs both classes present")
    idx = _subsample(y01, config.max_node_samples, config.seed)
    X, y01 = X[idx], y01[idx]
    y = np.where(y01 > 0, 1.0, -1.0)
    Xa = np.empty((X.shape[0], X.shape[1] + 1))
    Xa[:, :-1] = X
    Xa[:, -1] = config.bias_scale
    cost = np.full(X.shape[0], float(config.C))
    if config.class_weight is not None:
        cost *= np.where(y01 > 0, config.class_weight[1], config.class_weight[0])
    w, trace = _dual_cd(
        Xa, y, cost, int(config.max_epochs), float(config.tolerance), np.uint64(config.seed & 0xFFFFFFFFFFFFFFFF)
    )
    if history is not None:
        history.extend(float(v) for v in trace)
    return LinearExpert(w[:-1], w[-1] * config.bias_scale)
