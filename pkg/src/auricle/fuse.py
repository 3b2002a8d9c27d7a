"""Feature informativeness scoring, top-k selection, and backend fusion."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .validation import check_matrix

FISHER_EPS = 1e-12


@dataclass(frozen=True)
class SelectorConfig:
    method: str = "fisher"  # or "extra_trees"
    top_k: int = 256
    trees: int = 100
    min_samples_split: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("fisher", "extra_trees"):
            raise ValueError(f"unknown selector method {self.method!r}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.trees < 1:
            raise ValueError("trees must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")


@dataclass(frozen=True)
class ReducedVector:
    values: np.ndarray
    backend: str
    record: str
    indices: np.ndarray  # kept dims, strictly increasing


@dataclass(frozen=True)
class FusedVector:
    values: np.ndarray
    layout: list  # [(backend, indices), ...] in concatenation order
    record: str

    def __post_init__(self):
        total = sum(len(idx) for _, idx in self.layout)
        if total != self.values.shape[0]:
            raise ValueError("layout lengths do not sum to vector length")


def _encode_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    if classes.shape[0] < 2:
        raise ValueError("need at least 2 classes")
    return y


def fisher_scores(X, labels) -> np.ndarray:
    """Between-class over within-class scatter per dimension.

    score_j = sum_c n_c (mu_cj - mu_j)^2 / (sum_c n_c var_cj + 1e-12),
    with population variances.
    """
    X = check_matrix(X, "X", min_rows=2)
    y = _encode_labels(labels)
    if y.shape[0] != X.shape[0]:
        raise ValueError("labels length does not match X rows")
    grand = X.mean(axis=0)
    numer = np.zeros(X.shape[1])
    denom = np.zeros(X.shape[1])
    for c in range(y.max() + 1):
        Xc = X[y == c]
        n_c = Xc.shape[0]
        mu_c = Xc.mean(axis=0)
        numer += n_c * (mu_c - grand) ** 2
        denom += n_c * Xc.var(axis=0)
    return numer / (denom + FISHER_EPS)


def _gini(counts: np.ndarray, n: int) -> float:
    return 1.0 - float(np.dot(counts, counts)) / (n * n)


def extra_trees_importance(X, labels, cfg: SelectorConfig) -> np.ndarray:
    """Gini importance from fully random extra trees.

    Each node draws floor(sqrt(d)) candidate dims without replacement and one
    uniform threshold per candidate between that dim's node-min and node-max,
    keeps the best Gini decrease, and recurses until pure or below
    min_samples_split. Importances are summed weighted impurity decreases,
    normalized to 1. Per-tree streams are seeded with seed XOR tree index, so
    results are reproducible and independent of tree scheduling.
    """
    X = check_matrix(X, "X", min_rows=2)
    y = _encode_labels(labels)
    if y.shape[0] != X.shape[0]:
        raise ValueError("labels length does not match X rows")
    n_total, d = X.shape
    n_classes = int(y.max()) + 1
    m_try = max(1, int(np.sqrt(d)))
    importance = np.zeros(d)

    for t in range(cfg.trees):
        rng = np.random.default_rng(cfg.seed ^ t)
        stack = [np.arange(n_total)]
        while stack:
            idx = stack.pop()
            n = idx.shape[0]
            counts = np.bincount(y[idx], minlength=n_classes)
            if counts.max() == n or n < cfg.min_samples_split:
                continue
            gini_parent = _gini(counts, n)
            dims = rng.choice(d, size=m_try, replace=False)
            best = None
            for j in dims:
                vals = X[idx, j]
                lo = vals.min()
                hi = vals.max()
                if lo == hi:
                    continue
                thr = rng.uniform(lo, hi)
                left = vals < thr
                nl = int(left.sum())
                if nl == 0 or nl == n:
                    continue
                cl = np.bincount(y[idx[left]], minlength=n_classes)
                cr = counts - cl
                nr = n - nl
                decrease = (n / n_total) * (
                    gini_parent - (nl / n) * _gini(cl, nl) - (nr / n) * _gini(cr, nr)
                )
                if best is None or decrease > best[0]:
                    best = (decrease, int(j), thr, left)
            if best is None:
                continue
            decrease, j, thr, left = best
            importance[j] += decrease
            right_child = idx[~left]
            left_child = idx[left]
            stack.append(right_child)
            stack.append(left_child)

    total = importance.sum()
    if total > 0.0:
        importance /= total
    return importance


def select_top_k(values, scores, k: int):
    """Keep the k highest-scoring dims (ties to the lower index).

    Returns (reduced, kept_indices) with kept indices increasing and original
    value order preserved; k larger than d is clamped with a warning.
    """
    values = np.asarray(values, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    d = scores.shape[0]
    if values.shape[-1] != d:
        raise ValueError("values and scores lengths do not match")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > d:
        warnings.warn(f"top_k={k} clamped to {d} available dims", stacklevel=2)
        k = d
    order = np.argsort(-scores, kind="stable")[:k]
    indices = np.sort(order)
    return values[..., indices], indices


def fuse(vec_a: ReducedVector, vec_b: ReducedVector) -> FusedVector:
    """Concatenate two reduced backend vectors in fixed backend order."""
    if vec_a.record != vec_b.record:
        raise ValueError(f"record mismatch: {vec_a.record!r} vs {vec_b.record!r}")
    for v in (vec_a, vec_b):
        if v.values.shape[0] < 1:
            raise ValueError(f"reduced vector for backend {v.backend!r} is empty")
    return FusedVector(
        values=np.concatenate([vec_a.values, vec_b.values]),
        layout=[(vec_a.backend, np.asarray(vec_a.indices)),
                (vec_b.backend, np.asarray(vec_b.indices))],
        record=vec_a.record,
    )


class FeatureSelector(BaseEstimator, TransformerMixin):
    """Top-k feature selection by fisher score or extra-trees importance."""

    def __init__(self, method="fisher", top_k=256, trees=100, min_samples_split=2, seed=0):
        self.method = method
        self.top_k = top_k
        self.trees = trees
        self.min_samples_split = min_samples_split
        self.seed = seed

    def fit(self, X, y):
        cfg = SelectorConfig(self.method, self.top_k, self.trees,
                             self.min_samples_split, self.seed)
        X = check_matrix(X, "X", min_rows=2)
        if cfg.method == "fisher":
            self.scores_ = fisher_scores(X, y)
        else:
            self.scores_ = extra_trees_importance(X, y, cfg)
        _, self.indices_ = select_top_k(np.zeros(X.shape[1]), self.scores_, cfg.top_k)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        if not hasattr(self, "indices_"):
            raise NotFittedError("FeatureSelector is not fitted")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(
                f"dimension mismatch: {X.shape[-1]} vs fitted {self.n_features_in_}"
            )
        return X[..., self.indices_]
