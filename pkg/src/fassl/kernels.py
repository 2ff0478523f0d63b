"""Hot numeric kernels for retrieval evaluation, with optional numba JIT.

The per-query k-nearest scan with its lowest-index tie rule is the one
loop-dominated hot path in the package (the benchmark shows ~20x from JIT);
it carries a numba ``@njit`` version and a pure-numpy fallback producing
identical results. Pairwise cosine goes through BLAS on every path: the same
benchmark shows a numba loop losing to BLAS at all sizes, so both env
settings share one bit-identical similarity computation.

Path selection: env var ``FASSL_NUMBA`` ("1" default) picks the JIT path
when numba imports cleanly; ``FASSL_NUMBA=0`` forces pure numpy. The flag is
read at import time. See ``benchmarks/bench_kernels.py``.
"""

from __future__ import annotations

import os

import numpy as np

_WANT_NUMBA = os.environ.get("FASSL_NUMBA", "1") != "0"

if _WANT_NUMBA:
    try:
        import numba
    except ImportError:
        numba = None
else:
    numba = None

USING_NUMBA = numba is not None


def pairwise_cosine(x: np.ndarray, y: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Cosine similarity matrix between row sets; rows normalized with an eps guard."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    xn = x / np.maximum(np.sqrt((x * x).sum(axis=1, keepdims=True)), eps)
    yn = y / np.maximum(np.sqrt((y * y).sum(axis=1, keepdims=True)), eps)
    return xn @ yn.T


def _topk_hits_np(dist: np.ndarray, train_labels: np.ndarray, test_labels: np.ndarray, k: int) -> np.ndarray:
    hits = np.zeros(dist.shape[0], dtype=np.int64)
    for q in range(dist.shape[0]):
        # stable sort: equal distances resolve to the lower training index
        nearest = np.argsort(dist[q], kind="stable")[:k]
        hits[q] = 1 if np.any(train_labels[nearest] == test_labels[q]) else 0
    return hits


if USING_NUMBA:

    @numba.njit(cache=True)
    def _topk_hits_nb(dist, train_labels, test_labels, k):  # pragma: no cover - dispatch-tested
        q_count, n = dist.shape
        hits = np.zeros(q_count, dtype=np.int64)
        taken = np.zeros(n, dtype=np.bool_)
        for q in range(q_count):
            taken[:] = False
            hit = 0
            for _ in range(k):
                best = -1
                best_d = np.inf
                for j in range(n):
                    # strict < keeps the lowest index among equal distances
                    if not taken[j] and dist[q, j] < best_d:
                        best_d = dist[q, j]
                        best = j
                taken[best] = True
                if train_labels[best] == test_labels[q]:
                    hit = 1
                    break
            hits[q] = hit
        return hits


def topk_hits(dist: np.ndarray, train_labels: np.ndarray, test_labels: np.ndarray, k: int) -> np.ndarray:
    """Per query: 1 if the true class appears among the k nearest columns.

    Ties break toward the lower training index; both paths implement the
    same rule (stable argsort vs. repeated strict-minimum scan) and return
    identical results.
    """
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    train_labels = np.ascontiguousarray(train_labels, dtype=np.int64)
    test_labels = np.ascontiguousarray(test_labels, dtype=np.int64)
    k = min(k, dist.shape[1])
    if USING_NUMBA:
        return _topk_hits_nb(dist, train_labels, test_labels, k)
    return _topk_hits_np(dist, train_labels, test_labels, k)
