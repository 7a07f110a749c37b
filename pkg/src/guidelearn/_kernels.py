"""Numeric inner loops: similarity scan, thresholded top-k, negative entropy.

Two implementations are kept side by side. The numba one is used when numba
imports cleanly and ``GUIDELEARN_DISABLE_NUMBA`` is unset (or "0"); the pure
numpy one is the fallback and the reference in tests.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("GUIDELEARN_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError("numba disabled by GUIDELEARN_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# -- numpy reference path -------------------------------------------------

def similarities_numpy(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    if matrix.shape[0] == 0:
        return np.empty(0, dtype=np.float64)
    return matrix @ query


def top_k_numpy(sims: np.ndarray, ids: np.ndarray, k: int, threshold: float) -> np.ndarray:
    """Positions of the best ``k`` scores >= threshold, by (-score, id)."""
    keep = np.flatnonzero(sims >= threshold)
    if keep.size == 0 or k <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((ids[keep], -sims[keep]))
    return keep[order[:k]].astype(np.int64)


def neg_entropy_numpy(probs: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return terms.sum(axis=1)


# -- numba path ------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _similarities_jit(matrix, query):
        n, d = matrix.shape
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += matrix[i, j] * query[j]
            out[i] = acc
        return out

    @njit(cache=True)
    def _top_k_jit(sims, ids, k, threshold):
        # insertion into a k-slot buffer; k is small (a handful of rules)
        best = np.empty(k, dtype=np.int64)
        filled = 0
        for i in range(sims.shape[0]):
            s = sims[i]
            if s < threshold:
                continue
            pos = filled
            while pos > 0:
                j = best[pos - 1]
                if sims[j] > s or (sims[j] == s and ids[j] < ids[i]):
                    break
                pos -= 1
            if pos >= k:
                continue
            last = filled if filled < k else k - 1
            for m in range(last, pos, -1):
                best[m] = best[m - 1]
            best[pos] = i
            if filled < k:
                filled += 1
        return best[:filled].copy()

    @njit(cache=True)
    def _neg_entropy_jit(probs):
        n, c = probs.shape
        out = np.zeros(n, dtype=np.float64)
        for i in range(n):
            acc = 0.0
            for j in range(c):
                p = probs[i, j]
                if p > 0.0:
                    acc += p * np.log(p)
            out[i] = acc
        return out

    def similarities_numba(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
        if matrix.shape[0] == 0:
            return np.empty(0, dtype=np.float64)
        return _similarities_jit(np.ascontiguousarray(matrix, dtype=np.float64),
                                 np.ascontiguousarray(query, dtype=np.float64))

    def top_k_numba(sims: np.ndarray, ids: np.ndarray, k: int, threshold: float) -> np.ndarray:
        if k <= 0 or sims.shape[0] == 0:
            return np.empty(0, dtype=np.int64)
        return _top_k_jit(np.ascontiguousarray(sims, dtype=np.float64),
                          np.ascontiguousarray(ids, dtype=np.int64), int(k), float(threshold))

    def neg_entropy_numba(probs: np.ndarray) -> np.ndarray:
        p = np.ascontiguousarray(np.atleast_2d(probs), dtype=np.float64)
        return _neg_entropy_jit(p)

    similarities = similarities_numba
    top_k = top_k_numba
    neg_entropy = neg_entropy_numba
    BACKEND = "numba"
else:
    similarities = similarities_numpy
    top_k = top_k_numpy
    neg_entropy = neg_entropy_numpy
    BACKEND = "numpy"
