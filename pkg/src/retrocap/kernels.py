"""Exact top-k cosine scoring kernels.

Two interchangeable backends compute identical (id, rank) results:

* ``numba``: a streaming @njit kernel that scores rows with a float64
  accumulator and keeps a bounded worst-at-root heap, so the full score
  array is never materialized.
* ``numpy``: vectorized float64 matmul plus argpartition with tie repair.

Selection: the ``RETROCAP_BACKEND`` environment variable (``auto``,
``numba``, ``numpy``; default ``auto`` = numba when importable). Scores are
float64 dots of float32 keys against a float64 query in both backends;
ordering is (score descending, id ascending) and is identical across
backends. Scores may differ by float summation order, well below 1e-12
at desk scale.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        return deco


_ENV_VAR = "RETROCAP_BACKEND"
_active: str | None = None


@njit(cache=True)
def _worse(s_a, id_a, s_b, id_b):
    # "worse" = ranked after under (score desc, id asc)
    if s_a != s_b:
        return s_a < s_b
    return id_a > id_b


@njit(cache=True)
def _topk_heap(mat, ids, q, k):
    n, d = mat.shape
    hs = np.empty(k, np.float64)
    hi = np.empty(k, np.uint64)
    hr = np.empty(k, np.int64)
    size = 0
    for row in range(n):
        s = 0.0
        for c in range(d):
            s += np.float64(mat[row, c]) * q[c]
        rid = ids[row]
        if size < k:
            hs[size] = s
            hi[size] = rid
            hr[size] = row
            i = size
            size += 1
            while i > 0:
                p = (i - 1) // 2
                if _worse(hs[i], hi[i], hs[p], hi[p]):
                    hs[i], hs[p] = hs[p], hs[i]
                    hi[i], hi[p] = hi[p], hi[i]
                    hr[i], hr[p] = hr[p], hr[i]
                    i = p
                else:
                    break
        elif _worse(hs[0], hi[0], s, rid):
            hs[0] = s
            hi[0] = rid
            hr[0] = row
            i = 0
            while True:
                left = 2 * i + 1
                right = left + 1
                w = i
                if left < size and _worse(hs[left], hi[left], hs[w], hi[w]):
                    w = left
                if right < size and _worse(hs[right], hi[right], hs[w], hi[w]):
                    w = right
                if w == i:
                    break
                hs[i], hs[w] = hs[w], hs[i]
                hi[i], hi[w] = hi[w], hi[i]
                hr[i], hr[w] = hr[w], hr[i]
                i = w
    return hs, hi, hr, size


def _order_candidates(scores, ids, rows, k):
    order = np.lexsort((ids, -scores))[:k]
    return rows[order], scores[order]


def topk_numba(mat: np.ndarray, ids: np.ndarray, q: np.ndarray, k: int):
    """Top-k row indices and scores via the @njit streaming heap."""
    if not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    hs, hi, hr, size = _topk_heap(mat, ids, q, int(k))
    return _order_candidates(hs[:size], hi[:size], hr[:size], k)


def topk_numpy(mat: np.ndarray, ids: np.ndarray, q: np.ndarray, k: int):
    """Top-k row indices and scores via vectorized scoring + partial select."""
    scores = mat.astype(np.float64) @ q
    n = scores.shape[0]
    if k < n:
        part = np.argpartition(scores, n - k)[n - k:]
        # argpartition splits score ties arbitrarily; re-gather everything at
        # or above the boundary score so ties resolve by id like the oracle
        cand = np.flatnonzero(scores >= scores[part].min())
    else:
        cand = np.arange(n)
    rows, sel_scores = _order_candidates(scores[cand], ids[cand], cand, k)
    return rows, sel_scores


def available_backends() -> list[str]:
    return ["numba", "numpy"] if HAS_NUMBA else ["numpy"]


def active_backend() -> str:
    """Backend resolved from RETROCAP_BACKEND, cached after first use."""
    global _active
    if _active is None:
        choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
        if choice in ("", "auto"):
            _active = "numba" if HAS_NUMBA else "numpy"
        elif choice == "numpy":
            _active = "numpy"
        elif choice == "numba":
            if not HAS_NUMBA:
                raise RuntimeError(
                    f"{_ENV_VAR}=numba but numba is not importable"
                )
            _active = "numba"
        else:
            raise ValueError(f"unknown {_ENV_VAR} value {choice!r}")
    return _active


def _reset_backend() -> None:
    global _active
    _active = None


def topk(mat: np.ndarray, ids: np.ndarray, q: np.ndarray, k: int):
    """Dispatch to the active backend. mat float32 (n, d), q float64 (d,)."""
    mat = np.ascontiguousarray(mat, dtype=np.float32)
    ids = np.asarray(ids, dtype=np.uint64)
    q = np.asarray(q, dtype=np.float64)
    if active_backend() == "numba":
        return topk_numba(mat, ids, q, k)
    return topk_numpy(mat, ids, q, k)
