"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba implementations are used when numba imports cleanly and the
environment variable ``MSVQ_DISABLE_NUMBA`` is unset (or ``0``).  Both paths
are always importable as ``<name>_numba`` / ``<name>_numpy`` so tests and
benchmarks can compare them directly; the unsuffixed names dispatch.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships in the optional "fast" extra
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _numba_requested() -> bool:
    flag = os.environ.get("MSVQ_DISABLE_NUMBA", "0").strip().lower()
    return flag in ("", "0", "false", "no")


USE_NUMBA = _HAVE_NUMBA and _numba_requested()


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# nearest codeword search
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nearest_codeword_nb(vectors, embeddings, emb_sq):
    n = vectors.shape[0]
    k = embeddings.shape[0]
    dots = vectors @ embeddings.T
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        v_sq = 0.0
        for c in range(vectors.shape[1]):
            v_sq += vectors[i, c] * vectors[i, c]
        best = 0
        best_dist = np.inf
        for j in range(k):
            dist = v_sq - 2.0 * dots[i, j] + emb_sq[j]
            # strict < keeps the lowest index on ties
            if dist < best_dist:
                best_dist = dist
                best = j
        out[i] = best
    return out


def nearest_codeword_numba(vectors: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    vectors = np.ascontiguousarray(vectors, dtype=np.float64)
    embeddings = np.ascontiguousarray(embeddings, dtype=np.float64)
    emb_sq = np.einsum("kd,kd->k", embeddings, embeddings)
    return _nearest_codeword_nb(vectors, embeddings, emb_sq)


def nearest_codeword_numpy(vectors: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    emb_sq = np.einsum("kd,kd->k", embeddings, embeddings)
    v_sq = np.einsum("nd,nd->n", vectors, vectors)
    dist = v_sq[:, None] - 2.0 * (vectors @ embeddings.T) + emb_sq[None, :]
    # np.argmin returns the first minimum, i.e. the lowest index on ties
    return np.argmin(dist, axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# per-codeword assignment statistics (EMA accumulation)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _assignment_stats_nb(vectors, indices, k):
    n, d = vectors.shape
    counts = np.zeros(k, dtype=np.float64)
    sums = np.zeros((k, d), dtype=np.float64)
    for i in range(n):
        j = indices[i]
        counts[j] += 1.0
        for c in range(d):
            sums[j, c] += vectors[i, c]
    return counts, sums


def assignment_stats_numba(vectors: np.ndarray, indices: np.ndarray, k: int):
    vectors = np.ascontiguousarray(vectors, dtype=np.float64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    return _assignment_stats_nb(vectors, indices, k)


def assignment_stats_numpy(vectors: np.ndarray, indices: np.ndarray, k: int):
    vectors = np.asarray(vectors, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    counts = np.bincount(indices, minlength=k).astype(np.float64)
    sums = np.zeros((k, vectors.shape[1]), dtype=np.float64)
    np.add.at(sums, indices, vectors)
    return counts, sums


# ---------------------------------------------------------------------------
# separable 'valid' filtering of a batch of 2-D planes (SSIM windows)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _filter_valid_nb(planes, kernel):
    p, h, w = planes.shape
    r = kernel.shape[0]
    ho = h - r + 1
    wo = w - r + 1
    tmp = np.zeros((p, h, wo), dtype=np.float64)
    for q in range(p):
        for y in range(h):
            for x in range(wo):
                acc = 0.0
                for t in range(r):
                    acc += kernel[t] * planes[q, y, x + t]
                tmp[q, y, x] = acc
    out = np.zeros((p, ho, wo), dtype=np.float64)
    for q in range(p):
        for y in range(ho):
            for x in range(wo):
                acc = 0.0
                for t in range(r):
                    acc += kernel[t] * tmp[q, y + t, x]
                out[q, y, x] = acc
    return out


def filter_valid_numba(planes: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    planes = np.ascontiguousarray(planes, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    return _filter_valid_nb(planes, kernel)


def filter_valid_numpy(planes: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    planes = np.asarray(planes, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    win = np.lib.stride_tricks.sliding_window_view(planes, kernel.shape[0], axis=2)
    tmp = win @ kernel
    win = np.lib.stride_tricks.sliding_window_view(tmp, kernel.shape[0], axis=1)
    return win @ kernel


# ---------------------------------------------------------------------------
# separable resampling with precomputed tap tables (bicubic resize)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _resample_nb(planes, rows_idx, rows_w, cols_idx, cols_w):
    p, _, w = planes.shape
    ho, taps_r = rows_idx.shape
    wo, taps_c = cols_idx.shape
    tmp = np.zeros((p, ho, w), dtype=np.float64)
    for q in range(p):
        for y in range(ho):
            for t in range(taps_r):
                src = rows_idx[y, t]
                wt = rows_w[y, t]
                for x in range(w):
                    tmp[q, y, x] += wt * planes[q, src, x]
    out = np.zeros((p, ho, wo), dtype=np.float64)
    for q in range(p):
        for y in range(ho):
            for x in range(wo):
                acc = 0.0
                for t in range(taps_c):
                    acc += cols_w[x, t] * tmp[q, y, cols_idx[x, t]]
                out[q, y, x] = acc
    return out


def resample_numba(planes, rows_idx, rows_w, cols_idx, cols_w) -> np.ndarray:
    return _resample_nb(
        np.ascontiguousarray(planes, dtype=np.float64),
        np.ascontiguousarray(rows_idx, dtype=np.int64),
        np.ascontiguousarray(rows_w, dtype=np.float64),
        np.ascontiguousarray(cols_idx, dtype=np.int64),
        np.ascontiguousarray(cols_w, dtype=np.float64),
    )


def _dense_taps(idx: np.ndarray, wts: np.ndarray, n_src: int) -> np.ndarray:
    mat = np.zeros((idx.shape[0], n_src), dtype=np.float64)
    rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
    np.add.at(mat, (rows, idx.ravel()), wts.ravel())
    return mat


def resample_numpy(planes, rows_idx, rows_w, cols_idx, cols_w) -> np.ndarray:
    planes = np.asarray(planes, dtype=np.float64)
    rmat = _dense_taps(np.asarray(rows_idx), np.asarray(rows_w), planes.shape[1])
    cmat = _dense_taps(np.asarray(cols_idx), np.asarray(cols_w), planes.shape[2])
    return np.einsum("yi,pij,xj->pyx", rmat, planes, cmat, optimize=True)


if USE_NUMBA:
    nearest_codeword = nearest_codeword_numba
    assignment_stats = assignment_stats_numba
    filter_valid = filter_valid_numba
    resample = resample_numba
else:
    nearest_codeword = nearest_codeword_numpy
    assignment_stats = assignment_stats_numpy
    filter_valid = filter_valid_numpy
    resample = resample_numpy
