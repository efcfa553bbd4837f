"""Hot loops, backed by the compiled extension when it is importable.

Set ``TIEDGNN_PURE_PYTHON=1`` to force the fallback implementations.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("TIEDGNN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on the build
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def segment_sum(values: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of a 2-D array into ``n`` buckets given by ``ids``."""
    return _impl.segment_sum(
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(ids, dtype=np.int64),
        int(n),
    )


def segment_max(values: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    """Row-bucketed maximum; empty buckets hold ``-inf``."""
    return _impl.segment_max(
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(ids, dtype=np.int64),
        int(n),
    )


def pair_counts(items: np.ndarray, offsets: np.ndarray, epsilon: int):
    """Aggregate ordered co-occurrences within ``epsilon`` positions.

    ``items`` holds all sessions back to back, ``offsets`` the CSR bounds.
    Returns ``(src, dst, distance, count)`` sorted lexicographically.
    """
    return _impl.pair_counts(
        np.ascontiguousarray(items, dtype=np.int64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        int(epsilon),
    )


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _i64(x):
    return np.ascontiguousarray(x, dtype=np.int64)


def edge_logits(A, src, w, pidx, u, ptab, q, slope: float) -> np.ndarray:
    """``q . leaky_relu(A[src] + w * u + ptab[pidx])`` per edge and factor.

    ``A`` is ``[R, K, D]``; the result is ``[E, K]``.
    """
    return _impl.edge_logits(_f64(A), _i64(src), _f64(w), _i64(pidx), _f64(u), _f64(ptab), _f64(q), float(slope))


def edge_logits_backward(g, A, src, w, pidx, u, ptab, q, slope: float):
    """Gradients of :func:`edge_logits` w.r.t. ``A``, ``u``, ``ptab`` and ``q``."""
    return _impl.edge_logits_backward(
        _f64(g), _f64(A), _i64(src), _f64(w), _i64(pidx), _f64(u), _f64(ptab), _f64(q), float(slope)
    )


def weighted_gather_sum(theta, X, src, dst, n: int) -> np.ndarray:
    """``out[dst[e], k] += theta[e, k] * X[src[e], k]`` for ``X`` of shape ``[R, K, F]``."""
    return _impl.weighted_gather_sum(_f64(theta), _f64(X), _i64(src), _i64(dst), int(n))


def weighted_gather_sum_backward(g, theta, X, src, dst):
    return _impl.weighted_gather_sum_backward(_f64(g), _f64(theta), _f64(X), _i64(src), _i64(dst))
