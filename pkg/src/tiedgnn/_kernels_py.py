"""Fallback implementations of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

from collections import Counter

import numpy as np


def segment_sum(values: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, values.shape[1]), dtype=np.float64)
    np.add.at(out, ids, values)
    return out


def segment_max(values: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    out = np.full((n, values.shape[1]), -np.inf, dtype=np.float64)
    np.maximum.at(out, ids, values)
    return out


def pair_counts(items: np.ndarray, offsets: np.ndarray, epsilon: int):
    """Count ordered (src, dst, distance) co-occurrences, self pairs skipped.

    Returns four int64 arrays sorted by (src, dst, distance).
    """
    counts: Counter = Counter()
    seq = items.tolist()
    bounds = offsets.tolist()
    for start, stop in zip(bounds[:-1], bounds[1:]):
        for t in range(start, stop):
            a = seq[t]
            for d in range(1, epsilon + 1):
                if t + d >= stop:
                    break
                b = seq[t + d]
                if a != b:
                    counts[(a, b, d)] += 1
    keys = sorted(counts)
    src = np.array([k[0] for k in keys], dtype=np.int64)
    dst = np.array([k[1] for k in keys], dtype=np.int64)
    dist = np.array([k[2] for k in keys], dtype=np.int64)
    cnt = np.array([counts[k] for k in keys], dtype=np.int64)
    return src, dst, dist, cnt


def _edge_preact(A, src, w, pidx, u, ptab):
    return A[src] + w[:, None, None] * u + ptab[pidx][:, None, :]


def edge_logits(A, src, w, pidx, u, ptab, q, slope):
    z = _edge_preact(A, src, w, pidx, u, ptab)
    return np.where(z > 0, z, z * slope) @ q


def edge_logits_backward(g, A, src, w, pidx, u, ptab, q, slope):
    z = _edge_preact(A, src, w, pidx, u, ptab)
    scale = np.where(z > 0, 1.0, slope)
    dz = g[:, :, None] * q * scale
    E, K, D = dz.shape
    dA = segment_sum(dz.reshape(E, K * D), src, A.shape[0]).reshape(A.shape)
    du = np.einsum("e,ekd->d", w, dz)
    dp = segment_sum(dz.sum(axis=1), pidx, ptab.shape[0])
    dq = np.einsum("ek,ekd->d", g, z * scale)
    return dA, du, dp, dq


def weighted_gather_sum(theta, X, src, dst, n):
    E, K = theta.shape
    msg = theta[:, :, None] * X[src]
    return segment_sum(msg.reshape(E, K * X.shape[2]), dst, n).reshape((n,) + X.shape[1:])


def weighted_gather_sum_backward(g, theta, X, src, dst):
    ge = g[dst]
    dtheta = (ge * X[src]).sum(axis=-1)
    E, K = theta.shape
    dX = segment_sum((theta[:, :, None] * ge).reshape(E, K * X.shape[2]), src, X.shape[0]).reshape(X.shape)
    return dtheta, dX
