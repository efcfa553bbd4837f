"""Compare the compiled kernels against the numpy/pure-Python fallbacks.

Run with ``python3 benchmarks/bench_kernels.py``. Workload sizes mirror one
training batch on the synthetic corpus (about 150k neighbor edges).
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from tiedgnn import _kernels_py

try:
    from tiedgnn import _kernels as compiled
except ImportError:  # pragma: no cover
    compiled = None


def workloads(rng: np.random.Generator, edges: int, rows: int, K: int, D: int):
    src = rng.integers(rows, size=edges)
    dst = np.sort(rng.integers(rows // 10, size=edges))
    A = rng.normal(size=(rows, K, D))
    w = rng.integers(1, 6, size=edges).astype(np.float64)
    pidx = rng.integers(3, size=edges)
    u, q = rng.normal(size=D), rng.normal(size=D)
    ptab = rng.normal(size=(3, D))
    g = rng.normal(size=(edges, K))
    theta = rng.random((edges, K))
    X = rng.normal(size=(rows, K, D - 1))
    gout = rng.normal(size=(rows // 10, K, D - 1))
    vals = rng.normal(size=(edges, K * D))
    sessions = [rng.integers(50, size=rng.integers(3, 9)) for _ in range(2000)]
    offsets = np.zeros(len(sessions) + 1, dtype=np.int64)
    np.cumsum([len(s) for s in sessions], out=offsets[1:])
    flat = np.concatenate(sessions).astype(np.int64)
    return {
        "segment_sum": lambda m: m.segment_sum(vals, src, rows),
        "segment_max": lambda m: m.segment_max(vals, src, rows),
        "pair_counts": lambda m: m.pair_counts(flat, offsets, 3),
        "edge_logits": lambda m: m.edge_logits(A, src, w, pidx, u, ptab, q, 0.2),
        "edge_logits_backward": lambda m: m.edge_logits_backward(g, A, src, w, pidx, u, ptab, q, 0.2),
        "weighted_gather_sum": lambda m: m.weighted_gather_sum(theta, X, src, dst, rows // 10),
        "weighted_gather_sum_backward": lambda m: m.weighted_gather_sum_backward(gout, theta, X, src, dst),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--edges", type=int, default=150_000)
    ap.add_argument("--rows", type=int, default=5_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    jobs = workloads(np.random.default_rng(0), args.edges, args.rows, K=2, D=33)
    print(f"{'kernel':30s} {'fallback ms':>12s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, job in jobs.items():
        slow = min(timeit.repeat(lambda: job(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:30s} {slow:12.2f} {'n/a':>12s}")
            continue
        fast = min(timeit.repeat(lambda: job(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:30s} {slow:12.2f} {fast:12.2f} {slow / fast:7.1f}x")


if __name__ == "__main__":
    main()
