"""Session graphs and the position-aware global item graph."""

from __future__ import annotations

import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels

IO_POS = 0
GRAPH_FORMAT = "tiedgnn-global-graph"
GRAPH_VERSION = 1


class GraphError(ValueError):
    pass


class EdgeKind(IntEnum):
    IN = 0
    OUT = 1
    INOUT = 2
    SELF = 3


class GlobalNeighbor(NamedTuple):
    item: int
    kind: EdgeKind
    weight: int
    mu: int


@dataclass
class SessionGraph:
    """Deduplicated session nodes with typed edges between node positions.

    ``edges`` holds one record per related pair: ``(a, b, OUT)`` when only
    ``a -> b`` occurs, ``(a, b, INOUT)`` with ``a < b`` when both directions
    occur, and ``(u, u, SELF)`` for every node.
    """

    nodes: list[int]
    alias: list[int]
    edges: list[tuple[int, int, EdgeKind]]

    def neighbor_view(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(center, neighbor, kind)`` rows as seen from each center node."""
        rows = []
        for a, b, kind in self.edges:
            if kind == EdgeKind.SELF:
                rows.append((a, a, EdgeKind.SELF))
            elif kind == EdgeKind.INOUT:
                rows.append((a, b, EdgeKind.INOUT))
                rows.append((b, a, EdgeKind.INOUT))
            else:
                rows.append((a, b, EdgeKind.OUT))
                rows.append((b, a, EdgeKind.IN))
        rows.sort()
        arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
        return arr[:, 0], arr[:, 1], arr[:, 2]


def build_session_graph(session: Sequence[int]) -> SessionGraph:
    if len(session) == 0:
        raise GraphError("cannot build a graph for an empty session")
    nodes: list[int] = []
    where: dict[int, int] = {}
    alias = []
    for item in session:
        if item not in where:
            where[item] = len(nodes)
            nodes.append(int(item))
        alias.append(where[item])
    adjacent = {(a, b) for a, b in zip(alias, alias[1:]) if a != b}
    edges: list[tuple[int, int, EdgeKind]] = []
    for a, b in sorted(adjacent):
        if (b, a) in adjacent:
            if a < b:
                edges.append((a, b, EdgeKind.INOUT))
        else:
            edges.append((a, b, EdgeKind.OUT))
    edges.extend((u, u, EdgeKind.SELF) for u in range(len(nodes)))
    return SessionGraph(nodes, alias, edges)


# global graph -------------------------------------------------------------


@dataclass
class GlobalGraph:
    epsilon: int
    num_items: int
    max_neighbors: int
    in_nbrs: list[list[GlobalNeighbor]]
    out_nbrs: list[list[GlobalNeighbor]]
    io_nbrs: list[list[GlobalNeighbor]]
    corpus_hash: str = ""
    _csr: tuple | None = field(default=None, init=False, repr=False, compare=False)

    def neighbors(self, item: int) -> tuple[list[GlobalNeighbor], list[GlobalNeighbor], list[GlobalNeighbor]]:
        if not 0 <= item < self.num_items:
            return [], [], []
        return self.in_nbrs[item], self.out_nbrs[item], self.io_nbrs[item]

    def pair_table(self) -> dict[tuple[int, int], tuple[EdgeKind, int, int]]:
        table = {}
        for i in range(self.num_items):
            for nb in (*self.in_nbrs[i], *self.out_nbrs[i], *self.io_nbrs[i]):
                if (i, nb.item) in table:
                    raise GraphError(f"item {nb.item} listed twice for item {i}")
                table[(i, nb.item)] = (nb.kind, nb.weight, nb.mu)
        return table

    def csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``(indptr, item, kind, weight, mu)`` with each item's in, out, io rows in order."""
        if self._csr is None:
            indptr = np.zeros(self.num_items + 1, dtype=np.int64)
            cols: list[GlobalNeighbor] = []
            for i in range(self.num_items):
                cols.extend(self.in_nbrs[i])
                cols.extend(self.out_nbrs[i])
                cols.extend(self.io_nbrs[i])
                indptr[i + 1] = len(cols)
            arr = np.array([(n.item, n.kind, n.weight, n.mu) for n in cols], dtype=np.int64).reshape(-1, 4)
            self._csr = (indptr, arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].astype(np.float64), arr[:, 3].copy())
        return self._csr


def sessions_hash(sessions: Sequence[Sequence[int]]) -> str:
    """Hash of the sessions as serialised into a bundle's train_sessions.jsonl."""
    h = hashlib.sha256()
    for s in sessions:
        h.update((json.dumps(list(map(int, s)), separators=(",", ":")) + "\n").encode("utf-8"))
    return h.hexdigest()


def _rank(nbrs: list[GlobalNeighbor], cap: int) -> list[GlobalNeighbor]:
    nbrs.sort(key=lambda n: (-n.weight, n.item))
    return nbrs[:cap]


def build_global_graph(
    sessions: Sequence[Sequence[int]],
    epsilon: int,
    max_neighbors: int,
    num_items: int | None = None,
) -> GlobalGraph:
    """Typed, weighted neighbor lists from co-occurrences within ``epsilon``.

    A neighbor seen both before and after an item anywhere in the corpus is
    an in-out neighbor whose weight adds both directions. Otherwise ``mu``
    is the most frequent distance, ties going to the smaller distance.
    Each (item, kind) list keeps its ``max_neighbors`` heaviest entries.
    """
    if epsilon < 1:
        raise GraphError(f"epsilon must be >= 1, got {epsilon}")
    if max_neighbors < 1:
        raise GraphError(f"max_neighbors must be >= 1, got {max_neighbors}")
    sessions = [list(map(int, s)) for s in sessions]
    if num_items is None:
        num_items = 1 + max((max(s) for s in sessions if s), default=-1)
    lengths = [len(s) for s in sessions]
    offsets = np.zeros(len(sessions) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    flat = np.fromiter((x for s in sessions for x in s), dtype=np.int64, count=int(offsets[-1]))
    if flat.size and (flat.min() < 0 or flat.max() >= num_items):
        raise GraphError("session item index out of range")

    src, dst, dist, cnt = kernels.pair_counts(flat, offsets, epsilon)
    directed: dict[tuple[int, int], tuple[int, int]] = {}
    if src.size:
        key = src * num_items + dst
        starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        weights = np.add.reduceat(cnt, starts)
        # most frequent distance, smaller distance on ties
        order = np.lexsort((dist, -cnt, key))
        k_sorted = key[order]
        first = order[np.r_[True, k_sorted[1:] != k_sorted[:-1]]]
        for a, b, w, mu in zip(src[starts].tolist(), dst[starts].tolist(), weights.tolist(), dist[first].tolist()):
            directed[(a, b)] = (w, mu)

    in_n: list[list[GlobalNeighbor]] = [[] for _ in range(num_items)]
    out_n: list[list[GlobalNeighbor]] = [[] for _ in range(num_items)]
    io_n: list[list[GlobalNeighbor]] = [[] for _ in range(num_items)]
    for (a, b), (w, mu) in directed.items():
        back = directed.get((b, a))
        if back is not None:
            if a < b:
                total = w + back[0]
                io_n[a].append(GlobalNeighbor(b, EdgeKind.INOUT, total, IO_POS))
                io_n[b].append(GlobalNeighbor(a, EdgeKind.INOUT, total, IO_POS))
        else:
            out_n[a].append(GlobalNeighbor(b, EdgeKind.OUT, w, mu))
            in_n[b].append(GlobalNeighbor(a, EdgeKind.IN, w, mu))
    for lists in (in_n, out_n, io_n):
        for i in range(num_items):
            lists[i] = _rank(lists[i], max_neighbors)
    return GlobalGraph(epsilon, num_items, max_neighbors, in_n, out_n, io_n, sessions_hash(sessions))


def sample_neighbors(graph: GlobalGraph, item: int, max_n: int, seed=None):
    """Top-``max_n`` neighbors per kind by weight; ``seed`` only breaks ties."""
    rng = np.random.default_rng(seed) if seed is not None else None
    picked = []
    for nbrs in graph.neighbors(item):
        if len(nbrs) <= max_n:
            picked.append(list(nbrs))
            continue
        w = np.array([n.weight for n in nbrs])
        tie = rng.random(len(nbrs)) if rng is not None else np.array([n.item for n in nbrs])
        order = np.lexsort((tie, -w))[:max_n]
        picked.append([nbrs[i] for i in order])
    return tuple(picked)


# test oracle ---------------------------------------------------------------


def brute_force_global_oracle(sessions: Sequence[Sequence[int]], epsilon: int) -> list[tuple[int, int, str, int]]:
    """Every ``(i, j, direction, distance)`` within ``epsilon``, self pairs included.

    ``fwd`` means ``j`` follows ``i``; each fwd tuple has a mirrored ``bwd`` one.
    """
    table = []
    for s in sessions:
        for t in range(len(s)):
            for d in range(1, epsilon + 1):
                if t + d < len(s):
                    table.append((s[t], s[t + d], "fwd", d))
                    table.append((s[t + d], s[t], "bwd", d))
    return table


def oracle_neighbor_table(tuples) -> dict[tuple[int, int], tuple[EdgeKind, int, int]]:
    """Untruncated ``(kind, weight, mu)`` per ordered pair, derived from oracle tuples."""
    after: dict[tuple[int, int], list[int]] = defaultdict(list)
    before: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, j, direction, d in tuples:
        if i == j:
            continue
        (after if direction == "fwd" else before)[(i, j)].append(d)

    def modal(ds):
        c = Counter(ds)
        best = max(c.values())
        return min(d for d, n in c.items() if n == best)

    table = {}
    for pair in set(after) | set(before):
        a, b = after.get(pair, []), before.get(pair, [])
        if a and b:
            table[pair] = (EdgeKind.INOUT, len(a) + len(b), IO_POS)
        elif a:
            table[pair] = (EdgeKind.OUT, len(a), modal(a))
        else:
            table[pair] = (EdgeKind.IN, len(b), modal(b))
    return table


# serialisation -------------------------------------------------------------


def save_graph(graph: GlobalGraph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "epsilon": graph.epsilon,
            "num_items": graph.num_items,
            "max_neighbors": graph.max_neighbors,
            "corpus_hash": graph.corpus_hash,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(graph.num_items):
            rec = {
                "item": i,
                "in": [[n.item, n.weight, n.mu] for n in graph.in_nbrs[i]],
                "out": [[n.item, n.weight, n.mu] for n in graph.out_nbrs[i]],
                "io": [[n.item, n.weight] for n in graph.io_nbrs[i]],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_graph(path) -> GlobalGraph:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != GRAPH_FORMAT or header.get("version") != GRAPH_VERSION:
                raise GraphError(f"{path}: not a version-{GRAPH_VERSION} graph file")
            n = int(header["num_items"])
            in_n: list[list[GlobalNeighbor]] = [[] for _ in range(n)]
            out_n: list[list[GlobalNeighbor]] = [[] for _ in range(n)]
            io_n: list[list[GlobalNeighbor]] = [[] for _ in range(n)]
            eps = int(header["epsilon"])
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                i = rec["item"]
                in_n[i] = [GlobalNeighbor(j, EdgeKind.IN, w, mu) for j, w, mu in rec["in"]]
                out_n[i] = [GlobalNeighbor(j, EdgeKind.OUT, w, mu) for j, w, mu in rec["out"]]
                io_n[i] = [GlobalNeighbor(j, EdgeKind.INOUT, w, IO_POS) for j, w in rec["io"]]
                for nb in in_n[i] + out_n[i]:
                    if not 1 <= nb.mu <= eps:
                        raise GraphError(f"{path}: item {i} neighbor {nb.item} has mu={nb.mu} outside [1, {eps}]")
    except (OSError, ValueError, KeyError, IndexError, TypeError) as exc:
        if isinstance(exc, GraphError):
            raise
        raise GraphError(f"cannot read graph {path}: {exc}") from exc
    return GlobalGraph(eps, n, int(header["max_neighbors"]), in_n, out_n, io_n, header.get("corpus_hash", ""))
