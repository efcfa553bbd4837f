"""Synthetic session corpora with a planted two-factor transition model."""

from __future__ import annotations

import numpy as np

from .dataset import RawEvent


def planted_markov_sessions(
    n_sessions: int = 2000,
    n_rows: int = 5,
    n_cols: int = 10,
    min_len: int = 3,
    max_len: int = 8,
    seed: int = 0,
) -> list[list[int]]:
    """Sessions over ``n_rows * n_cols`` items laid out on a grid.

    Item ``r * n_cols + c`` has factors ``(r, c)``. Each step changes one
    factor: the row moves by +1 or +2, or the column by +1 or +3 (all
    modular, each with probability 1/4). The chain is doubly stochastic,
    so item popularity is uniform and carries no signal.
    """
    rng = np.random.default_rng(seed)
    moves = ((1, 0), (2, 0), (0, 1), (0, 3))
    sessions = []
    for _ in range(n_sessions):
        n = int(rng.integers(min_len, max_len + 1))
        r, c = int(rng.integers(n_rows)), int(rng.integers(n_cols))
        seq = [r * n_cols + c]
        for step in rng.integers(len(moves), size=n - 1):
            dr, dc = moves[step]
            r, c = (r + dr) % n_rows, (c + dc) % n_cols
            seq.append(r * n_cols + c)
        sessions.append(seq)
    return sessions


def sessions_to_events(sessions: list[list[int]]) -> list[RawEvent]:
    """Events with one time unit per click and sessions laid end to end."""
    events = []
    clock = 0
    for sid, seq in enumerate(sessions):
        for item in seq:
            events.append(RawEvent(f"s{sid}", f"i{item}", clock))
            clock += 1
    return events


def planted_splits(n_sessions: int = 2000, seed: int = 0, tail_fraction: float = 0.2, **kwargs):
    """Planted corpus run through grouping and the chronological split."""
    from .dataset import group_events, make_splits

    corpus = group_events(sessions_to_events(planted_markov_sessions(n_sessions, seed=seed, **kwargs)))
    return make_splits(corpus, "tail_fraction", tail_fraction, seed=seed)
