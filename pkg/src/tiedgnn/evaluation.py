"""Ranking metrics and the batch evaluation protocol."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LabeledInstance


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MetricResult:
    p_at_k: float
    mrr_at_k: float
    k: int
    num_instances: int

    def to_dict(self) -> dict:
        return asdict(self)


def rank_of_target(scores, target: int) -> int:
    """1-based rank of ``target``; items tied with it are ranked ahead of it."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= target < len(scores):
        raise EvaluationError(f"target {target} outside [0, {len(scores)})")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores must be finite")
    return int(np.count_nonzero(scores >= scores[target]))


def ranks_from_scores(scores: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """Row-wise :func:`rank_of_target` for a ``[B, N]`` score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if scores.ndim != 2 or len(targets) != scores.shape[0]:
        raise EvaluationError(f"scores {scores.shape} do not match {len(targets)} targets")
    if np.any((targets < 0) | (targets >= scores.shape[1])):
        raise EvaluationError("target index out of range")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores must be finite")
    own = scores[np.arange(len(targets)), targets]
    return np.count_nonzero(scores >= own[:, None], axis=1).astype(np.int64)


def metrics_at_k(ranks: Sequence[int], k: int = 20) -> MetricResult:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise EvaluationError("no ranks to score")
    if np.any(ranks < 1):
        raise EvaluationError("ranks are 1-based")
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    hit = ranks <= k
    p = float(np.mean(hit))
    mrr = float(np.mean(np.where(hit, 1.0 / ranks, 0.0)))
    return MetricResult(p, mrr, int(k), int(ranks.size))


def model_ranks(model, graph, instances: Sequence[LabeledInstance], batch_size: int = 100) -> np.ndarray:
    """Ranks of every instance label under the model in inference mode."""
    out = []
    for lo in range(0, len(instances), batch_size):
        chunk = instances[lo : lo + batch_size]
        logits = model.scores([inst.prefix for inst in chunk], graph)
        out.append(ranks_from_scores(logits, [inst.label for inst in chunk]))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_model(model, graph, instances: Sequence[LabeledInstance], k: int = 20, batch_size: int = 100) -> MetricResult:
    if not instances:
        raise EvaluationError("no instances to evaluate")
    return metrics_at_k(model_ranks(model, graph, instances, batch_size), k)


def popularity_scores(sessions: Sequence[Sequence[int]], num_items: int) -> np.ndarray:
    """Item frequencies over the training sessions."""
    flat = np.fromiter((i for s in sessions for i in s), dtype=np.int64)
    return np.bincount(flat, minlength=num_items)[:num_items].astype(np.float64)


def popularity_baseline(
    sessions: Sequence[Sequence[int]], instances: Sequence[LabeledInstance], num_items: int, k: int = 20
) -> MetricResult:
    """Recommend the most frequent training items regardless of the prefix."""
    pop = popularity_scores(sessions, num_items)
    ranks = [rank_of_target(pop, inst.label) for inst in instances]
    return metrics_at_k(ranks, k)


def write_metrics(path, result: MetricResult, checkpoint_hash: str) -> None:
    rec = {
        "k": result.k,
        "p_at_k": result.p_at_k,
        "mrr_at_k": result.mrr_at_k,
        "n": result.num_instances,
        "checkpoint_hash": checkpoint_hash,
    }
    Path(path).write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def evaluate(checkpoint, bundle, graph, k: int = 20, split: str = "test") -> MetricResult:
    """Score a saved model on one split of a bundle."""
    from .training import load_model

    model, meta = load_model(checkpoint)
    if meta.get("vocab_digest") != bundle.vocab.digest():
        raise EvaluationError("checkpoint vocabulary does not match the bundle")
    if graph.num_items != model.num_items:
        raise EvaluationError(f"graph covers {graph.num_items} items, model {model.num_items}")
    return evaluate_model(model, graph, getattr(bundle, split), k)
