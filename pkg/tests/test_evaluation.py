import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tiedgnn.config import TrainConfig
from tiedgnn.dataset import ItemVocab, LabeledInstance
from tiedgnn.evaluation import (
    EvaluationError,
    evaluate,
    evaluate_model,
    metrics_at_k,
    model_ranks,
    popularity_baseline,
    popularity_scores,
    rank_of_target,
    ranks_from_scores,
    write_metrics,
)
from tiedgnn.model import TIEDGNN
from tiedgnn.numerics import save_checkpoint
from tiedgnn.training import _model_meta


def eval_config(**kw):
    base = dict(d=8, K=2, L=1, epsilon=2, max_neighbors=4, dropout=0.0)
    base.update(kw)
    return TrainConfig(**base)


class TestRank:
    def test_unique_max(self):
        assert rank_of_target([0.1, 0.9, 0.3], 1) == 1

    def test_uniform_loses_ties(self):
        assert rank_of_target([0.25] * 4, 2) == 4

    def test_third_highest(self):
        assert rank_of_target([5.0, 1.0, 3.0, 4.0], 2) == 3

    def test_target_out_of_range(self):
        with pytest.raises(EvaluationError):
            rank_of_target([1.0, 2.0], 2)

    def test_non_finite(self):
        with pytest.raises(EvaluationError):
            rank_of_target([1.0, np.nan], 0)

    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=30), st.data())
    def test_batched_matches_single(self, row, data):
        t = data.draw(st.integers(0, len(row) - 1))
        scores = np.array([row, row[::-1]], dtype=float)
        ranks = ranks_from_scores(scores, [t, t])
        assert ranks.tolist() == [rank_of_target(scores[0], t), rank_of_target(scores[1], t)]

    # integer-valued scores keep these transforms strictly monotone after float rounding
    @given(st.lists(st.integers(-40, 40), min_size=2, max_size=30), st.data())
    def test_monotone_transform_invariance(self, row, data):
        t = data.draw(st.integers(0, len(row) - 1))
        scores = np.array(row, dtype=float)
        for f in (lambda x: np.exp(x / 4), lambda x: 3.0 * x - 7.0, lambda x: x**3, lambda x: np.tanh(x / 40)):
            assert rank_of_target(f(scores), t) == rank_of_target(scores, t)


class TestMetrics:
    def test_single_hit(self):
        r = metrics_at_k([1])
        assert (r.p_at_k, r.mrr_at_k, r.num_instances) == (1.0, 1.0, 1)

    def test_outside_cutoff(self):
        r = metrics_at_k([21])
        assert (r.p_at_k, r.mrr_at_k) == (0.0, 0.0)

    def test_mixed(self):
        r = metrics_at_k([1, 4, 25], k=20)
        assert r.p_at_k == pytest.approx(2 / 3, abs=1e-12)
        assert r.mrr_at_k == pytest.approx(1.25 / 3, abs=1e-12)

    def test_errors(self):
        with pytest.raises(EvaluationError):
            metrics_at_k([])
        with pytest.raises(EvaluationError):
            metrics_at_k([0, 1])
        with pytest.raises(EvaluationError):
            metrics_at_k([1], k=0)

    @given(st.lists(st.integers(1, 60), min_size=1, max_size=50), st.integers(1, 40))
    def test_bounds_and_order(self, ranks, k):
        r = metrics_at_k(ranks, k)
        assert 0.0 <= r.mrr_at_k <= r.p_at_k <= 1.0

    def test_k_equals_n_hits_everything(self, rng):
        scores = rng.normal(size=(30, 12))
        ranks = ranks_from_scores(scores, rng.integers(0, 12, size=30))
        assert metrics_at_k(ranks, k=12).p_at_k == 1.0

    def test_write_metrics(self, tmp_path):
        write_metrics(tmp_path / "m.json", metrics_at_k([1, 4, 25]), "abc")
        rec = json.loads((tmp_path / "m.json").read_text())
        assert rec["k"] == 20 and rec["n"] == 3 and rec["checkpoint_hash"] == "abc"
        assert rec["p_at_k"] == pytest.approx(2 / 3)


class TestPopularity:
    def test_counts(self):
        assert popularity_scores([[0, 1, 1], [2, 1]], 4).tolist() == [1.0, 3.0, 1.0, 0.0]

    def test_baseline_ranks(self):
        insts = [LabeledInstance((0,), 1), LabeledInstance((1,), 0)]
        r = popularity_baseline([[0, 1, 1], [2, 1]], insts, 4, k=1)
        # item 1 is the most frequent; item 0 ties with item 2 and loses the tie
        assert r.p_at_k == 0.5 and r.mrr_at_k == 0.5


class TestModelEvaluation:
    def test_random_model_near_uniform(self, planted_small):
        bundle, graph = planted_small
        n = bundle.vocab.size
        hits = [
            evaluate_model(TIEDGNN(eval_config(), n, seed=s), graph, bundle.test, k=20).p_at_k for s in range(5)
        ]
        # a random model ranks the target uniformly, so P@20 is about 20/N
        assert abs(np.mean(hits) - 20 / n) < 0.08

    def test_k_equals_n(self, planted_small):
        bundle, graph = planted_small
        model = TIEDGNN(eval_config(), bundle.vocab.size, seed=0)
        assert evaluate_model(model, graph, bundle.test, k=bundle.vocab.size).p_at_k == 1.0

    def test_batch_size_does_not_matter(self, planted_small):
        bundle, graph = planted_small
        model = TIEDGNN(eval_config(), bundle.vocab.size, seed=1)
        a = model_ranks(model, graph, bundle.test[:40], batch_size=7)
        b = model_ranks(model, graph, bundle.test[:40], batch_size=40)
        assert a.tolist() == b.tolist()

    def test_empty_instances(self, planted_small):
        bundle, graph = planted_small
        with pytest.raises(EvaluationError):
            evaluate_model(TIEDGNN(eval_config(), bundle.vocab.size, seed=0), graph, [])

    def test_checkpoint_roundtrip_and_vocab_check(self, tmp_path, planted_small):
        bundle, graph = planted_small
        model = TIEDGNN(eval_config(), bundle.vocab.size, seed=3)
        path = tmp_path / "best.ckpt"
        save_checkpoint(path, model.state_dict(), _model_meta(model, bundle.vocab, graph, 0))
        first = evaluate(path, bundle, graph)
        assert first == evaluate(path, bundle, graph)
        assert first == evaluate_model(model, graph, bundle.test)

        renamed = ItemVocab([f"x{i}" for i in range(bundle.vocab.size)])
        other = type(bundle)(renamed, bundle.train, bundle.valid, bundle.test, bundle.train_sessions, bundle.sessions_hash)
        with pytest.raises(EvaluationError, match="vocabulary"):
            evaluate(path, other, graph)
