import numpy as np
import pytest

from tiedgnn.config import TrainConfig
from tiedgnn.dataset import Bundle
from tiedgnn.graphs import build_global_graph
from tiedgnn.numerics import CheckpointError, ConfigError, lr_at
from tiedgnn.training import EpochRecord, Trainer, TrainingError, epoch_batches, load_model, resume, train


@pytest.fixture
def tiny(planted_small):
    bundle, graph = planted_small
    small = Bundle(bundle.vocab, bundle.train[:48], bundle.valid[:16], bundle.test[:16], bundle.train_sessions, bundle.sessions_hash)
    return small, graph


def cfg(**kw):
    base = dict(d=8, K=2, L=1, epsilon=2, max_neighbors=4, dropout=0.1, batch_size=16, max_epochs=3, base_lr=1e-2, patience=5)
    base.update(kw)
    return TrainConfig(**base)


class TestBatches:
    def test_partition(self):
        batches = epoch_batches(53, 10, seed=1, epoch=2)
        assert [len(b) for b in batches] == [10, 10, 10, 10, 10, 3]
        assert sorted(np.concatenate(batches).tolist()) == list(range(53))

    def test_reshuffled_per_epoch(self):
        a = np.concatenate(epoch_batches(40, 8, 0, 0))
        b = np.concatenate(epoch_batches(40, 8, 0, 1))
        assert a.tolist() != b.tolist()
        assert a.tolist() == np.concatenate(epoch_batches(40, 8, 0, 0)).tolist()


class TestFit:
    def test_loss_decreases(self, tiny):
        bundle, graph = tiny
        report = train(cfg(max_epochs=4), bundle, graph).report
        losses = [r.loss for r in report.epochs]
        assert losses[-1] < losses[0]
        assert all(np.isfinite(losses))

    def test_same_seed_same_run(self, tiny):
        bundle, graph = tiny
        a = train(cfg(max_epochs=2), bundle, graph)
        b = train(cfg(max_epochs=2), bundle, graph)
        assert a.report == b.report
        for k in a.final_state:
            np.testing.assert_array_equal(a.final_state[k], b.final_state[k])

    def test_seed_changes_run(self, tiny):
        bundle, graph = tiny
        a = train(cfg(max_epochs=1), bundle, graph).report
        b = train(cfg(max_epochs=1, seed=1), bundle, graph).report
        assert a.epochs[0].loss != b.epochs[0].loss

    def test_schedule_recorded(self, tiny):
        bundle, graph = tiny
        report = train(cfg(max_epochs=4, base_lr=1e-3, lr_every=2), bundle, graph).report
        assert [r.lr for r in report.epochs] == [lr_at(e, 1e-3, 0.1, 2) for e in range(4)]

    def test_zero_lr_stops_on_patience(self, tiny):
        bundle, graph = tiny
        result = train(cfg(base_lr=0.0, patience=1, max_epochs=10), bundle, graph)
        assert len(result.report.epochs) == 2
        assert result.report.stopped_early and result.report.best_epoch == 0

    def test_best_model_is_returned(self, tiny, tmp_path):
        bundle, graph = tiny
        result = train(cfg(max_epochs=3), bundle, graph, out_dir=tmp_path)
        loaded, meta = load_model(result.best_path)
        assert meta["epoch"] == result.report.best_epoch
        for k, v in result.model.state_dict().items():
            np.testing.assert_array_equal(loaded.params[k].data, v)
            assert np.all(np.isfinite(v))

    def test_no_validation_keeps_last(self, tiny):
        bundle, graph = tiny
        no_valid = Bundle(bundle.vocab, bundle.train, [], bundle.test, bundle.train_sessions, bundle.sessions_hash)
        result = train(cfg(max_epochs=2), no_valid, graph)
        assert result.report.best_epoch == 1
        assert result.report.epochs[0].p20 is None
        for k, v in result.final_state.items():
            np.testing.assert_array_equal(result.model.params[k].data, v)

    def test_progress_lines(self, tiny):
        bundle, graph = tiny
        lines = []
        train(cfg(max_epochs=1), bundle, graph, progress=lines.append)
        assert len(lines) == 1 and lines[0].startswith("epoch=0 loss=")

    def test_progress_line_format(self):
        line = EpochRecord(2, 1.5, None, 0.25, 1e-4).progress_line()
        assert line == "epoch=2 loss=1.500000 p20=nan mrr20=0.2500 lr=0.0001"

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts(self, tiny):
        bundle, graph = tiny
        trainer = Trainer(cfg(), bundle, graph)
        trainer.model.params["item_table"].data[0, 0] = np.nan
        with pytest.raises(TrainingError, match="instance ids"):
            trainer.fit(1)


class TestInputChecks:
    def test_graph_from_other_sessions(self, tiny):
        bundle, _ = tiny
        other = build_global_graph([[0, 1]], 2, 4, num_items=bundle.vocab.size)
        with pytest.raises(ConfigError, match="different training sessions"):
            Trainer(cfg(), bundle, other)

    def test_epsilon_mismatch(self, tiny):
        bundle, graph = tiny
        with pytest.raises(ConfigError, match="epsilon"):
            Trainer(cfg(epsilon=3), bundle, graph)

    def test_empty_train(self, tiny):
        bundle, graph = tiny
        empty = Bundle(bundle.vocab, [], bundle.valid, bundle.test, bundle.train_sessions, bundle.sessions_hash)
        with pytest.raises(ConfigError):
            Trainer(cfg(), empty, graph)


class TestResume:
    def test_two_plus_one_equals_three(self, tiny, tmp_path):
        bundle, graph = tiny
        full = train(cfg(max_epochs=3), bundle, graph, out_dir=tmp_path / "full")
        train(cfg(max_epochs=2), bundle, graph, out_dir=tmp_path / "part")
        resumed = resume(tmp_path / "part" / "last.ckpt", bundle, graph, cfg(max_epochs=3))
        assert resumed.report == full.report
        for k in full.final_state:
            np.testing.assert_array_equal(resumed.final_state[k], full.final_state[k])
        for name in ("best.ckpt", "last.ckpt", "report.json"):
            assert (tmp_path / "part" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()

    def test_resume_uses_saved_config(self, tiny, tmp_path):
        bundle, graph = tiny
        train(cfg(max_epochs=1), bundle, graph, out_dir=tmp_path)
        result = resume(tmp_path / "last.ckpt", bundle, graph, max_epochs=2)
        assert [r.epoch for r in result.report.epochs] == [0, 1]

    def test_changed_setting_rejected(self, tiny, tmp_path):
        bundle, graph = tiny
        train(cfg(max_epochs=1), bundle, graph, out_dir=tmp_path)
        with pytest.raises(ConfigError, match="changed settings: d$"):
            Trainer.resume(tmp_path / "last.ckpt", bundle, graph, cfg(d=12))

    def test_best_checkpoint_cannot_resume(self, tiny, tmp_path):
        bundle, graph = tiny
        train(cfg(max_epochs=1), bundle, graph, out_dir=tmp_path)
        with pytest.raises(CheckpointError):
            Trainer.resume(tmp_path / "best.ckpt", bundle, graph)

    def test_corrupt_checkpoint(self, tiny, tmp_path):
        bundle, graph = tiny
        train(cfg(max_epochs=1), bundle, graph, out_dir=tmp_path)
        path = tmp_path / "last.ckpt"
        raw = bytearray(path.read_bytes())
        raw[-10] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            Trainer.resume(path, bundle, graph)
