"""Mini-batch training with Adam, step decay, early stopping and exact resume."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig
from .dataset import Bundle, ItemVocab, LabeledInstance, Splits
from .evaluation import evaluate_model
from .graphs import GlobalGraph, sessions_hash
from .model import TIEDGNN
from .numerics import AdamState, CheckpointError, ConfigError, Tape, adam_step, load_checkpoint, lr_at, save_checkpoint
from .numerics.optim import global_grad_norm

log = logging.getLogger(__name__)

BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"
# fields that may change between the original run and a resumed one
_RESUMABLE_FIELDS = ("max_epochs", "patience")


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    p20: float | None
    mrr20: float | None
    lr: float
    wall_time: float = field(default=0.0, compare=False)

    def progress_line(self) -> str:
        def fmt(x):
            return "nan" if x is None else f"{x:.4f}"

        return f"epoch={self.epoch} loss={self.loss:.6f} p20={fmt(self.p20)} mrr20={fmt(self.mrr20)} lr={self.lr:.6g}"


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def to_dict(self, timing: bool = False) -> dict:
        rows = []
        for rec in self.epochs:
            row = asdict(rec)
            if not timing:
                row.pop("wall_time")
            rows.append(row)
        return {"epochs": rows, "best_epoch": self.best_epoch, "stopped_early": self.stopped_early}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls([EpochRecord(**r) for r in d["epochs"]], d["best_epoch"], d["stopped_early"])

    def save(self, path) -> None:
        """Write the deterministic part of the report; wall times go to a sibling timing file."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        self.save_timing(path.with_name("timing.json"))

    def save_timing(self, path) -> None:
        timing = {"wall_time": [rec.wall_time for rec in self.epochs]}
        Path(path).write_text(json.dumps(timing, indent=2) + "\n")

    def load_timing(self, path) -> None:
        """Restore wall times from a timing file when it covers every recorded epoch."""
        try:
            times = json.loads(Path(path).read_text())["wall_time"]
        except (OSError, ValueError, KeyError):
            return
        if len(times) >= len(self.epochs):
            for rec, t in zip(self.epochs, times):
                rec.wall_time = float(t)


@dataclass
class TrainResult:
    model: TIEDGNN
    report: TrainReport
    final_state: dict[str, np.ndarray]
    best_path: Path | None = None
    last_path: Path | None = None


def bundle_from_splits(splits: Splits) -> Bundle:
    """In-memory bundle, identical to what ``write_bundle`` + ``read_bundle`` yield."""
    return Bundle(splits.vocab, splits.train, splits.valid, splits.test, splits.train_sessions, sessions_hash(splits.train_sessions))


def _check_inputs(bundle: Bundle, graph: GlobalGraph) -> None:
    if graph.corpus_hash and graph.corpus_hash != bundle.sessions_hash:
        raise ConfigError("graph was built from different training sessions than this bundle")
    if graph.num_items != bundle.vocab.size:
        raise ConfigError(f"graph covers {graph.num_items} items, bundle vocabulary has {bundle.vocab.size}")
    if not bundle.train:
        raise ConfigError("bundle has no training instances")


def _model_meta(model: TIEDGNN, vocab: ItemVocab, graph: GlobalGraph, epoch: int) -> dict:
    return {
        "kind": "model",
        "config": model.config.to_dict(),
        "num_items": model.num_items,
        "vocab": list(vocab.reverse),
        "vocab_digest": vocab.digest(),
        "graph_hash": graph.corpus_hash,
        "epsilon": graph.epsilon,
        "epoch": epoch,
    }


def load_model(path) -> tuple[TIEDGNN, dict]:
    """Rebuild a model from a best or last checkpoint."""
    tensors, meta = load_checkpoint(path)
    try:
        config = TrainConfig.from_dict(meta["config"])
        model = TIEDGNN(config, int(meta["num_items"]), seed=0)
        model.load_state_dict({k: tensors[k] for k in model.params})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not describe a model: {exc}") from exc
    return model, meta


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into consecutive batches; the last may be short."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class Trainer:
    """Owns the model, the optimizer state and the early-stopping bookkeeping."""

    def __init__(self, config: TrainConfig, bundle: Bundle, graph: GlobalGraph, out_dir=None, progress: Callable[[str], None] | None = None):
        _check_inputs(bundle, graph)
        if graph.epsilon != config.epsilon:
            raise ConfigError(f"graph epsilon {graph.epsilon} differs from config epsilon {config.epsilon}")
        self.config = config
        self.bundle = bundle
        self.graph = graph
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.progress = progress
        self.model = TIEDGNN(config, bundle.vocab.size, seed=config.seed)
        self.adam = AdamState.for_params(self.model.param_list)
        self.next_epoch = 0
        self.best_mrr: float | None = None
        self.bad_epochs = 0
        self.report = TrainReport()
        self.best_state = self.model.state_dict()

    # persistence -----------------------------------------------------------

    def _save_best(self, epoch: int) -> None:
        self.best_state = self.model.state_dict()
        if self.out_dir is not None:
            meta = _model_meta(self.model, self.bundle.vocab, self.graph, epoch)
            save_checkpoint(self.out_dir / BEST_NAME, self.best_state, meta)

    def _save_last(self) -> None:
        if self.out_dir is None:
            return
        tensors = self.model.state_dict()
        for name, m, v in zip(self.model.params, self.adam.m, self.adam.v):
            tensors[f"adam/m/{name}"] = m
            tensors[f"adam/v/{name}"] = v
        meta = _model_meta(self.model, self.bundle.vocab, self.graph, self.next_epoch - 1)
        meta.update(
            kind="train_state",
            adam_t=self.adam.t,
            next_epoch=self.next_epoch,
            best_mrr=self.best_mrr,
            bad_epochs=self.bad_epochs,
            report=self.report.to_dict(),
        )
        save_checkpoint(self.out_dir / LAST_NAME, tensors, meta)
        # wall times stay out of the checkpoint so that its bytes are reproducible
        self.report.save_timing(self.out_dir / "timing.json")

    @classmethod
    def resume(cls, path, bundle: Bundle, graph: GlobalGraph, config: TrainConfig | None = None, out_dir=None, progress=None) -> "Trainer":
        """Restore parameters, optimizer moments, counters and history from ``last.ckpt``."""
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "train_state":
            raise CheckpointError(f"{path} holds no optimizer state; resume needs a {LAST_NAME} file")
        saved = TrainConfig.from_dict(meta["config"])
        if config is None:
            config = saved
        else:
            a = {k: v for k, v in config.to_dict().items() if k not in _RESUMABLE_FIELDS}
            b = {k: v for k, v in saved.to_dict().items() if k not in _RESUMABLE_FIELDS}
            changed = sorted(k for k in a if a[k] != b[k])
            if changed:
                raise ConfigError(f"cannot resume with changed settings: {', '.join(changed)}")
        if meta["vocab_digest"] != bundle.vocab.digest():
            raise ConfigError("checkpoint vocabulary does not match the bundle")
        trainer = cls(config, bundle, graph, out_dir=out_dir, progress=progress)
        model = trainer.model
        try:
            model.load_state_dict({k: tensors[k] for k in model.params})
            trainer.adam.m = [np.array(tensors[f"adam/m/{k}"]) for k in model.params]
            trainer.adam.v = [np.array(tensors[f"adam/v/{k}"]) for k in model.params]
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: incompatible checkpoint: {exc}") from exc
        trainer.adam.t = int(meta["adam_t"])
        trainer.next_epoch = int(meta["next_epoch"])
        trainer.best_mrr = meta["best_mrr"]
        trainer.bad_epochs = int(meta["bad_epochs"])
        trainer.report = TrainReport.from_dict(meta["report"])
        trainer.report.load_timing(Path(path).with_name("timing.json"))
        best = Path(path).with_name(BEST_NAME)
        if best.exists():
            best_tensors, _ = load_checkpoint(best)
            trainer.best_state = {k: best_tensors[k] for k in model.params}
        else:
            trainer.best_state = model.state_dict()
        return trainer

    # the loop --------------------------------------------------------------

    def _step(self, batch: Sequence[LabeledInstance], ids: np.ndarray, lr: float, rng: np.random.Generator) -> tuple[float, dict]:
        model = self.model
        with Tape() as tape:
            ctx = model.forward([inst.prefix for inst in batch], self.graph, rng)
            total, parts = model.loss(ctx, np.array([inst.label for inst in batch]), rng)
        value = total.item()
        tape.backward(total)
        grads = tape.gradients(model.param_list)
        if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
            norms = {name: float(np.linalg.norm(g)) for name, g in zip(model.params, grads)}
            raise TrainingError(
                f"non-finite loss {value} at lr={lr}; batch instance ids {ids.tolist()}; "
                f"loss parts {parts}; grad norms {norms}"
            )
        if lr > 0:
            adam_step(model.param_list, grads, self.adam, lr, weight_decay=self.config.weight_decay)
        parts["grad_norm"] = global_grad_norm(grads)
        return value, parts

    def run_epoch(self, epoch: int) -> EpochRecord:
        cfg = self.config
        start = time.perf_counter()
        lr = lr_at(epoch, cfg.base_lr, cfg.lr_decay, cfg.lr_every)
        train = self.bundle.train
        total, count = 0.0, 0
        for b, ids in enumerate(epoch_batches(len(train), cfg.batch_size, cfg.seed, epoch)):
            rng = np.random.default_rng([cfg.seed, epoch, b])
            value, _ = self._step([train[i] for i in ids], ids, lr, rng)
            total += value * len(ids)
            count += len(ids)
        p20 = mrr20 = None
        if self.bundle.valid:
            res = evaluate_model(self.model, self.graph, self.bundle.valid, k=20, batch_size=cfg.batch_size)
            p20, mrr20 = res.p_at_k, res.mrr_at_k
        return EpochRecord(epoch, total / count, p20, mrr20, lr, time.perf_counter() - start)

    def fit(self, max_epochs: int | None = None) -> TrainResult:
        cfg = self.config
        max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        while self.next_epoch < max_epochs and not self.report.stopped_early:
            epoch = self.next_epoch
            rec = self.run_epoch(epoch)
            self.report.epochs.append(rec)
            if self.progress is not None:
                self.progress(rec.progress_line())
            score = rec.mrr20
            # without validation data every epoch counts as the new best
            if score is None or self.best_mrr is None or score > self.best_mrr:
                self.best_mrr = score if score is not None else self.best_mrr
                self.bad_epochs = 0
                self.report.best_epoch = epoch
                self._save_best(epoch)
            else:
                self.bad_epochs += 1
                if self.bad_epochs >= cfg.patience:
                    self.report.stopped_early = True
                    log.info("no validation MRR@20 gain for %d epochs; stopping", self.bad_epochs)
            self.next_epoch = epoch + 1
            self._save_last()
        if self.out_dir is not None:
            self.report.save(self.out_dir / "report.json")
        final = self.model.state_dict()
        best = TIEDGNN(cfg, self.model.num_items, params=None, seed=0)
        best.load_state_dict(self.best_state)
        paths = (self.out_dir / BEST_NAME, self.out_dir / LAST_NAME) if self.out_dir is not None else (None, None)
        return TrainResult(best, self.report, final, *paths)


def train(config: TrainConfig, bundle: Bundle, graph: GlobalGraph, out_dir=None, progress=None, max_epochs: int | None = None) -> TrainResult:
    return Trainer(config, bundle, graph, out_dir, progress).fit(max_epochs)


def resume(checkpoint, bundle: Bundle, graph: GlobalGraph, config: TrainConfig | None = None, out_dir=None, progress=None, max_epochs: int | None = None) -> TrainResult:
    out_dir = Path(checkpoint).parent if out_dir is None else out_dir
    return Trainer.resume(checkpoint, bundle, graph, config, out_dir, progress).fit(max_epochs)
