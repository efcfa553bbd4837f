"""Session logs: parsing, filtering, prefix augmentation and splits."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 50


class DataError(ValueError):
    """Input data that cannot be turned into a usable corpus."""


@dataclass(frozen=True)
class RawEvent:
    session_id: str
    item_id: str
    order_key: int


@dataclass
class ItemVocab:
    reverse: list[str]
    forward: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.forward = {raw: i for i, raw in enumerate(self.reverse)}
        if len(self.forward) != len(self.reverse):
            raise DataError("duplicate raw item ids in vocabulary")

    @property
    def size(self) -> int:
        return len(self.reverse)

    def __len__(self) -> int:
        return len(self.reverse)

    def encode(self, raw_ids: Iterable[str]) -> list[int]:
        out = []
        for raw in raw_ids:
            if raw not in self.forward:
                raise KeyError(raw)
            out.append(self.forward[raw])
        return out

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.reverse).encode("utf-8")).hexdigest()


@dataclass
class SessionCorpus:
    """Sessions of dense item indices, in chronological order.

    ``time_keys[i]`` is the order key of the last event of session ``i``.
    """

    sessions: list[list[int]]
    vocab: ItemVocab
    time_keys: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.time_keys:
            self.time_keys = list(range(len(self.sessions)))
        if len(self.time_keys) != len(self.sessions):
            raise DataError("time_keys and sessions differ in length")

    def __len__(self) -> int:
        return len(self.sessions)


class LabeledInstance(NamedTuple):
    prefix: tuple[int, ...]
    label: int


@dataclass
class Splits:
    train: list[LabeledInstance]
    valid: list[LabeledInstance]
    test: list[LabeledInstance]
    train_sessions: list[list[int]]
    test_sessions: list[list[int]]
    vocab: ItemVocab


# parsing -----------------------------------------------------------------

_FIELDS = ("session_id", "item_id", "order_key")


def _parse_tsv_line(line: str) -> RawEvent:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 3 or not parts[0] or not parts[1]:
        raise ValueError(f"expected 3 tab-separated fields, got {len(parts)}")
    return RawEvent(parts[0], parts[1], int(parts[2]))


def _parse_jsonl_line(line: str) -> RawEvent:
    rec = json.loads(line)
    if not isinstance(rec, dict) or any(k not in rec for k in _FIELDS):
        raise ValueError("record lacks session_id/item_id/order_key")
    key = rec["order_key"]
    if isinstance(key, bool) or not isinstance(key, (int, str)):
        raise ValueError(f"order_key must be an integer, got {key!r}")
    return RawEvent(str(rec["session_id"]), str(rec["item_id"]), int(key))


def load_sessions(path, fmt: str = "tsv", tolerance: float = 0.05) -> tuple[list[RawEvent], int]:
    """Parse a TSV or JSON Lines event log.

    Returns the parsed events and the number of malformed lines. Raises
    :class:`DataError` when the malformed fraction exceeds ``tolerance``.
    """
    if fmt not in ("tsv", "jsonl"):
        raise DataError(f"unknown format {fmt!r}; use 'tsv' or 'jsonl'")
    parse = _parse_tsv_line if fmt == "tsv" else _parse_jsonl_line
    events: list[RawEvent] = []
    bad = 0
    seen = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            if lineno == 1 and fmt == "tsv" and tuple(line.rstrip("\r\n").split("\t")) == _FIELDS:
                continue
            seen += 1
            try:
                events.append(parse(line))
            except ValueError as exc:
                bad += 1
                log.debug("line %d malformed: %s", lineno, exc)
    if seen == 0:
        log.warning("%s contains no events", path)
        return [], 0
    if bad:
        log.warning("%s: %d of %d lines malformed", path, bad, seen)
    if bad / seen > tolerance:
        raise DataError(f"{path}: {bad}/{seen} malformed lines exceeds tolerance {tolerance:.1%}")
    return events, bad


def group_events(events: Sequence[RawEvent], split_gap_seconds: int | None = None) -> SessionCorpus:
    """Group events into chronologically ordered sessions of raw ids.

    Items get dense indices in order of first appearance. With
    ``split_gap_seconds``, a session id is cut wherever consecutive order
    keys differ by more than the gap.
    """
    by_session: dict[str, list[RawEvent]] = defaultdict(list)
    for ev in events:
        by_session[ev.session_id].append(ev)

    chunks: list[tuple[int, str, list[str]]] = []
    for sid, evs in by_session.items():
        evs.sort(key=lambda e: e.order_key)
        current = [evs[0]]
        part = 0
        for prev, ev in zip(evs, evs[1:]):
            if split_gap_seconds is not None and ev.order_key - prev.order_key > split_gap_seconds:
                chunks.append((current[-1].order_key, f"{sid}#{part}", [e.item_id for e in current]))
                current = []
                part += 1
            current.append(ev)
        tag = f"{sid}#{part}" if split_gap_seconds is not None else sid
        chunks.append((current[-1].order_key, tag, [e.item_id for e in current]))
    chunks.sort(key=lambda c: (c[0], c[1]))

    reverse: list[str] = []
    index: dict[str, int] = {}
    sessions = []
    for _, _, raw in chunks:
        seq = []
        for item in raw:
            if item not in index:
                index[item] = len(reverse)
                reverse.append(item)
            seq.append(index[item])
        sessions.append(seq)
    return SessionCorpus(sessions, ItemVocab(reverse), [c[0] for c in chunks])


# filtering and augmentation ----------------------------------------------


def _reindex(sessions: list[list[int]], time_keys: list[int], vocab: ItemVocab) -> SessionCorpus:
    used = sorted({x for s in sessions for x in s})
    remap = {old: new for new, old in enumerate(used)}
    return SessionCorpus(
        [[remap[x] for x in s] for s in sessions],
        ItemVocab([vocab.reverse[old] for old in used]),
        list(time_keys),
    )


def filter_corpus(corpus: SessionCorpus, min_len: int = 2, min_item_count: int = 5) -> SessionCorpus:
    """Drop rare items and short sessions until neither rule removes anything."""
    if not corpus.sessions:
        raise DataError("cannot filter an empty corpus")
    sessions = [list(s) for s in corpus.sessions]
    keys = list(corpus.time_keys)
    rounds = 0
    while True:
        rounds += 1
        counts = Counter(x for s in sessions for x in s)
        pruned = [[x for x in s if counts[x] >= min_item_count] for s in sessions]
        kept = [(s, k) for s, k in zip(pruned, keys) if len(s) >= min_len]
        new_sessions = [s for s, _ in kept]
        new_keys = [k for _, k in kept]
        if new_sessions == sessions:
            break
        sessions, keys = new_sessions, new_keys
        if not sessions:
            break
    if not sessions:
        raise DataError(
            f"filtering removed everything: {len(corpus.sessions)} sessions, "
            f"{corpus.vocab.size} items in; min_len={min_len}, min_item_count={min_item_count}"
        )
    log.info("filter reached a fixed point after %d rounds: %d sessions", rounds, len(sessions))
    return _reindex(sessions, keys, corpus.vocab)


def augment_split(session: Sequence[int], max_len: int | None = None) -> list[LabeledInstance]:
    """Every proper prefix paired with the item that follows it.

    Prefixes longer than ``max_len`` keep their most recent items.
    """
    out = []
    for t in range(1, len(session)):
        prefix = tuple(session[:t])
        if max_len is not None and len(prefix) > max_len:
            prefix = prefix[-max_len:]
        out.append(LabeledInstance(prefix, int(session[t])))
    return out


def make_splits(
    corpus: SessionCorpus,
    policy: str = "tail_fraction",
    param: float = 0.2,
    valid_fraction: float = 0.1,
    seed: int = 0,
    max_len: int | None = DEFAULT_MAX_LEN,
) -> Splits:
    """Chronological train/test split plus a seeded validation sample.

    ``tail_fraction``: the last ``param`` fraction of sessions is test.
    ``last_k_periods``: sessions ending within the final ``param`` order-key
    units are test. Test items unseen in training are dropped and the
    vocabulary is restricted to training items.
    """
    n = len(corpus.sessions)
    if policy == "tail_fraction":
        if not 0.0 < param < 1.0:
            raise DataError(f"tail_fraction must be in (0, 1), got {param}")
        n_test = int(round(n * param))
        cut = n - n_test
    elif policy == "last_k_periods":
        horizon = max(corpus.time_keys) - param
        cut = sum(1 for k in corpus.time_keys if k <= horizon)
    else:
        raise DataError(f"unknown split policy {policy!r}")
    train_src = corpus.sessions[:cut]
    test_src = corpus.sessions[cut:]
    if not train_src or not test_src:
        raise DataError(f"empty split: {len(train_src)} train / {len(test_src)} test sessions")

    train_items = sorted({x for s in train_src for x in s})
    remap = {old: new for new, old in enumerate(train_items)}
    vocab = ItemVocab([corpus.vocab.reverse[i] for i in train_items])
    train_sessions = [[remap[x] for x in s] for s in train_src]
    test_sessions = []
    for s in test_src:
        kept = [remap[x] for x in s if x in remap]
        if len(kept) >= 2:
            test_sessions.append(kept)

    train_all = [inst for s in train_sessions for inst in augment_split(s, max_len)]
    test = [inst for s in test_sessions for inst in augment_split(s, max_len)]
    rng = np.random.default_rng(seed)
    n_valid = int(round(len(train_all) * valid_fraction))
    chosen = np.zeros(len(train_all), dtype=bool)
    chosen[rng.permutation(len(train_all))[:n_valid]] = True
    valid = [inst for inst, c in zip(train_all, chosen) if c]
    train = [inst for inst, c in zip(train_all, chosen) if not c]
    for name, part in (("train", train), ("validation", valid), ("test", test)):
        if not part:
            raise DataError(f"{name} split is empty")
    return Splits(train, valid, test, train_sessions, test_sessions, vocab)


# bundle I/O ----------------------------------------------------------------


def _dump_jsonl(path: Path, rows: Iterable[dict | list]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def corpus_stats(splits: Splits) -> dict:
    lengths = [len(s) for s in splits.train_sessions + splits.test_sessions]
    return {
        "train_sessions": len(splits.train_sessions),
        "test_sessions": len(splits.test_sessions),
        "items": splits.vocab.size,
        "avg_length": round(float(np.mean(lengths)), 4),
        "train_instances": len(splits.train),
        "valid_instances": len(splits.valid),
        "test_instances": len(splits.test),
    }


def write_bundle(out_dir, splits: Splits) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "vocab": out / "vocab.tsv",
        "train": out / "train.jsonl",
        "valid": out / "valid.jsonl",
        "test": out / "test.jsonl",
        "train_sessions": out / "train_sessions.jsonl",
        "stats": out / "stats.json",
    }
    with open(paths["vocab"], "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for i, raw in enumerate(splits.vocab.reverse):
            writer.writerow([i, raw])
    for key in ("train", "valid", "test"):
        _dump_jsonl(paths[key], ({"prefix": list(p), "label": y} for p, y in getattr(splits, key)))
    _dump_jsonl(paths["train_sessions"], splits.train_sessions)
    paths["stats"].write_text(json.dumps(corpus_stats(splits), indent=2, sort_keys=True) + "\n")
    return paths


@dataclass
class Bundle:
    vocab: ItemVocab
    train: list[LabeledInstance]
    valid: list[LabeledInstance]
    test: list[LabeledInstance]
    train_sessions: list[list[int]]
    sessions_hash: str


def _read_instances(path: Path) -> list[LabeledInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(LabeledInstance(tuple(rec["prefix"]), int(rec["label"])))
    return out


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_bundle(bundle_dir) -> Bundle:
    root = Path(bundle_dir)
    if not root.is_dir():
        raise DataError(f"bundle directory {root} does not exist")
    try:
        with open(root / "vocab.tsv", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh, delimiter="\t") if r]
        vocab = ItemVocab([raw for _, raw in sorted(rows, key=lambda r: int(r[0]))])
        sessions_path = root / "train_sessions.jsonl"
        with open(sessions_path, encoding="utf-8") as fh:
            sessions = [json.loads(line) for line in fh if line.strip()]
        return Bundle(
            vocab,
            _read_instances(root / "train.jsonl"),
            _read_instances(root / "valid.jsonl"),
            _read_instances(root / "test.jsonl"),
            sessions,
            file_sha256(sessions_path),
        )
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read bundle {root}: {exc}") from exc
