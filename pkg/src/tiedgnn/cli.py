"""Command-line entry point: preprocess, build-graph, train, evaluate, predict.

Exit codes: 0 on success, 2 for bad input or configuration, 1 for anything
unexpected.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, TrainConfig, load_preset
from .dataset import DataError, file_sha256, filter_corpus, group_events, load_sessions, make_splits, read_bundle, write_bundle
from .evaluation import EvaluationError, evaluate, write_metrics
from .graphs import GraphError, build_global_graph, load_graph, save_graph
from .numerics import CheckpointError, ConfigError, checkpoint_hash, load_checkpoint
from .training import LAST_NAME, TrainingError, Trainer, load_model

log = logging.getLogger("tiedgnn")

USER_ERRORS = (DataError, GraphError, ConfigError, CheckpointError, EvaluationError, FileNotFoundError)


class UsageError(Exception):
    pass


def _hashes(paths, base: Path) -> dict[str, str]:
    return {_rel(p, base): file_sha256(p) for p in paths if Path(p).is_file()}


def _rel(path, base: Path) -> str:
    # relative paths keep a manifest byte-identical when a run is repeated elsewhere
    return os.path.relpath(Path(path).resolve(), base.resolve())


def write_manifest(path, command: str, seed, inputs, artifacts, config: dict | None = None, volatile=()) -> None:
    """Record what went in and what came out, each file with its SHA-256.

    Paths are relative to the directory holding the manifest.
    """
    base = Path(path).parent
    skip = {_rel(p, base) for p in volatile}
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": config or {},
        "inputs": _hashes(inputs, base),
        # volatile files (wall-clock timings) are named but not hashed
        "artifacts": _hashes([a for a in artifacts if _rel(a, base) not in skip], base),
        "volatile": sorted(skip),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


# subcommands ---------------------------------------------------------------


def cmd_preprocess(args) -> int:
    src = _require(args.input, "input file")
    events, bad = load_sessions(src, args.format, args.tolerance)
    if not events:
        raise DataError(f"{src} contains no events")
    corpus = group_events(events, args.split_gap_seconds)
    corpus = filter_corpus(corpus, args.min_len, args.min_item_count)
    splits = make_splits(corpus, args.split_policy, args.split_param, args.valid_fraction, args.seed, args.max_len)
    paths = write_bundle(args.out, splits)
    settings = {k: getattr(args, k) for k in ("format", "min_len", "min_item_count", "split_gap_seconds", "split_policy", "split_param", "valid_fraction", "max_len")}
    settings["malformed_lines"] = bad
    write_manifest(Path(args.out) / "manifest.json", "preprocess", args.seed, [src], paths.values(), settings)
    log.info("bundle written to %s: %d train / %d valid / %d test instances", args.out, len(splits.train), len(splits.valid), len(splits.test))
    return 0


def cmd_build_graph(args) -> int:
    bundle_dir = _require(args.bundle, "bundle directory")
    bundle = read_bundle(bundle_dir)
    graph = build_global_graph(bundle.train_sessions, args.epsilon, args.max_neighbors, bundle.vocab.size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph(graph, out)
    settings = {"epsilon": args.epsilon, "max_neighbors": args.max_neighbors}
    write_manifest(Path(f"{out}.manifest.json"), "build-graph", args.seed, [bundle_dir / "train_sessions.jsonl"], [out], settings)
    return 0


_OVERRIDES = {
    "d": int,
    "K": int,
    "L": int,
    "epsilon": int,
    "max_neighbors": int,
    "beta": float,
    "lam": float,
    "dropout": float,
    "batch_size": int,
    "base_lr": float,
    "weight_decay": float,
    "max_epochs": int,
    "patience": int,
    "ce_mode": str,
}


def _train_config(args) -> TrainConfig:
    overrides = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k) is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config is None and args.resume:
        _, meta = load_checkpoint(_require(args.resume, "checkpoint"))
        return TrainConfig.from_dict(meta["config"]).replace(**overrides)
    if args.config is None:
        return TrainConfig(**overrides)
    if Path(args.config).is_file():
        return TrainConfig.from_toml(args.config, **overrides)
    if args.config in PRESETS:
        return load_preset(args.config, **overrides)
    raise FileNotFoundError(f"config {args.config} is neither a file nor a preset ({', '.join(PRESETS)})")


def cmd_train(args) -> int:
    bundle_dir = _require(args.bundle, "bundle directory")
    graph_path = _require(args.graph, "graph file")
    config = _train_config(args)
    bundle = read_bundle(bundle_dir)
    graph = load_graph(graph_path)
    out = Path(args.out)

    def progress(line: str) -> None:
        print(line, flush=True)

    if args.resume:
        trainer = Trainer.resume(_require(args.resume, "checkpoint"), bundle, graph, config, out, progress)
    else:
        trainer = Trainer(config, bundle, graph, out, progress)
    result = trainer.fit()
    arts = [result.best_path, result.last_path, out / "report.json", out / "timing.json"]
    inputs = [bundle_dir / "train_sessions.jsonl", bundle_dir / "train.jsonl", bundle_dir / "valid.jsonl", graph_path]
    write_manifest(out / "manifest.json", "train", config.seed, inputs, arts, config.to_dict(), volatile=[out / "timing.json"])
    return 0


def cmd_evaluate(args) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    bundle_dir = _require(args.bundle, "bundle directory")
    graph_path = _require(args.graph, "graph file")
    bundle = read_bundle(bundle_dir)
    graph = load_graph(graph_path)
    result = evaluate(ckpt, bundle, graph, args.k, args.split)
    out = Path(args.out) if args.out else ckpt.parent / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(out, result, checkpoint_hash(ckpt))
    write_manifest(Path(f"{out}.manifest.json"), "evaluate", args.seed, [ckpt, bundle_dir / f"{args.split}.jsonl", graph_path], [out], {"k": args.k, "split": args.split})
    print(json.dumps(result.to_dict(), sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    graph = load_graph(_require(args.graph, "graph file"))
    model, meta = load_model(ckpt)
    if graph.num_items != model.num_items or (meta.get("graph_hash") and graph.corpus_hash != meta["graph_hash"]):
        raise GraphError("graph does not belong to this checkpoint")
    forward = {raw: i for i, raw in enumerate(meta["vocab"])}
    raw_ids = [s.strip() for s in args.session.split(",") if s.strip()]
    if not raw_ids:
        raise UsageError("--session needs at least one item id")
    unknown = [r for r in raw_ids if r not in forward]
    if unknown:
        raise UsageError(f"unknown item id {unknown[0]!r}")
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    probs = model.forward([[forward[r] for r in raw_ids]], graph).probs.data[0]
    top = np.argsort(-probs, kind="stable")[: args.topk]
    for i in top:
        print(f"{meta['vocab'][i]}\t{probs[i]:.10g}")
    return 0


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tiedgnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None, help="cap numeric library threads")

    p = sub.add_parser("preprocess", help="raw event log -> bundle directory")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv")
    p.add_argument("--out", required=True)
    p.add_argument("--min-item-count", type=int, default=5)
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--split-gap-seconds", type=int, default=None)
    p.add_argument("--split-policy", choices=("tail_fraction", "last_k_periods"), default="tail_fraction")
    p.add_argument("--split-param", type=float, default=0.2)
    p.add_argument("--valid-fraction", type=float, default=0.1)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=0.05, help="allowed fraction of malformed lines")
    common(p)
    p.set_defaults(func=cmd_preprocess, seed=0)

    p = sub.add_parser("build-graph", help="bundle -> global item graph")
    p.add_argument("--bundle", required=True)
    p.add_argument("--epsilon", type=int, default=3)
    p.add_argument("--max-neighbors", type=int, default=12)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="fit a model, writing checkpoints and report.json")
    p.add_argument("--bundle", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--config", default=None, help="TOML file or preset name: " + ", ".join(PRESETS))
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help=f"continue from a {LAST_NAME} file")
    for name, typ in _OVERRIDES.items():
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=typ, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--lr", dest="base_lr", type=float, default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="P@k and MRR@k of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--out", default=None, help="metrics file (default: metrics.json beside the checkpoint)")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="rank next items for one session")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--session", required=True, help="comma-separated raw item ids")
    p.add_argument("--topk", type=int, default=20)
    common(p)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    limit = nullcontext()
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(limits=args.threads)
    try:
        with limit:
            return args.func(args)
    except USER_ERRORS + (UsageError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001 - last-resort handler for the exit code contract
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
