"""Operator surface: chunking, training, encoding, search, evaluation, fusion.

One executable with subcommands. Settings come from a JSON config file with
flat dotted keys, overridden by flags; every run logs the fully resolved
config. All randomness flows from a single seed through the named generator
recorded in checkpoints. Exit codes: 0 success, 1 usage/config error,
2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np

from . import baselines, corpus, evalretrieval, numkernel as nk, retriever, training
from .baselines import ReplugConfig
from .retriever import Encoder
from .training import TrainConfig
from .transformer import LanguageModel, ModelConfig

log = logging.getLogger("revela")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFICATION = 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class VerificationError(Exception):
    pass


_MODEL_KEYS = {
    "d_model": int, "n_heads": int, "n_layers": int, "d_ff": int,
    "vocab_size": int, "max_seq_len": int, "epsilon": float,
    "v_normalization": bool,
}

CONFIG_SCHEMA: dict[str, type] = {}
for _prefix in ("model", "retriever"):
    for _key, _type in _MODEL_KEYS.items():
        CONFIG_SCHEMA[f"{_prefix}.{_key}"] = _type
CONFIG_SCHEMA.update({
    "train.learning_rate": float,
    "train.warmup_steps": int,
    "train.total_steps": int,
    "train.tau": float,
    "train.half_chunk": bool,
    "train.aux_e_stream_loss": bool,
    "train.weight_decay": float,
    "train.grad_clip": float,
    "train.seed": int,
    "replug.tau_r": float,
    "replug.tau_lm": float,
    "replug.learning_rate": float,
    "replug.steps": int,
    "replug.warmup_steps": int,
    "replug.separator_byte": int,
    "gradcheck.delta": float,
    "gradcheck.threshold": float,
})

DEFAULTS: dict = {
    "model.d_model": 32, "model.n_heads": 4, "model.n_layers": 2, "model.d_ff": 64,
    "model.vocab_size": corpus.VOCAB_SIZE, "model.max_seq_len": 160,
    "model.epsilon": 1e-6, "model.v_normalization": True,
    "retriever.d_model": 32, "retriever.n_heads": 4, "retriever.n_layers": 2,
    "retriever.d_ff": 64, "retriever.vocab_size": corpus.VOCAB_SIZE,
    "retriever.max_seq_len": 160, "retriever.epsilon": 1e-6,
    "retriever.v_normalization": True,
    "train.learning_rate": 1e-4, "train.warmup_steps": 100, "train.total_steps": 0,
    "train.tau": 1e-4, "train.half_chunk": False, "train.aux_e_stream_loss": False,
    "train.weight_decay": 0.0, "train.grad_clip": 1.0, "train.seed": 0,
    "replug.tau_r": 0.001, "replug.tau_lm": 0.001, "replug.learning_rate": 5e-4,
    "replug.steps": 4500, "replug.warmup_steps": 100, "replug.separator_byte": 10,
    "gradcheck.delta": 1e-5, "gradcheck.threshold": 1e-5,
}

# cmd_gradcheck verifies a deliberately tiny model regardless of run defaults
GRADCHECK_DEFAULTS = {
    "model.d_model": 16, "model.n_heads": 2, "model.n_layers": 2, "model.d_ff": 32,
    "model.max_seq_len": 16,
    "retriever.d_model": 16, "retriever.n_heads": 2, "retriever.n_layers": 2,
    "retriever.d_ff": 32, "retriever.max_seq_len": 32,
    "train.tau": 0.5,
}


def resolve_config(path: str | None, overrides: dict, base: dict | None = None) -> dict:
    """defaults <- optional extra defaults <- config file <- flag overrides."""
    resolved = dict(DEFAULTS)
    if base:
        resolved.update(base)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        for key, value in loaded.items():
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            resolved[key] = _coerce(key, value)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        resolved[key] = _coerce(key, value)
    return resolved


def _coerce(key: str, value):
    want = CONFIG_SCHEMA[key]
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be true/false")
        return value
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer")
        return value
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number")
        return float(value)
    return value


def model_config_from(cfg: dict, prefix: str) -> ModelConfig:
    try:
        return ModelConfig(
            d_model=cfg[f"{prefix}.d_model"], n_heads=cfg[f"{prefix}.n_heads"],
            n_layers=cfg[f"{prefix}.n_layers"], d_ff=cfg[f"{prefix}.d_ff"],
            vocab_size=cfg[f"{prefix}.vocab_size"],
            max_seq_len=cfg[f"{prefix}.max_seq_len"],
            epsilon=cfg[f"{prefix}.epsilon"],
            v_normalization_enabled=cfg[f"{prefix}.v_normalization"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config_from(cfg: dict, total_steps: int) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=cfg["train.learning_rate"],
            warmup_steps=min(cfg["train.warmup_steps"], total_steps),
            total_steps=total_steps,
            tau=cfg["train.tau"],
            epsilon=cfg["model.epsilon"],
            max_seq_len=cfg["model.max_seq_len"],
            half_chunk_mode=cfg["train.half_chunk"],
            v_normalization_enabled=cfg["model.v_normalization"],
            aux_e_stream_loss=cfg["train.aux_e_stream_loss"],
            weight_decay=cfg["train.weight_decay"],
            grad_clip=cfg["train.grad_clip"],
            seed=cfg["train.seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _log_config(cfg: dict) -> None:
    log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))


def _load_encoder_from_checkpoint(path: str) -> Encoder:
    metadata, arrays = _read_checkpoint(path)
    cfg = metadata["config"]
    config = model_config_from(cfg, "retriever")
    params = training.params_from_arrays(config, arrays, "theta")
    return Encoder(config, params)


def _load_lm_from_checkpoint(path: str) -> LanguageModel:
    metadata, arrays = _read_checkpoint(path)
    cfg = metadata["config"]
    config = model_config_from(cfg, "model")
    params = training.params_from_arrays(config, arrays, "phi")
    return LanguageModel(config, params)


def _read_checkpoint(path: str):
    try:
        return training.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _require_file(path: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_chunk(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.merge:
        for path in args.merge:
            _require_file(path)
        try:
            batches = corpus.merge_batch_files(args.merge, seed)
        except (ValueError, json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"bad batch file: {exc}") from exc
        corpus.save_batches(batches, args.output)
        log.info("merged %d batches from %d files", len(batches), len(args.merge))
        return EXIT_OK
    if not args.corpus:
        raise ConfigError("chunk needs a corpus file (or --merge batch files)")
    _require_file(args.corpus)
    try:
        docs = corpus.load_corpus(args.corpus)
    except (ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"bad corpus file: {exc}") from exc
    chunked = [corpus.chunk_document(doc) for doc in docs]
    flat = corpus.interleave(chunked)
    batches = corpus.build_batches(flat, args.batch_size)
    if args.random:
        batches = corpus.shuffle_chunks_global(batches, seed)
    if not batches:
        raise DataError("corpus produced no complete batches at this batch size")
    corpus.save_batches(batches, args.output)
    log.info("wrote %d batches of %d chunks", len(batches), args.batch_size)
    return EXIT_OK


def _flag_overrides(args) -> dict:
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "tau", None) is not None:
        overrides["train.tau"] = args.tau
    if getattr(args, "epsilon", None) is not None:
        overrides["model.epsilon"] = args.epsilon
    if getattr(args, "no_vnorm", False):
        overrides["model.v_normalization"] = False
    if getattr(args, "half_chunk", False):
        overrides["train.half_chunk"] = True
    return overrides


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, _flag_overrides(args))
    _require_file(args.batches)
    try:
        batches = corpus.load_batches(args.batches)
    except (ValueError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"bad batch file: {exc}") from exc
    if not batches:
        raise DataError("batch file is empty")
    total = args.steps or cfg["train.total_steps"] or len(batches)
    cfg["train.total_steps"] = total
    _log_config(cfg)
    train_cfg = train_config_from(cfg, total)
    lm_config = model_config_from(cfg, "model")
    retr_config = model_config_from(cfg, "retriever")
    encoder, lm = training.init_models(lm_config, retr_config, train_cfg.seed)
    metrics = training.train(batches, encoder, lm, train_cfg,
                             metrics_path=args.metrics_out)
    training.save_training_checkpoint(args.output, encoder, lm, cfg,
                                      step=total, seed=train_cfg.seed)
    log.info("trained %d steps, final loss %.6f", total, metrics[-1]["loss"])
    return EXIT_OK


def cmd_train_replug(args) -> int:
    cfg = resolve_config(args.config, _flag_overrides(args))
    _require_file(args.batches)
    try:
        batches = corpus.load_batches(args.batches)
    except (ValueError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"bad batch file: {exc}") from exc
    if not batches:
        raise DataError("batch file is empty")
    lm = _load_lm_from_checkpoint(args.lm_checkpoint)
    steps = args.steps or cfg["replug.steps"]
    cfg["replug.steps"] = steps
    _log_config(cfg)
    try:
        replug_cfg = ReplugConfig(
            tau_r=cfg["replug.tau_r"], tau_lm=cfg["replug.tau_lm"],
            learning_rate=cfg["replug.learning_rate"], steps=steps,
            warmup_steps=cfg["replug.warmup_steps"],
            separator_id=cfg["replug.separator_byte"],
            seed=cfg["train.seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    retr_config = model_config_from(cfg, "retriever")
    encoder, _ = training.init_models(model_config_from(cfg, "model"), retr_config,
                                      replug_cfg.seed)
    metrics = baselines.replug_train(batches, encoder, lm, replug_cfg,
                                     metrics_path=args.metrics_out)
    training.save_training_checkpoint(args.output, encoder, lm, cfg,
                                      step=steps, seed=replug_cfg.seed)
    log.info("replug-trained %d steps, final loss %.6f", steps, metrics[-1]["loss"])
    return EXIT_OK


def cmd_encode(args) -> int:
    encoder = _load_encoder_from_checkpoint(args.checkpoint)
    _require_file(args.corpus)
    try:
        docs = corpus.load_corpus(args.corpus)
    except (ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"bad corpus file: {exc}") from exc
    with nk.no_grad():
        emb = evalretrieval._encode_all([d.text for d in docs], args.role, encoder)
    with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
        for doc, row in zip(docs, emb):
            vec = [float(np.float32(v)) for v in row]
            fh.write(json.dumps({"id": doc.id, "embedding": vec}) + "\n")
    log.info("encoded %d documents with role %s", len(docs), args.role)
    return EXIT_OK


def cmd_search(args) -> int:
    _require_file(args.corpus)
    _require_file(args.queries)
    try:
        docs = corpus.load_corpus(args.corpus)
        queries = evalretrieval.load_queries(args.queries)
    except (ValueError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"bad input file: {exc}") from exc
    pairs = [(d.id, d.text) for d in docs]
    if args.bm25:
        index = evalretrieval.Bm25Index(pairs)
        rankings = [evalretrieval.bm25_search(qid, text, index, args.top_k)
                    for qid, text in queries]
    else:
        if not args.checkpoint:
            raise ConfigError("search needs --checkpoint or --bm25")
        encoder = _load_encoder_from_checkpoint(args.checkpoint)
        rankings = evalretrieval.dense_search(queries, pairs, encoder, args.top_k)
    evalretrieval.write_run(rankings, args.output, tag=args.tag)
    log.info("wrote run for %d queries", len(rankings))
    return EXIT_OK


def cmd_eval(args) -> int:
    _require_file(args.run)
    _require_file(args.qrels)
    try:
        runs = evalretrieval.read_run(args.run)
        qrels = evalretrieval.load_qrels(args.qrels)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not qrels:
        raise DataError(f"qrels file {args.qrels} holds no judgments")
    if not runs:
        raise DataError(f"run file {args.run} holds no rankings")
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    try:
        report = evalretrieval.evaluate_runs(runs, qrels, metrics)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    width = max(len(m) for m in metrics)
    for name in metrics:
        print(f"{name:<{width}}  {report['mean'][name]:.4f}")
    if args.json:
        with open(args.json, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
            fh.write("\n")
    return EXIT_OK


def cmd_fuse(args) -> int:
    _require_file(args.run1)
    _require_file(args.run2)
    try:
        runs1 = evalretrieval.read_run(args.run1)
        runs2 = evalretrieval.read_run(args.run2)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    fused = []
    for qid in sorted(set(runs1) | set(runs2)):
        r1 = runs1.get(qid, evalretrieval.RankedList(qid, []))
        r2 = runs2.get(qid, evalretrieval.RankedList(qid, []))
        fused.append(evalretrieval.rrf_fuse(r1, r2, k=args.rrf_k, depth=args.depth))
    evalretrieval.write_run(fused, args.output, tag=args.tag)
    for ranking in fused:
        if ranking.items:
            print(f"{ranking.query_id} top: {ranking.items[0][0]} "
                  f"{ranking.items[0][1]!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args.config, _flag_overrides(args), base=GRADCHECK_DEFAULTS)
    _log_config(cfg)
    lm_config = model_config_from(cfg, "model")
    retr_config = model_config_from(cfg, "retriever")
    seed = cfg["train.seed"]
    encoder, lm = training.init_models(lm_config, retr_config, seed)
    train_cfg = train_config_from(cfg, total_steps=max(cfg["train.total_steps"], 100))
    batch = corpus.TrainingBatch([
        corpus.Chunk("g0", 0, "ab cd ef"),
        corpus.Chunk("g1", 0, "gh ij kl"),
        corpus.Chunk("g2", 0, "mn op qr"),
    ])
    params = [t for _, t in encoder.params.named_tensors()]
    params += [t for _, t in lm.params.named_tensors()]

    def objective(_):
        return training.revela_loss(batch, encoder, lm, train_cfg)

    error = nk.gradcheck(objective, params, delta=cfg["gradcheck.delta"])
    threshold = cfg["gradcheck.threshold"]
    print(f"gradcheck max relative error: {error:.3e} (threshold {threshold:.1e})")
    if error >= threshold:
        raise VerificationError(
            f"gradcheck failed: {error:.3e} >= {threshold:.1e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="revela", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config of dotted keys")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--no-vnorm", action="store_true")
        p.add_argument("--half-chunk", action="store_true")

    p = sub.add_parser("chunk", help="corpus JSONL -> interleaved batch file")
    p.add_argument("corpus", nargs="?", default=None)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--random", action="store_true",
                   help="globally shuffle chunks across batches (ablation)")
    p.add_argument("--merge", nargs="+", default=None,
                   help="merge existing batch files instead of chunking")
    p.set_defaults(func=cmd_chunk)

    p = sub.add_parser("train", help="joint retriever+LM training on a batch file")
    p.add_argument("batches")
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.add_argument("--metrics-out", default=None, help="JSONL metrics log path")
    p.add_argument("--steps", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-replug", help="distill a frozen LM into the retriever")
    p.add_argument("batches")
    p.add_argument("--lm-checkpoint", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--metrics-out", default=None)
    p.add_argument("--steps", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_train_replug)

    p = sub.add_parser("encode", help="export corpus embeddings as JSONL")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--role", choices=("query", "passage"), default="passage")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("search", help="dense or BM25 search over a corpus")
    p.add_argument("queries")
    p.add_argument("corpus")
    p.add_argument("-o", "--output", required=True, help="TREC run file path")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--bm25", action="store_true")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--tag", default="revela")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="score a run file against qrels")
    p.add_argument("run")
    p.add_argument("qrels")
    p.add_argument("--metrics", default="ndcg@10")
    p.add_argument("--json", default=None, help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="reciprocal rank fusion of two run files")
    p.add_argument("run1")
    p.add_argument("run2")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--rrf-k", type=int, default=evalretrieval.RRF_K)
    p.add_argument("--depth", type=int, default=evalretrieval.RRF_DEPTH)
    p.add_argument("--tag", default="rrf")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("REVELA_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise ConfigError(f"REVELA_LOG_LEVEL must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level_name],
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    try:
        _setup_logging()
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VerificationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
