"""Command-line surface tying the pipeline together.

Commands: gen-synthetic, build-vocab, pretrain, finetune, evaluate, index,
query, export-embeddings. Configuration is a flat ``key = value`` file plus
command-line flag overrides (flags > file > defaults); unknown keys are
rejected before any work starts, and the effective configuration is echoed
into every JSON artifact.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, evaluation, retrieval, textpipe, training
from .encoder import EncoderConfig, init_params, load_encoder, save_encoder
from .training import FinetuneConfig, TrainingConfig


class CliError(Exception):
    """Validation failure: bad flags, files, or config (exit code 1)."""


# One flat registry of every configuration key: name -> (type, default, help).
# Booleans are parsed from true/false|1/0|yes/no.
CONFIG_KEYS: dict[str, tuple[type, object, str]] = {
    # model
    "embed_dim": (int, 320, "n-gram embedding dimension"),
    "hidden_layers": (int, 3, "feed-forward hidden layer count"),
    "hidden_dim": (int, 1024, "feed-forward hidden width"),
    "out_dim": (int, 512, "final encoding dimension"),
    "attn_dim": (int, 64, "attention projection dimension"),
    "max_positions": (int, 128, "positional table size / max sequence length"),
    "activation": (str, "swish", "tower activation: swish|tanh"),
    "use_self_attention": (bool, True, "enable self-attention"),
    "use_bigrams": (bool, True, "enable bigram features"),
    "shared_towers": (bool, False, "share feed-forward towers across sides"),
    # vocabulary
    "sample_size": (int, 1_000_000, "pairs sampled for vocabulary counting"),
    "min_count": (int, 10, "minimum unigram frequency"),
    "max_bigrams": (int, 200_000, "bigram table size cap"),
    "oov_buckets": (int, 50_000, "out-of-vocabulary hash buckets"),
    # training
    "batch_size": (int, 500, "pairs per training batch"),
    "lr0": (float, 0.03, "initial learning rate"),
    "decay_factor": (float, 0.3, "learning-rate decay multiplier"),
    "decay_every": (int, 1_000_000, "steps between decays after decay_after"),
    "decay_after": (int, 2_500_000, "first decay step"),
    "smoothing_mass": (float, 0.8, "probability mass on the true response"),
    "scale_embedding_grads_by_batch": (bool, True, "multiply embedding grads by K"),
    "max_steps": (int, 0, "step cap (0 = unlimited)"),
    "epochs": (int, 1, "training epochs"),
    "val_fraction": (float, 0.05, "held-out validation fraction"),
    "eval_every": (int, 200, "steps between validation evaluations"),
    "seed": (int, 0, "RNG seed"),
    # fine-tuning
    "strategy": (str, "direct", "fine-tuning strategy: direct|mixed"),
    "source_percent": (float, 75.0, "percent of source pairs per mixed batch"),
    "patience": (int, 5, "evaluations without improvement before stopping"),
    # evaluation
    "n_candidates": (int, 100, "candidate pool size per query"),
    "k": (int, 1, "recall cutoff"),
    "dedupe_inputs": (bool, False, "collapse duplicate inputs first"),
    "dedupe_responses": (bool, False, "collapse duplicate responses first"),
    "include_ranks": (bool, False, "include per-query ranks in the report"),
    "ranker": (str, "encoder", "encoder|tfidf|bm25|sim|map|random"),
    "global_stats": (bool, False, "keyword stats over the whole test corpus"),
    "bm25_k1": (float, 1.2, "BM25 k1"),
    "bm25_b": (float, 0.75, "BM25 b"),
    # retrieval
    "with_ann": (bool, True, "build the approximate search graph"),
    "max_neighbors": (int, 16, "graph degree"),
    "ef_construction": (int, 200, "construction frontier size"),
    "ef_search": (int, 80, "query frontier size"),
    "top_k": (int, 5, "results per query"),
    "exact": (bool, False, "use exact search in `query`"),
    # synthetic data
    "n_topics": (int, 100, "synthetic topic count"),
    "pairs_per_topic": (int, 500, "synthetic pairs per topic"),
    "gen_vocab_size": (int, 2000, "synthetic token universe size"),
    "domain": (str, "source", "synthetic domain: source|target"),
    "detail_chunks": (bool, True, "emit pair-specific shared chunks"),
    # misc
    "threads": (int, 1, "worker thread cap (env RSEL_THREADS as fallback)"),
    "side": (str, "response", "encoder side for export: input|response"),
}

_COMMAND_KEYS = {
    "gen-synthetic": [
        "n_topics", "pairs_per_topic", "gen_vocab_size", "domain", "detail_chunks", "seed",
    ],
    "build-vocab": ["sample_size", "min_count", "max_bigrams", "oov_buckets", "seed"],
    "pretrain": [
        "embed_dim", "hidden_layers", "hidden_dim", "out_dim", "attn_dim",
        "max_positions", "activation", "use_self_attention", "use_bigrams",
        "shared_towers", "batch_size", "lr0", "decay_factor", "decay_every",
        "decay_after", "smoothing_mass", "scale_embedding_grads_by_batch",
        "max_steps", "epochs", "val_fraction", "eval_every", "seed",
    ],
    "finetune": [
        "strategy", "source_percent", "patience", "eval_every", "batch_size",
        "lr0", "decay_factor", "decay_every", "decay_after", "smoothing_mass",
        "scale_embedding_grads_by_batch", "max_steps", "val_fraction", "seed",
    ],
    "evaluate": [
        "ranker", "n_candidates", "k", "seed", "dedupe_inputs", "dedupe_responses",
        "include_ranks", "global_stats", "bm25_k1", "bm25_b", "threads",
    ],
    "index": ["with_ann", "max_neighbors", "ef_construction", "seed", "threads"],
    "query": ["top_k", "ef_search", "exact"],
    "export-embeddings": ["side"],
}


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise CliError(f"invalid boolean {value!r}")


def _coerce(key: str, raw: str):
    kind = CONFIG_KEYS[key][0]
    try:
        return _parse_bool(raw) if kind is bool else kind(raw)
    except ValueError as exc:
        raise CliError(f"invalid value for {key}: {raw!r} ({exc})") from exc


def _read_config_file(path: str, allowed: list[str]) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CliError(f"{path}:{lineno}: expected `key = value`")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise CliError(f"{path}:{lineno}: unknown configuration key {key!r}")
        if key not in allowed:
            raise CliError(
                f"{path}:{lineno}: key {key!r} does not apply to this command"
            )
        values[key] = _coerce(key, raw.strip())
    return values


def _resolve_config(args: argparse.Namespace, command: str) -> dict:
    """flags > config file > defaults, validated against the command's keys."""
    allowed = _COMMAND_KEYS[command]
    config = {key: CONFIG_KEYS[key][1] for key in allowed}
    if getattr(args, "config", None):
        if not Path(args.config).exists():
            raise CliError(f"config file not found: {args.config}")
        config.update(_read_config_file(args.config, allowed))
    for key in allowed:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            config[key] = flag_value
    if config.get("threads", 1) == 1 and os.environ.get("RSEL_THREADS"):
        try:
            config["threads"] = int(os.environ["RSEL_THREADS"])
        except ValueError as exc:
            raise CliError(f"invalid RSEL_THREADS: {os.environ['RSEL_THREADS']!r}") from exc
    return config


def _add_config_flags(parser: argparse.ArgumentParser, command: str) -> None:
    parser.add_argument("--config", help="flat key = value configuration file")
    for key in _COMMAND_KEYS[command]:
        kind, default, help_text = CONFIG_KEYS[key]
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            parser.add_argument(
                flag, type=_parse_bool, default=None, metavar="BOOL",
                help=f"{help_text} (default {default})",
            )
        else:
            parser.add_argument(
                flag, type=kind, default=None, metavar=kind.__name__.upper(),
                help=f"{help_text} (default {default})",
            )


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {path}")
    return p


def _encoder_config(config: dict, vocab: textpipe.Vocabulary) -> EncoderConfig:
    return EncoderConfig.for_vocab(
        vocab,
        embed_dim=config["embed_dim"],
        hidden_layers=config["hidden_layers"],
        hidden_dim=config["hidden_dim"],
        out_dim=config["out_dim"],
        attn_dim=config["attn_dim"],
        max_positions=config["max_positions"],
        activation=config["activation"],
        use_self_attention=config["use_self_attention"],
        use_bigrams=config["use_bigrams"],
        shared_towers=config["shared_towers"],
    )


def _training_config(config: dict) -> TrainingConfig:
    return TrainingConfig(
        batch_size=config["batch_size"],
        lr0=config["lr0"],
        decay_factor=config["decay_factor"],
        decay_every=config["decay_every"],
        decay_after=config["decay_after"],
        smoothing_mass=config["smoothing_mass"],
        scale_embedding_grads_by_batch=config["scale_embedding_grads_by_batch"],
        max_steps=config["max_steps"] or None,
        seed=config["seed"],
    )


def _write_json(path: str | None, obj: dict) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_gen_synthetic(args) -> int:
    config = _resolve_config(args, "gen-synthetic")
    pairs = textpipe.generate_synthetic_corpus(
        n_topics=config["n_topics"],
        pairs_per_topic=config["pairs_per_topic"],
        vocab_size=config["gen_vocab_size"],
        seed=config["seed"],
        domain=config["domain"],
        detail_chunks=config["detail_chunks"],
    )
    textpipe.write_pairs_jsonl(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def _cmd_build_vocab(args) -> int:
    config = _resolve_config(args, "build-vocab")
    pairs = textpipe.read_pairs_jsonl(_require_file(args.data, "dataset"))
    vocab = textpipe.build_vocab(
        pairs,
        sample_size=config["sample_size"],
        min_count=config["min_count"],
        max_bigrams=config["max_bigrams"],
        oov_buckets=config["oov_buckets"],
        seed=config["seed"],
    )
    textpipe.save_vocab_tsv(vocab, args.out)
    print(
        f"wrote vocabulary ({vocab.n_unigrams} unigrams, {vocab.n_bigrams} bigrams, "
        f"fingerprint {vocab.fingerprint():#018x}) to {args.out}"
    )
    return 0


def _cmd_pretrain(args) -> int:
    config = _resolve_config(args, "pretrain")
    pairs = textpipe.read_pairs_jsonl(_require_file(args.data, "dataset"))
    vocab = textpipe.load_vocab_tsv(_require_file(args.vocab, "vocabulary"))
    kept = [p for p in pairs if textpipe.filter_pair(p)]
    if not kept:
        raise CliError("no pairs pass the pretraining length filter")
    enc_config = _encoder_config(config, vocab)
    log = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        state = training.pretrain(
            kept,
            vocab,
            enc_config,
            _training_config(config),
            epochs=config["epochs"],
            val_fraction=config["val_fraction"],
            eval_every=config["eval_every"],
            log=log,
        )
    finally:
        if log:
            log.close()
    save_encoder(args.out, enc_config, state.params, vocab.fingerprint())
    print(
        f"pretrained {state.step} steps "
        f"(filtered {len(pairs) - len(kept)} of {len(pairs)} pairs); "
        f"best val recall {state.best_metric:.4f}; wrote {args.out}"
    )
    return 0


def _cmd_finetune(args) -> int:
    config = _resolve_config(args, "finetune")
    vocab = textpipe.load_vocab_tsv(_require_file(args.vocab, "vocabulary"))
    enc_config, params, _ = load_encoder(
        _require_file(args.checkpoint, "checkpoint"), vocab=vocab
    )
    target = textpipe.read_pairs_jsonl(_require_file(args.target, "target dataset"))
    source = None
    if args.source:
        source = textpipe.read_pairs_jsonl(_require_file(args.source, "source dataset"))
    ft_config = FinetuneConfig(
        strategy=config["strategy"],
        source_percent=config["source_percent"],
        patience=config["patience"],
        eval_every=config["eval_every"],
    )
    if ft_config.strategy == "mixed" and source is None:
        raise CliError("--strategy mixed requires --source")
    log = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        state = training.finetune(
            params,
            enc_config,
            vocab,
            target,
            ft_config,
            _training_config(config),
            source_pairs=source,
            val_fraction=config["val_fraction"],
            log=log,
        )
    finally:
        if log:
            log.close()
    save_encoder(args.out, enc_config, state.params, vocab.fingerprint())
    print(
        f"fine-tuned ({ft_config.strategy}) for {state.step} steps; "
        f"best val recall {state.best_metric:.4f} at step {state.best_step}; "
        f"wrote {args.out}"
    )
    return 0


def _make_ranker(config: dict, args, pairs) -> object:
    name = config["ranker"]
    if name == "random":
        return evaluation.RandomRanker(seed=config["seed"])
    if name in ("tfidf", "bm25"):
        corpus = [p.response for p in pairs] if config["global_stats"] else None
        if name == "tfidf":
            return baselines.TfidfRanker(corpus)
        return baselines.Bm25Ranker(corpus, k1=config["bm25_k1"], b=config["bm25_b"])
    if name in ("encoder", "sim", "map"):
        if not args.checkpoint:
            raise CliError(f"--ranker {name} requires --checkpoint")
        if not args.vocab:
            raise CliError(f"--ranker {name} requires --vocab")
        vocab = textpipe.load_vocab_tsv(_require_file(args.vocab, "vocabulary"))
        enc_config, params, _ = load_encoder(
            _require_file(args.checkpoint, "checkpoint"), vocab=vocab
        )
        enc_ranker = evaluation.EncoderRanker(params, enc_config, vocab)
        if name == "encoder":
            return enc_ranker

        def embed(text: str, side: str) -> np.ndarray:
            return enc_ranker._vector(text, side)

        if name == "sim":
            return baselines.SimRanker(embed)
        if not args.map_checkpoint:
            raise CliError("--ranker map requires --map-checkpoint")
        map_params, _ = baselines.load_map(
            _require_file(args.map_checkpoint, "map checkpoint")
        )
        return baselines.MapRanker(embed, map_params)
    raise CliError(f"unknown ranker {name!r}")


def _cmd_evaluate(args) -> int:
    config = _resolve_config(args, "evaluate")
    pairs = textpipe.read_pairs_jsonl(_require_file(args.data, "dataset"))
    ranker = _make_ranker(config, args, pairs)
    eval_config = evaluation.EvalConfig(
        n_candidates=config["n_candidates"],
        k=config["k"],
        seed=config["seed"],
        dedupe_inputs=config["dedupe_inputs"],
        dedupe_responses=config["dedupe_responses"],
    )
    result = evaluation.evaluate(ranker, pairs, eval_config, threads=config["threads"])
    report = evaluation.report_dict(
        result,
        eval_config,
        dataset=str(args.data),
        include_ranks=config["include_ranks"],
        extras={"config": {k: config[k] for k in sorted(config)}},
    )
    _write_json(args.report, report)
    if args.report:
        print(f"recall@{config['k']} = {result.recall:.4f} ({result.n_queries} queries)")
    return 0


def _cmd_index(args) -> int:
    config = _resolve_config(args, "index")
    vocab = textpipe.load_vocab_tsv(_require_file(args.vocab, "vocabulary"))
    enc_config, params, ckpt = load_encoder(
        _require_file(args.checkpoint, "checkpoint"), vocab=vocab
    )
    pairs = textpipe.read_pairs_jsonl(_require_file(args.data, "dataset"))
    responses = sorted({p.response for p in pairs})
    index = retrieval.build_index(
        responses,
        params,
        enc_config,
        vocab,
        with_ann=config["with_ann"],
        build_config=retrieval.IndexBuildConfig(
            max_neighbors=config["max_neighbors"],
            ef_construction=config["ef_construction"],
            seed=config["seed"],
        ),
        checkpoint_fingerprint=ckpt.fingerprint(),
    )
    retrieval.save_index(index, args.out)
    print(f"indexed {len(index)} responses to {args.out}")
    return 0


def _cmd_query(args) -> int:
    config = _resolve_config(args, "query")
    vocab = textpipe.load_vocab_tsv(_require_file(args.vocab, "vocabulary"))
    enc_config, params, ckpt = load_encoder(
        _require_file(args.checkpoint, "checkpoint"), vocab=vocab
    )
    index = retrieval.load_index(_require_file(args.index, "index"))
    if index.checkpoint_fingerprint != ckpt.fingerprint():
        raise CliError(
            f"index {args.index} was built with a different checkpoint "
            f"(index {index.checkpoint_fingerprint:#x}, "
            f"checkpoint {ckpt.fingerprint():#x})"
        )
    from .encoder import encode, scale_value

    scale = scale_value(params, enc_config)
    top_k = min(config["top_k"], len(index))
    for line in sys.stdin:
        text = line.strip()
        if not text:
            continue
        feats = textpipe.featurize(
            textpipe.truncate_tokens(textpipe.normalize(text), enc_config.max_positions),
            vocab,
        )
        query_vec = encode(feats, params, enc_config, "input")
        if config["exact"] or index.graph is None:
            result = retrieval.search_exact(index, query_vec, top_k)
        else:
            result = retrieval.search_ann(
                index, query_vec, top_k, ef_search=max(config["ef_search"], top_k)
            )
        for rank, (idx, cos) in enumerate(result.items, start=1):
            print(f"{rank}\t{scale * cos:.4f}\t{index.payloads[idx]}")
        sys.stdout.flush()
    return 0


def _cmd_export_embeddings(args) -> int:
    config = _resolve_config(args, "export-embeddings")
    if config["side"] not in ("input", "response"):
        raise CliError(f"invalid side {config['side']!r} (input|response)")
    vocab = textpipe.load_vocab_tsv(_require_file(args.vocab, "vocabulary"))
    enc_config, params, _ = load_encoder(
        _require_file(args.checkpoint, "checkpoint"), vocab=vocab
    )
    pairs = textpipe.read_pairs_jsonl(_require_file(args.data, "dataset"))
    side = config["side"]
    from .encoder import encode

    with open(args.out, "w", encoding="utf-8") as fh:
        for i, pair in enumerate(pairs):
            text = pair.input if side == "input" else pair.response
            feats = textpipe.featurize(
                textpipe.truncate_tokens(textpipe.normalize(text), enc_config.max_positions),
                vocab,
            )
            vec = encode(feats, params, enc_config, side)
            floats = "\t".join(f"{x:.6g}" for x in vec)
            fh.write(f"{i}\t{text}\t{floats}\n")
    print(f"exported {len(pairs)} {side} embeddings to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rsel",
        description="Response-selection toolkit: featurize, pretrain, "
        "fine-tune, index, and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic topic corpus")
    p.add_argument("--out", required=True, help="output JSONL path")
    _add_config_flags(p, "gen-synthetic")
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("build-vocab", help="count n-grams and freeze the vocabulary")
    p.add_argument("--data", required=True, help="JSONL dataset")
    p.add_argument("--out", required=True, help="output vocabulary TSV")
    _add_config_flags(p, "build-vocab")
    p.set_defaults(func=_cmd_build_vocab)

    p = sub.add_parser("pretrain", help="train an encoder from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--log", help="JSONL training log")
    _add_config_flags(p, "pretrain")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a checkpoint to a target domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--target", required=True, help="target-domain JSONL")
    p.add_argument("--source", help="source-domain JSONL (mixed strategy)")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="JSONL training log")
    _add_config_flags(p, "finetune")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("evaluate", help="recall@k over sampled candidate sets")
    p.add_argument("--data", required=True, help="test JSONL")
    p.add_argument("--checkpoint", help="encoder checkpoint (vector rankers)")
    p.add_argument("--vocab", help="vocabulary TSV (vector rankers)")
    p.add_argument("--map-checkpoint", help="map checkpoint (--ranker map)")
    p.add_argument("--report", help="write the JSON report here (default stdout)")
    _add_config_flags(p, "evaluate")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("index", help="encode responses and build a search index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True, help="JSONL whose responses get indexed")
    p.add_argument("--out", required=True)
    _add_config_flags(p, "index")
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("query", help="interactive top-k retrieval from stdin")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index", required=True)
    _add_config_flags(p, "query")
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("export-embeddings", help="write (id, text, vector) TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, "export-embeddings")
    p.set_defaults(func=_cmd_export_embeddings)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures get exit code 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
