"""The dual-encoder model.

Each text becomes n-gram embeddings, gets positional embeddings and
(optionally) single-head self-attention per n-gram order, is summed and
divided by the square root of the sequence length, averaged across orders,
and pushed through a per-side feed-forward tower into the final output
space. Pair relevance is scaled cosine similarity with a learned scale
bounded by the square root of the output dimension.

Embedding and positional tables are shared between the input and response
sides; attention projections and towers are per-side (unless
``shared_towers`` is set).
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import numerics as nm
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .numerics import Node, ParamStore, Tape
from .textpipe import FeatureIds, Vocabulary

SideTag = Literal["input", "response"]
SIDES: tuple[SideTag, SideTag] = ("input", "response")

CHECKPOINT_KIND = "encoder"


@dataclasses.dataclass
class EncoderConfig:
    """Architecture hyperparameters plus the vocabulary id layout.

    The id layout fields (``n_unigram_ids``, ``n_bigram_ids``,
    ``oov_buckets``) pin the embedding table shapes so a serialized config
    fully determines the parameter set.
    """

    embed_dim: int = 320
    hidden_layers: int = 3
    hidden_dim: int = 1024
    out_dim: int = 512
    attn_dim: int = 64
    max_positions: int = 128
    activation: str = "swish"
    use_self_attention: bool = True
    use_bigrams: bool = True
    shared_towers: bool = False
    n_unigram_ids: int = 0
    n_bigram_ids: int = 0
    oov_buckets: int = 0

    def __post_init__(self) -> None:
        for field in ("embed_dim", "hidden_dim", "out_dim", "attn_dim", "max_positions"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.activation not in ("swish", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r} (swish|tanh)")

    @classmethod
    def for_vocab(cls, vocab: Vocabulary, **kwargs) -> "EncoderConfig":
        return cls(
            n_unigram_ids=vocab.n_unigrams,
            n_bigram_ids=vocab.n_bigrams,
            oov_buckets=vocab.oov_buckets,
            **kwargs,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        return cls(**obj)


def _tower_key(config: EncoderConfig, side: SideTag) -> str:
    return "shared" if config.shared_towers else side


# Transform weights need roughly variance-preserving forward signal: with
# uniform(+-1/sqrt(fan_in)) each affine+swish stage shrinks activations ~4x,
# the towers emit near-zero vectors, and SGD falls into a stationary
# all-scores-equal collapse it cannot leave. sqrt(6/fan_in) keeps layer
# output variance near its input variance.
_TRANSFORM_GAIN = math.sqrt(6.0)


def init_params(config: EncoderConfig, seed: int = 0) -> ParamStore:
    """Seeded uniform init: +-1/sqrt(fan_in) for embedding/positional
    tables, +-sqrt(6/fan_in) for attention and tower weights, zero biases."""
    if config.n_unigram_ids < 1 and config.oov_buckets < 1:
        raise ValueError("config has no vocabulary layout (use for_vocab)")
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore()

    def uniform(name: str, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> None:
        bound = gain / math.sqrt(fan_in)
        store.add(
            name, rng.uniform(-bound, bound, size=shape).astype(np.float32)
        )

    dim = config.embed_dim
    uniform("embeddings/unigram", (config.n_unigram_ids + config.oov_buckets, dim), dim)
    uniform("positional/unigram", (config.max_positions, dim), dim)
    if config.use_bigrams:
        uniform("embeddings/bigram", (config.n_bigram_ids + config.oov_buckets, dim), dim)
        uniform("positional/bigram", (config.max_positions, dim), dim)

    orders = ("unigram", "bigram") if config.use_bigrams else ("unigram",)
    if config.use_self_attention:
        for order in orders:
            for side in SIDES:
                uniform(
                    f"attention/{order}/{side}/wq",
                    (dim, config.attn_dim),
                    dim,
                    _TRANSFORM_GAIN,
                )
                uniform(
                    f"attention/{order}/{side}/wk",
                    (dim, config.attn_dim),
                    dim,
                    _TRANSFORM_GAIN,
                )
                uniform(
                    f"attention/{order}/{side}/wv", (dim, dim), dim, _TRANSFORM_GAIN
                )

    tower_keys = ("shared",) if config.shared_towers else SIDES
    for key in tower_keys:
        in_dim = dim
        for layer in range(config.hidden_layers):
            uniform(
                f"tower/{key}/layer{layer}/w",
                (in_dim, config.hidden_dim),
                in_dim,
                _TRANSFORM_GAIN,
            )
            store.add(f"tower/{key}/layer{layer}/b", np.zeros(config.hidden_dim, np.float32))
            in_dim = config.hidden_dim
        uniform(f"tower/{key}/out/w", (in_dim, config.out_dim), in_dim, _TRANSFORM_GAIN)
        store.add(f"tower/{key}/out/b", np.zeros(config.out_dim, np.float32))

    store.add("scale_raw", np.zeros((), dtype=np.float32))
    return store


def _table_rows(ids: np.ndarray, order: str, config: EncoderConfig) -> np.ndarray:
    """Translate global feature ids into per-order embedding table rows.

    Global layout: unigram table ids, then bigram table ids, then the shared
    OOV bucket range. Each order's table holds its vocabulary rows followed
    by its own copy of the bucket rows.
    """
    n_uni, n_big = config.n_unigram_ids, config.n_bigram_ids
    bucket_base = n_uni + n_big
    rows = np.asarray(ids, dtype=np.int64).copy()
    oov = rows >= bucket_base
    if order == "unigram":
        rows[oov] = n_uni + (rows[oov] - bucket_base)
        in_table = ~oov & (rows < n_uni)
    else:
        rows[oov] = n_big + (rows[oov] - bucket_base)
        in_table = ~oov
        rows[in_table] -= n_uni
        in_table &= (rows >= 0) & (rows < n_big)
    if not np.all(in_table | oov):
        raise ValueError(f"feature ids out of range for {order} table")
    return rows


def scale_node(tape: Tape | None, params: ParamStore, config: EncoderConfig) -> Node:
    """Learned score scale, constrained to (0, sqrt(out_dim)) via a sigmoid."""
    return nm.scale_by(
        tape, nm.sigmoid(tape, params["scale_raw"]), math.sqrt(config.out_dim)
    )


def scale_value(params: ParamStore, config: EncoderConfig) -> float:
    return float(scale_node(None, params, config).value)


def _check_length(n: int, order: str, config: EncoderConfig) -> None:
    if n == 0:
        raise ValueError(f"empty {order} sequence")
    if n > config.max_positions:
        raise ValueError(
            f"{order} sequence of length {n} exceeds max_positions="
            f"{config.max_positions}; truncate before encoding"
        )


def embed_and_reduce(
    tape: Tape | None,
    features: FeatureIds,
    params: ParamStore,
    config: EncoderConfig,
    side: SideTag,
) -> Node:
    """Per-order embed + positional + attention + sqrt-length reduction,
    averaged across orders, giving the pre-tower text vector."""
    orders = ("unigram", "bigram") if config.use_bigrams else ("unigram",)
    reduced = []
    for order in orders:
        ids = features.unigrams if order == "unigram" else features.bigrams
        n = len(ids)
        _check_length(n, order, config)
        rows = _table_rows(ids, order, config)
        x = nm.embedding_gather(tape, params[f"embeddings/{order}"], rows)
        x = nm.add_positional(tape, x, params[f"positional/{order}"])
        if config.use_self_attention:
            x = nm.single_head_attention(
                tape,
                x,
                params[f"attention/{order}/{side}/wq"],
                params[f"attention/{order}/{side}/wk"],
                params[f"attention/{order}/{side}/wv"],
            )
        reduced.append(nm.scale_by(tape, nm.sum_rows(tape, x), 1.0 / math.sqrt(n)))
    if len(reduced) == 1:
        return reduced[0]
    return nm.mean(tape, reduced)


def _reduce_order_grouped(
    tape: Tape | None,
    seqs: list[np.ndarray],
    order: str,
    params: ParamStore,
    config: EncoderConfig,
    side: SideTag,
) -> Node:
    """Batched reduction for one n-gram order.

    Sequences of equal length are stacked into (group, length, dim) tensors
    so the whole group runs through gather/attention/reduction as a handful
    of array ops; results are re-permuted into the caller's order.
    """
    groups: dict[int, list[int]] = {}
    for i, seq in enumerate(seqs):
        _check_length(len(seq), order, config)
        groups.setdefault(len(seq), []).append(i)
    parts = []
    origin: list[int] = []
    for n, idxs in sorted(groups.items()):
        ids = _table_rows(np.stack([seqs[i] for i in idxs]), order, config)
        x = nm.embedding_gather(tape, params[f"embeddings/{order}"], ids)
        pos_ids = np.broadcast_to(np.arange(n), (len(idxs), n))
        x = nm.add(tape, x, nm.embedding_gather(tape, params[f"positional/{order}"], pos_ids))
        if config.use_self_attention:
            x = nm.single_head_attention(
                tape,
                x,
                params[f"attention/{order}/{side}/wq"],
                params[f"attention/{order}/{side}/wk"],
                params[f"attention/{order}/{side}/wv"],
            )
        parts.append(nm.scale_by(tape, nm.sum_seq(tape, x), 1.0 / math.sqrt(n)))
        origin.extend(idxs)
    stacked = parts[0] if len(parts) == 1 else nm.concat_rows(tape, parts)
    perm = np.empty(len(seqs), dtype=np.int64)
    perm[np.asarray(origin)] = np.arange(len(seqs))
    if np.array_equal(perm, np.arange(len(seqs))):
        return stacked
    return nm.permute_rows(tape, stacked, perm)


def encode_batch(
    tape: Tape | None,
    features: Sequence[FeatureIds],
    params: ParamStore,
    config: EncoderConfig,
    side: SideTag,
) -> Node:
    """Encode a batch of texts into a (batch, out_dim) matrix node."""
    uni = _reduce_order_grouped(
        tape, [f.unigrams for f in features], "unigram", params, config, side
    )
    if config.use_bigrams:
        big = _reduce_order_grouped(
            tape, [f.bigrams for f in features], "bigram", params, config, side
        )
        x = nm.mean(tape, [uni, big])
    else:
        x = uni
    key = _tower_key(config, side)
    act = nm.swish if config.activation == "swish" else nm.tanh
    for layer in range(config.hidden_layers):
        x = nm.affine(
            tape, x, params[f"tower/{key}/layer{layer}/w"], params[f"tower/{key}/layer{layer}/b"]
        )
        x = act(tape, x)
    return nm.affine(tape, x, params[f"tower/{key}/out/w"], params[f"tower/{key}/out/b"])


def encode(
    features: FeatureIds, params: ParamStore, config: EncoderConfig, side: SideTag
) -> np.ndarray:
    """Encode one text into its out_dim vector (inference only)."""
    return encode_batch(None, [features], params, config, side).value[0]


def score(hx: np.ndarray, hy: np.ndarray, params: ParamStore, config: EncoderConfig) -> float:
    """Scaled cosine similarity of two encoded vectors."""
    nx = float(np.linalg.norm(hx))
    ny = float(np.linalg.norm(hy))
    if nx == 0.0 or ny == 0.0:
        raise ValueError("degenerate encoding: zero vector")
    cos = float(np.dot(hx.astype(np.float64), hy.astype(np.float64)) / (nx * ny))
    return scale_value(params, config) * cos


def score_matrix_node(
    tape: Tape | None,
    inputs: Sequence[FeatureIds],
    responses: Sequence[FeatureIds],
    params: ParamStore,
    config: EncoderConfig,
) -> Node:
    """All-pairs scores: one normalized matrix product scaled by the learned
    constant. Entry (i, j) scores input i against response j."""
    hx = nm.l2_normalize(tape, encode_batch(tape, inputs, params, config, "input"))
    hy = nm.l2_normalize(tape, encode_batch(tape, responses, params, config, "response"))
    raw = nm.matmul(tape, hx, hy, transpose_b=True)
    return nm.mul(tape, raw, scale_node(tape, params, config))


def score_matrix(
    pairs: Sequence[tuple[FeatureIds, FeatureIds]],
    params: ParamStore,
    config: EncoderConfig,
) -> np.ndarray:
    inputs = [p[0] for p in pairs]
    responses = [p[1] for p in pairs]
    return score_matrix_node(None, inputs, responses, params, config).value


def save_encoder(
    path: str | Path,
    config: EncoderConfig,
    params: ParamStore,
    vocab_fingerprint: int,
) -> None:
    save_checkpoint(path, CHECKPOINT_KIND, config.to_dict(), params, vocab_fingerprint)


def load_encoder(
    path: str | Path, vocab: Vocabulary | None = None
) -> tuple[EncoderConfig, ParamStore, Checkpoint]:
    """Load an encoder checkpoint, verifying the vocabulary fingerprint when
    a vocabulary is supplied."""
    ckpt = load_checkpoint(path)
    if ckpt.kind != CHECKPOINT_KIND:
        raise ValueError(f"{path}: checkpoint kind {ckpt.kind!r}, expected encoder")
    if vocab is not None and vocab.fingerprint() != ckpt.vocab_fingerprint:
        raise ValueError(
            f"{path}: vocabulary fingerprint mismatch "
            f"(checkpoint {ckpt.vocab_fingerprint:#x}, vocabulary {vocab.fingerprint():#x})"
        )
    return EncoderConfig.from_dict(ckpt.config), ckpt.params, ckpt
