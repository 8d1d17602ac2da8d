"""Keyword and vector baselines.

TF-IDF and Okapi BM25 rank candidates by lexical overlap with the query;
SIM ranks by plain cosine of precomputed vectors; MAP learns a linear
response-space mapping ``(W + alpha*I)`` on top of fixed vectors, trained
with the same in-batch-negatives objective as the encoder.
"""

from __future__ import annotations

import dataclasses
import math
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nm
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .numerics import ParamStore, Tape
from .training import batch_loss

MAP_CHECKPOINT_KIND = "map"


@dataclasses.dataclass
class KeywordIndexStats:
    """Document-frequency statistics over a candidate pool."""

    doc_freqs: dict[str, int]
    doc_lengths: list[int]
    avg_doc_length: float
    n_docs: int


def build_keyword_stats(docs: Sequence[Sequence[str]]) -> KeywordIndexStats:
    if not docs:
        raise ValueError("empty candidate set")
    doc_freqs: Counter[str] = Counter()
    lengths = []
    for doc in docs:
        doc_freqs.update(set(doc))
        lengths.append(len(doc))
    return KeywordIndexStats(
        doc_freqs=dict(doc_freqs),
        doc_lengths=lengths,
        avg_doc_length=sum(lengths) / len(lengths),
        n_docs=len(docs),
    )


def _ranked(scores: list[float]) -> list[tuple[int, float]]:
    # Descending score, ties broken by candidate id.
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [(i, scores[i]) for i in order]


def tfidf_scores(
    query: Sequence[str], candidates: Sequence[Sequence[str]], stats: KeywordIndexStats
) -> list[float]:
    if not candidates:
        raise ValueError("empty candidate set")
    n = stats.n_docs
    idf = {
        t: math.log((n + 1) / (stats.doc_freqs.get(t, 0) + 1)) + 1.0
        for t in set(query)
    }
    scores = []
    for doc in candidates:
        tf = Counter(doc)
        scores.append(sum(tf[t] * idf[t] for t in idf if tf[t] > 0))
    return scores


def tfidf_rank(
    query: Sequence[str], candidates: Sequence[Sequence[str]], stats: KeywordIndexStats
) -> list[tuple[int, float]]:
    return _ranked(tfidf_scores(query, candidates, stats))


def bm25_scores(
    query: Sequence[str],
    candidates: Sequence[Sequence[str]],
    stats: KeywordIndexStats,
    k1: float = 1.2,
    b: float = 0.75,
) -> list[float]:
    if not candidates:
        raise ValueError("empty candidate set")
    if k1 <= 0 or not 0 <= b <= 1:
        raise ValueError("require k1 > 0 and 0 <= b <= 1")
    n = stats.n_docs
    idf = {
        t: math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        for t in set(query)
        for df in (stats.doc_freqs.get(t, 0),)
    }
    scores = []
    for doc in candidates:
        tf = Counter(doc)
        norm = k1 * (1.0 - b + b * len(doc) / stats.avg_doc_length)
        score = 0.0
        for t, w in idf.items():
            f = tf[t]
            if f > 0:
                score += w * f * (k1 + 1.0) / (f + norm)
        scores.append(score)
    return scores


def bm25_rank(
    query: Sequence[str],
    candidates: Sequence[Sequence[str]],
    stats: KeywordIndexStats,
    k1: float = 1.2,
    b: float = 0.75,
) -> list[tuple[int, float]]:
    return _ranked(bm25_scores(query, candidates, stats, k1, b))


def sim_rank(query_vec: np.ndarray, candidate_vecs: np.ndarray) -> list[tuple[int, float]]:
    """Rank candidate vectors by cosine similarity with the query vector."""
    query_vec = np.asarray(query_vec, dtype=np.float64)
    candidate_vecs = np.asarray(candidate_vecs, dtype=np.float64)
    qn = np.linalg.norm(query_vec)
    cn = np.linalg.norm(candidate_vecs, axis=1)
    if qn == 0.0 or np.any(cn == 0.0):
        raise ValueError("zero vector in cosine ranking")
    sims = candidate_vecs @ query_vec / (cn * qn)
    return _ranked(list(sims))


# ---------------------------------------------------------------------------
# MAP: learned linear response mapping
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class MapParams:
    weight: np.ndarray  # (out_dim, out_dim)
    alpha: float

    def mapped(self, response_vecs: np.ndarray) -> np.ndarray:
        """(W + alpha*I) applied to each row."""
        return response_vecs @ self.weight.T + self.alpha * response_vecs


def map_score(hx: np.ndarray, hy: np.ndarray, params: MapParams) -> float:
    """Cosine of the query vector with the mapped response vector."""
    mapped = params.weight @ np.asarray(hy, dtype=np.float64) + params.alpha * np.asarray(
        hy, dtype=np.float64
    )
    nx = np.linalg.norm(hx)
    nm_ = np.linalg.norm(mapped)
    if nx == 0.0 or nm_ == 0.0:
        raise ValueError("zero vector in map_score")
    return float(np.asarray(hx, dtype=np.float64) @ mapped / (nx * nm_))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero vector among training pairs")
    return x / norms


def _map_batch_loss(
    weight: nm.Node | None,
    alpha: nm.Node | None,
    hx: np.ndarray,
    hy: np.ndarray,
    params: MapParams | None = None,
) -> tuple[float, np.ndarray | None, float | None]:
    """Loss of one batch; gradients for (weight, alpha) when nodes given."""
    tape: Tape | None = Tape() if weight is not None else None
    if weight is None:
        mapped = nm.Node(params.mapped(hy).astype(np.float32))
    else:
        wt = nm.transpose(tape, weight)
        mapped = nm.add(tape, nm.matmul(tape, hy, wt), nm.mul(tape, hy, alpha))
    mapped_n = nm.l2_normalize(tape, mapped)
    scores = nm.matmul(tape, hx, nm.transpose(tape, mapped_n))
    loss, grad_scores = batch_loss(scores.value, smoothing_mass=1.0)
    if weight is None:
        return loss, None, None
    tape.backward(scores, grad_scores)
    return loss, weight.grad, float(alpha.grad) if alpha.grad is not None else 0.0


def train_map(
    query_vecs: np.ndarray,
    response_vecs: np.ndarray,
    sample_size: int = 10_000,
    batch_size: int = 50,
    epochs: int = 20,
    seed: int = 0,
    lr_grid: Sequence[float] = (0.3, 0.1, 0.03),
    reg_grid: Sequence[float] = (0.0, 1e-3, 1e-2),
    dev_fraction: float = 0.1,
) -> MapParams:
    """Fit W and alpha on a random sample of training pairs.

    Vectors are l2-normalized first. Initialization is the identity mapping
    (W=0, alpha=1); L2 regularization pulls back toward it. Learning rate
    and regularization strength are picked by held-out development loss.
    """
    query_vecs = np.asarray(query_vecs, dtype=np.float32)
    response_vecs = np.asarray(response_vecs, dtype=np.float32)
    if query_vecs.shape != response_vecs.shape or query_vecs.ndim != 2:
        raise ValueError(
            f"expected matching (n, dim) arrays, got {query_vecs.shape} and "
            f"{response_vecs.shape}"
        )
    n, dim = query_vecs.shape
    if n < 2:
        raise ValueError("need at least 2 training pairs")

    rng = np.random.Generator(np.random.PCG64(seed))
    take = rng.permutation(n)[: min(n, sample_size)]
    hx = _normalize_rows(query_vecs[take].astype(np.float64)).astype(np.float32)
    hy = _normalize_rows(response_vecs[take].astype(np.float64)).astype(np.float32)
    n_dev = max(1, int(len(take) * dev_fraction))
    dev_x, dev_y = hx[:n_dev], hy[:n_dev]
    tr_x, tr_y = hx[n_dev:], hy[n_dev:]
    if len(tr_x) < 2:
        tr_x, tr_y = hx, hy

    def dev_loss(candidate: MapParams) -> float:
        total, count = 0.0, 0
        for start in range(0, len(dev_x), batch_size):
            bx, by = dev_x[start : start + batch_size], dev_y[start : start + batch_size]
            if len(bx) < 2:
                continue
            loss, _, _ = _map_batch_loss(None, None, bx, by, params=candidate)
            total += loss * len(bx)
            count += len(bx)
        return total / max(count, 1)

    best: tuple[float, MapParams] | None = None
    for lr in lr_grid:
        for reg in reg_grid:
            run_rng = np.random.Generator(np.random.PCG64(seed + 1))
            store = ParamStore()
            weight = store.add("weight", np.zeros((dim, dim), dtype=np.float32))
            alpha = store.add("alpha", np.ones((), dtype=np.float32))
            for _ in range(epochs):
                order = run_rng.permutation(len(tr_x))
                for start in range(0, len(order) - 1, batch_size):
                    idx = order[start : start + batch_size]
                    if len(idx) < 2:
                        continue
                    _, gw, ga = _map_batch_loss(weight, alpha, tr_x[idx], tr_y[idx])
                    weight.value -= lr * (gw + 2.0 * reg * weight.value)
                    alpha.value -= lr * (ga + 2.0 * reg * (float(alpha.value) - 1.0))
                    store.zero_grads()
            candidate = MapParams(
                weight=weight.value.astype(np.float64), alpha=float(alpha.value)
            )
            score = dev_loss(candidate)
            if best is None or score < best[0]:
                best = (score, candidate)
    return best[1]


def save_map(
    path: str | Path, params: MapParams, vocab_fingerprint: int = 0
) -> None:
    store = ParamStore()
    store.add("weight", params.weight.astype(np.float32))
    store.add("alpha", np.asarray(params.alpha, dtype=np.float32))
    save_checkpoint(
        path,
        MAP_CHECKPOINT_KIND,
        {"out_dim": int(params.weight.shape[0])},
        store,
        vocab_fingerprint,
    )


def load_map(path: str | Path) -> tuple[MapParams, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != MAP_CHECKPOINT_KIND:
        raise ValueError(f"{path}: checkpoint kind {ckpt.kind!r}, expected map")
    return (
        MapParams(
            weight=ckpt.params["weight"].value.astype(np.float64),
            alpha=float(ckpt.params["alpha"].value),
        ),
        ckpt,
    )


# ---------------------------------------------------------------------------
# Ranker adapters for the evaluation protocol
# ---------------------------------------------------------------------------


def _content_tokens(text: str) -> list[str]:
    from .textpipe import normalize

    return normalize(text)[1:-1]


class _KeywordRanker:
    """Shared plumbing for TF-IDF/BM25 rankers.

    Statistics come from each instance's candidate pool by default; pass
    ``corpus`` for global statistics over a fixed response collection.
    """

    def __init__(self, corpus: Sequence[str] | None = None) -> None:
        self._global_stats = None
        if corpus is not None:
            self._global_stats = build_keyword_stats(
                [_content_tokens(doc) for doc in corpus]
            )
        self._token_cache: dict[str, list[str]] = {}

    def _tokens(self, text: str) -> list[str]:
        toks = self._token_cache.get(text)
        if toks is None:
            toks = _content_tokens(text)
            self._token_cache[text] = toks
        return toks

    def score_candidates(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        docs = [self._tokens(c) for c in candidates]
        stats = self._global_stats or build_keyword_stats(docs)
        return np.asarray(self._score(self._tokens(query), docs, stats))

    def _score(self, query, docs, stats) -> list[float]:
        raise NotImplementedError


class TfidfRanker(_KeywordRanker):
    ranker_id = "tfidf"

    def _score(self, query, docs, stats):
        return tfidf_scores(query, docs, stats)


class Bm25Ranker(_KeywordRanker):
    ranker_id = "bm25"

    def __init__(
        self, corpus: Sequence[str] | None = None, k1: float = 1.2, b: float = 0.75
    ) -> None:
        super().__init__(corpus)
        self.k1 = k1
        self.b = b

    def _score(self, query, docs, stats):
        return bm25_scores(query, docs, stats, self.k1, self.b)


class _VectorRanker:
    """Base for rankers over a text-to-vector embedding function.

    ``embed(text, side)`` must return a fixed-dimension vector; vectors are
    cached per (side, text).
    """

    def __init__(self, embed) -> None:
        self._embed = embed
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def _vector(self, text: str, side: str) -> np.ndarray:
        key = (side, text)
        vec = self._cache.get(key)
        if vec is None:
            vec = np.asarray(self._embed(text, side), dtype=np.float64)
            self._cache[key] = vec
        return vec


class SimRanker(_VectorRanker):
    """Plain cosine ranking of candidate vectors against the query vector."""

    ranker_id = "sim"

    def score_candidates(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        q = self._vector(query, "input")
        mat = np.stack([self._vector(c, "response") for c in candidates])
        ranked = sim_rank(q, mat)
        scores = np.empty(len(candidates))
        for idx, score in ranked:
            scores[idx] = score
        return scores


class MapRanker(_VectorRanker):
    """Cosine against linearly mapped response vectors."""

    ranker_id = "map"

    def __init__(self, embed, params: MapParams) -> None:
        super().__init__(embed)
        self.params = params

    def score_candidates(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        q = self._vector(query, "input")
        qn = np.linalg.norm(q)
        if qn == 0.0:
            raise ValueError("zero query vector")
        mat = np.stack([self._vector(c, "response") for c in candidates])
        mapped = self.params.mapped(mat)
        norms = np.linalg.norm(mapped, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("zero mapped vector")
        return mapped @ q / (norms * qn)
