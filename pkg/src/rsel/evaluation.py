"""Recall@k evaluation over sampled candidate sets.

Each test query gets its true response plus N-1 distractors sampled
uniformly (seeded, without replacement) from the other distinct test
responses. Rankers score candidates; the true response's rank is computed
pessimistically (score ties count against it). The headline metric is the
fraction of queries whose true response lands in the top k.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from typing import Protocol, Sequence

import numpy as np

from .encoder import EncoderConfig, encode
from .hashing import stable_hash64
from .numerics import ParamStore
from .textpipe import DialoguePair, Vocabulary, featurize, normalize, truncate_tokens


@dataclasses.dataclass
class EvalConfig:
    n_candidates: int = 100
    k: int = 1
    seed: int = 0
    dedupe_inputs: bool = False
    dedupe_responses: bool = False

    def __post_init__(self) -> None:
        if self.n_candidates < 2:
            raise ValueError("n_candidates must be >= 2")
        if not 1 <= self.k <= self.n_candidates:
            raise ValueError("require 1 <= k <= n_candidates")


@dataclasses.dataclass
class CandidateSet:
    input: str
    candidates: list[str]
    true_index: int


@dataclasses.dataclass
class EvalResult:
    recall: float
    ranks: list[int]
    n_queries: int
    ranker_id: str


class Ranker(Protocol):
    ranker_id: str

    def score_candidates(self, query: str, candidates: Sequence[str]) -> np.ndarray: ...


def dedupe_pairs(
    pairs: Sequence[DialoguePair], by_input: bool, by_response: bool
) -> list[DialoguePair]:
    """Collapse duplicate inputs (one-to-many) and/or duplicate responses
    (many-to-one), keeping first occurrences."""
    out = list(pairs)
    if by_input:
        seen: set[str] = set()
        out = [p for p in out if not (p.input in seen or seen.add(p.input))]
    if by_response:
        seen = set()
        out = [p for p in out if not (p.response in seen or seen.add(p.response))]
    return out


def make_candidate_sets(
    pairs: Sequence[DialoguePair], config: EvalConfig
) -> list[CandidateSet]:
    """One candidate set per query: the true response at index 0 plus N-1
    seeded distractors drawn from the other distinct test responses."""
    pairs = dedupe_pairs(pairs, config.dedupe_inputs, config.dedupe_responses)
    pool = sorted({p.response for p in pairs})
    if len(pool) < config.n_candidates:
        raise ValueError(
            f"need at least {config.n_candidates} distinct responses, "
            f"have {len(pool)}"
        )
    pool_index = {text: i for i, text in enumerate(pool)}
    rng = np.random.Generator(np.random.PCG64(config.seed))
    sets = []
    for pair in pairs:
        truth = pool_index[pair.response]
        draws = rng.choice(len(pool) - 1, size=config.n_candidates - 1, replace=False)
        draws = np.where(draws >= truth, draws + 1, draws)
        sets.append(
            CandidateSet(
                input=pair.input,
                candidates=[pair.response] + [pool[i] for i in draws],
                true_index=0,
            )
        )
    return sets


def rank_of_truth(scores: np.ndarray, true_index: int) -> int:
    """Pessimistic rank: every tie with the true response counts above it."""
    scores = np.asarray(scores)
    s_true = scores[true_index]
    above = int((scores > s_true).sum())
    ties = int((scores == s_true).sum()) - 1
    return 1 + above + ties


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    if len(ranks) == 0:
        raise ValueError("empty rank list")
    if any(r < 1 for r in ranks):
        raise ValueError("ranks must be >= 1")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def evaluate(
    ranker: Ranker,
    pairs: Sequence[DialoguePair],
    config: EvalConfig,
    threads: int = 1,
) -> EvalResult:
    """Build candidate sets, rank them, and aggregate recall@k."""
    sets = make_candidate_sets(pairs, config)

    def rank_one(cs: CandidateSet) -> int:
        scores = ranker.score_candidates(cs.input, cs.candidates)
        return rank_of_truth(scores, cs.true_index)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ranks = list(pool.map(rank_one, sets))
    else:
        ranks = [rank_one(cs) for cs in sets]
    return EvalResult(
        recall=recall_at_k(ranks, config.k),
        ranks=ranks,
        n_queries=len(ranks),
        ranker_id=getattr(ranker, "ranker_id", type(ranker).__name__),
    )


def report_dict(
    result: EvalResult,
    config: EvalConfig,
    dataset: str = "",
    include_ranks: bool = False,
    extras: dict | None = None,
) -> dict:
    """Machine-readable evaluation report."""
    report = {
        "dataset": dataset,
        "ranker": result.ranker_id,
        "N": config.n_candidates,
        "k": config.k,
        "seed": config.seed,
        "recall": result.recall,
        "n_queries": result.n_queries,
    }
    if include_ranks:
        report["per_query_ranks"] = list(result.ranks)
    if extras:
        report.update(extras)
    return report


# ---------------------------------------------------------------------------
# Rankers
# ---------------------------------------------------------------------------


class RandomRanker:
    """Chance-level control: seeded random scores, stable per query text."""

    ranker_id = "random"

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed

    def score_candidates(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, stable_hash64(query)]))
        )
        return rng.random(len(candidates))


class EncoderRanker:
    """Scores candidates with the trained dual encoder (scaled cosine)."""

    ranker_id = "encoder"

    def __init__(
        self, params: ParamStore, config: EncoderConfig, vocab: Vocabulary
    ) -> None:
        self.params = params
        self.config = config
        self.vocab = vocab
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def _vector(self, text: str, side: str) -> np.ndarray:
        key = (side, text)
        vec = self._cache.get(key)
        if vec is None:
            feats = featurize(
                truncate_tokens(normalize(text), self.config.max_positions), self.vocab
            )
            vec = encode(feats, self.params, self.config, side)
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                raise ValueError("degenerate encoding: zero vector")
            vec = vec / norm
            self._cache[key] = vec
        return vec

    def score_candidates(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        q = self._vector(query, "input")
        mat = np.stack([self._vector(c, "response") for c in candidates])
        return mat @ q
