"""Text preprocessing: normalization, vocabularies, n-gram feature ids.

The whole pipeline is deterministic. Raw text is lowercased and tokenized,
long digit runs and overlong words are wildcarded, boundary tokens are
affixed, and texts become two id sequences (unigrams, bigrams) over a
vocabulary with hash-bucketed out-of-vocabulary ids.

Also hosts the JSONL dataset format, the vocabulary TSV format, and a
synthetic corpus generator for desk-scale experiments.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .hashing import Fingerprinter, bucket_for

BOS = "<s>"
EOS = "</s>"
LONGWORD = "longword"
MAX_TOKEN_CHARS = 16
DEFAULT_OOV_BUCKETS = 50_000

# Words, punctuation runs, and the two boundary tokens kept atomic so that
# normalize() is idempotent on its own output.
_TOKEN_RE = re.compile(r"</?s>|\w+|[^\w\s]+")
_DIGIT_RUN_RE = re.compile(r"\d{5,}")

NormalizedText = list[str]


@dataclasses.dataclass(frozen=True)
class DialoguePair:
    """One (input, response) training or evaluation pair."""

    input: str
    response: str
    origin: str = ""


@dataclasses.dataclass(frozen=True)
class FeatureIds:
    """A text rendered as unigram and bigram id sequences.

    Ids live in a single space: unigram table ids first, then bigram table
    ids, then the shared OOV bucket range.
    """

    unigrams: np.ndarray
    bigrams: np.ndarray


def tokenize(text: str) -> list[str]:
    """Split on whitespace, detaching punctuation runs as their own tokens."""
    return _TOKEN_RE.findall(text)


def _wildcard(token: str) -> str:
    token = _DIGIT_RUN_RE.sub(lambda m: "#" * len(m.group()), token)
    if len(token) > MAX_TOKEN_CHARS and token not in (BOS, EOS):
        return LONGWORD
    return token


def normalize(raw: str) -> NormalizedText:
    """Lowercase, tokenize, wildcard, and wrap a text in boundary tokens.

    Digit runs of five or more get each digit replaced by ``#`` (length is
    preserved); tokens longer than 16 characters become ``longword``. A
    leading ``<s>`` / trailing ``</s>`` already present are stripped before
    re-affixing, which makes the function idempotent.
    """
    tokens = [_wildcard(t) for t in tokenize(raw.lower())]
    if tokens and tokens[0] == BOS:
        tokens = tokens[1:]
    if tokens and tokens[-1] == EOS:
        tokens = tokens[:-1]
    return [BOS] + tokens + [EOS]


def content_length(tokens: Sequence[str]) -> int:
    """Token count excluding the two boundary tokens."""
    return len(tokens) - 2


def filter_pair(pair: DialoguePair) -> bool:
    """Pretraining admission filter: both sides strictly between 8 and 128
    content tokens (boundary tokens excluded)."""
    for text in (pair.input, pair.response):
        n = content_length(normalize(text))
        if not 8 < n < 128:
            return False
    return True


def truncate_tokens(tokens: NormalizedText, max_len: int = 128) -> NormalizedText:
    """Cap a normalized token list at ``max_len`` tokens, keeping ``</s>``."""
    if len(tokens) <= max_len:
        return list(tokens)
    return list(tokens[: max_len - 1]) + [EOS]


@dataclasses.dataclass
class Vocabulary:
    """Unigram/bigram id tables plus the OOV bucket count.

    Id layout is three dense disjoint ranges: unigram ids ``[0, U)``,
    bigram ids ``[U, U+B)``, OOV bucket ids ``[U+B, U+B+oov_buckets)``.
    The bucket range is shared by OOV unigrams and OOV bigrams; the two
    n-gram orders keep separate embedding tables downstream.
    """

    unigram_ids: dict[str, int]
    bigram_ids: dict[tuple[str, str], int]
    oov_buckets: int = DEFAULT_OOV_BUCKETS
    min_unigram_count: int = 10
    max_bigrams: int = 200_000

    @property
    def n_unigrams(self) -> int:
        return len(self.unigram_ids)

    @property
    def n_bigrams(self) -> int:
        return len(self.bigram_ids)

    @property
    def bucket_base(self) -> int:
        return self.n_unigrams + self.n_bigrams

    @property
    def n_ids(self) -> int:
        return self.bucket_base + self.oov_buckets

    def fingerprint(self) -> int:
        """Stable content hash, embedded in checkpoints and indexes."""
        fp = Fingerprinter()
        fp.update(
            f"vocab:{self.min_unigram_count}:{self.max_bigrams}:{self.oov_buckets}\n"
        )
        for token, idx in sorted(self.unigram_ids.items(), key=lambda kv: kv[1]):
            fp.update(f"u\t{token}\t{idx}\n")
        for (a, b), idx in sorted(self.bigram_ids.items(), key=lambda kv: kv[1]):
            fp.update(f"b\t{a} {b}\t{idx}\n")
        return fp.digest()


def featurize(tokens: NormalizedText, vocab: Vocabulary) -> FeatureIds:
    """Map a normalized token list to unigram/bigram ids.

    In-vocabulary n-grams take their table id; everything else hashes into
    the OOV bucket range, stably across runs and machines.
    """
    base = vocab.bucket_base
    oov = vocab.oov_buckets
    uids = vocab.unigram_ids
    bids = vocab.bigram_ids
    uni = [uids[t] if t in uids else base + bucket_for(t, oov) for t in tokens]
    big = [
        bids[p] if (p := (a, b)) in bids else base + bucket_for(f"{a} {b}", oov)
        for a, b in zip(tokens, tokens[1:])
    ]
    return FeatureIds(
        unigrams=np.asarray(uni, dtype=np.int32),
        bigrams=np.asarray(big, dtype=np.int32),
    )


def build_vocab(
    pairs: Iterable[DialoguePair],
    sample_size: int,
    min_count: int = 10,
    max_bigrams: int = 200_000,
    oov_buckets: int = DEFAULT_OOV_BUCKETS,
    seed: int = 0,
) -> Vocabulary:
    """Count n-grams over a uniform sample of pairs and freeze the tables.

    Both sides of each pair are counted, boundary tokens included. Unigrams
    keep everything with frequency >= ``min_count``; bigrams keep the
    ``max_bigrams`` most frequent, ties broken lexicographically. Uniform
    sampling from the stream is reservoir sampling with the given seed.
    """
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    reservoir: list[DialoguePair] = []
    n_seen = 0
    for pair in pairs:
        if n_seen < sample_size:
            reservoir.append(pair)
        else:
            j = int(rng.integers(0, n_seen + 1))
            if j < sample_size:
                reservoir[j] = pair
        n_seen += 1
    if n_seen == 0:
        raise ValueError("empty corpus")

    uni_counts: Counter[str] = Counter()
    big_counts: Counter[tuple[str, str]] = Counter()
    for pair in reservoir:
        for text in (pair.input, pair.response):
            toks = normalize(text)
            uni_counts.update(toks)
            big_counts.update(zip(toks, toks[1:]))

    kept_unis = sorted(
        (t for t, c in uni_counts.items() if c >= min_count),
        key=lambda t: (-uni_counts[t], t),
    )
    unigram_ids = {t: i for i, t in enumerate(kept_unis)}
    kept_bigs = sorted(big_counts, key=lambda p: (-big_counts[p], p))[:max_bigrams]
    base = len(unigram_ids)
    bigram_ids = {p: base + i for i, p in enumerate(kept_bigs)}
    return Vocabulary(
        unigram_ids=unigram_ids,
        bigram_ids=bigram_ids,
        oov_buckets=oov_buckets,
        min_unigram_count=min_count,
        max_bigrams=max_bigrams,
    )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_BIGRAM_MARKER = "##bigrams"


def save_vocab_tsv(vocab: Vocabulary, path: str | Path) -> None:
    """Write the TSV vocabulary file: header, unigram section, ``##bigrams``
    marker, bigram section."""
    lines = [
        "##vocab\tmin_count=%d\tmax_bigrams=%d\toov_buckets=%d"
        % (vocab.min_unigram_count, vocab.max_bigrams, vocab.oov_buckets)
    ]
    for token, idx in sorted(vocab.unigram_ids.items(), key=lambda kv: kv[1]):
        lines.append(f"{token}\t{idx}")
    lines.append(_BIGRAM_MARKER)
    for (a, b), idx in sorted(vocab.bigram_ids.items(), key=lambda kv: kv[1]):
        lines.append(f"{a} {b}\t{idx}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab_tsv(path: str | Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("##vocab\t"):
        raise ValueError(f"{path}: not a vocabulary file (missing ##vocab header)")
    header: dict[str, int] = {}
    for field in lines[0].split("\t")[1:]:
        key, _, value = field.partition("=")
        header[key] = int(value)
    unigram_ids: dict[str, int] = {}
    bigram_ids: dict[tuple[str, str], int] = {}
    in_bigrams = False
    for lineno, line in enumerate(lines[1:], start=2):
        if line == _BIGRAM_MARKER:
            in_bigrams = True
            continue
        if not line:
            continue
        token, _, idx = line.rpartition("\t")
        if not token:
            raise ValueError(f"{path}:{lineno}: malformed vocabulary line")
        if in_bigrams:
            a, _, b = token.partition(" ")
            bigram_ids[(a, b)] = int(idx)
        else:
            unigram_ids[token] = int(idx)
    return Vocabulary(
        unigram_ids=unigram_ids,
        bigram_ids=bigram_ids,
        oov_buckets=header["oov_buckets"],
        min_unigram_count=header["min_count"],
        max_bigrams=header["max_bigrams"],
    )


def read_pairs_jsonl(path: str | Path) -> list[DialoguePair]:
    """Load a dataset: one JSON object per line with ``input``, ``response``
    and optional ``origin`` fields."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "input" not in obj or "response" not in obj:
                raise ValueError(f"{path}:{lineno}: missing input/response field")
            pair = DialoguePair(
                input=obj["input"],
                response=obj["response"],
                origin=obj.get("origin", ""),
            )
            if (
                content_length(normalize(pair.input)) == 0
                or content_length(normalize(pair.response)) == 0
            ):
                raise ValueError(f"{path}:{lineno}: empty text after normalization")
            pairs.append(pair)
    return pairs


def write_pairs_jsonl(pairs: Iterable[DialoguePair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            obj = {"input": pair.input, "response": pair.response}
            if pair.origin:
                obj["origin"] = pair.origin
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------
#
# Desk-scale stand-in for a large conversational corpus. Each topic is a
# secret bijection between a "left" and a "right" half of the token
# universe; texts are sequences of (left, matched-right) chunks, emitted
# either adjacently or with filler tokens in between. Unigram marginals are
# uniform across topics, so a ranker must model token co-occurrence
# (adjacent pairs or longer-range pairs) to identify the topic. An optional
# pair-specific "detail" chunk appears on both sides of a pair and gives a
# within-topic matching signal.

_DOMAIN_CODES = {"source": 0, "target": 1}


def _letters(i: int) -> str:
    # Base-26 letter encoding; avoids digits so normalization never rewrites
    # synthetic tokens.
    out = []
    i += 1
    while i > 0:
        i, r = divmod(i - 1, 26)
        out.append(chr(ord("a") + r))
    return "".join(reversed(out))


def _token(i: int) -> str:
    return "w" + _letters(i)


def _topic_matching(n_left: int, seed: int, domain_code: int, topic: int) -> tuple[int, int]:
    """Affine bijection parameters (a, b) over [0, n_left) for one topic."""
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(domain_code, topic)))
    )
    while True:
        a = int(rng.integers(1, n_left))
        if math.gcd(a, n_left) == 1:
            break
    b = int(rng.integers(0, n_left))
    return a, b


def generate_synthetic_corpus(
    n_topics: int,
    pairs_per_topic: int,
    vocab_size: int,
    seed: int,
    domain: str = "source",
    detail_chunks: bool = True,
    min_chunks: int = 5,
    max_chunks: int = 8,
    separated_fraction: float = 0.5,
) -> list[DialoguePair]:
    """Generate (input, response) pairs with latent topic structure.

    ``domain="target"`` draws a different set of topic bijections from the
    same token universe, shifting the co-occurrence distribution while
    keeping unigram marginals in place. Deterministic given the arguments.
    """
    if min(n_topics, pairs_per_topic, vocab_size) < 1:
        raise ValueError("all counts must be >= 1")
    if vocab_size < 16:
        raise ValueError("vocab_size must be >= 16")
    if domain not in _DOMAIN_CODES:
        raise ValueError(f"unknown domain {domain!r} (source|target)")
    dcode = _DOMAIN_CODES[domain]

    n_filler = max(4, vocab_size // 64)
    n_left = (vocab_size - n_filler) // 2
    left0, right0, filler0 = 0, n_left, 2 * n_left
    matchings = [
        _topic_matching(n_left, seed, dcode, t) for t in range(n_topics)
    ]

    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(dcode, 1 << 20)))
    )

    def chunk(topic: int, li: int, separated: bool) -> list[str]:
        a, b = matchings[topic]
        ri = right0 + (a * li + b) % n_left
        if separated:
            fillers = [
                _token(filler0 + int(rng.integers(0, n_filler)))
                for _ in range(int(rng.integers(1, 3)))
            ]
            return [_token(left0 + li), *fillers, _token(ri)]
        return [_token(left0 + li), _token(ri)]

    def text(topic: int, detail: list[str] | None) -> str:
        n_chunks = int(rng.integers(min_chunks, max_chunks + 1))
        chunks = [
            chunk(topic, int(rng.integers(0, n_left)), rng.random() < separated_fraction)
            for _ in range(n_chunks)
        ]
        if detail is not None:
            chunks.insert(int(rng.integers(0, len(chunks) + 1)), detail)
        return " ".join(t for c in chunks for t in c)

    pairs = []
    for topic in range(n_topics):
        for _ in range(pairs_per_topic):
            detail = None
            if detail_chunks:
                detail = chunk(topic, int(rng.integers(0, n_left)), separated=False)
            pairs.append(
                DialoguePair(
                    input=text(topic, detail),
                    response=text(topic, detail),
                    origin=domain,
                )
            )
    return pairs


def synthetic_topic_of(pair_index: int, pairs_per_topic: int) -> int:
    """Topic id of the i-th generated pair (pairs are emitted topic-major)."""
    return pair_index // pairs_per_topic
