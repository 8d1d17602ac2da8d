"""Stable 64-bit hashing used for OOV buckets and artifact fingerprints.

Everything here must be reproducible across runs, machines and Python
versions, so the built-in ``hash`` (randomized per process) is off limits.
We use XXH64 with seed 0 throughout.
"""

from __future__ import annotations

import xxhash

HASH_SEED = 0


def stable_hash64(data: str | bytes) -> int:
    """XXH64 digest of ``data`` as an unsigned 64-bit integer."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return xxhash.xxh64_intdigest(data, seed=HASH_SEED)


def bucket_for(ngram: str, n_buckets: int) -> int:
    """Deterministic OOV bucket in ``[0, n_buckets)`` for an n-gram key."""
    if n_buckets <= 0:
        raise ValueError("n_buckets must be positive")
    return stable_hash64(ngram) % n_buckets


class Fingerprinter:
    """Incremental XXH64 fingerprint over a sequence of byte chunks."""

    def __init__(self) -> None:
        self._h = xxhash.xxh64(seed=HASH_SEED)

    def update(self, data: str | bytes) -> "Fingerprinter":
        if isinstance(data, str):
            data = data.encode("utf-8")
        self._h.update(data)
        return self

    def digest(self) -> int:
        return self._h.intdigest()
