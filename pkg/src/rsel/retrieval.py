"""Response retrieval: precomputed vectors, exact top-k search, and an
approximate hierarchical small-world graph index.

Response vectors are encoded once, l2-normalized and stored; cosine
similarity is then a plain dot product. Exact search is a full scan. The
approximate index is a layered neighbor graph searched greedily from a
top-level entry point, trading a little recall for sublinear query cost.
The learned score scale is a monotone constant and is omitted from
ranking.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import math
import struct
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig, encode_batch
from .numerics import ParamStore
from .textpipe import Vocabulary, featurize, normalize, truncate_tokens

INDEX_MAGIC = b"RIDX"
INDEX_VERSION = 1


@dataclasses.dataclass
class IndexBuildConfig:
    max_neighbors: int = 16
    ef_construction: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_neighbors < 1 or self.ef_construction < 1:
            raise ValueError("max_neighbors and ef_construction must be >= 1")


@dataclasses.dataclass
class SearchResult:
    items: list[tuple[int, float]]  # (id, cosine score), scores non-increasing
    query_time: float  # seconds


class HnswGraph:
    """Layered neighbor lists; layer 0 holds every node."""

    def __init__(self, n: int) -> None:
        self.levels = np.zeros(n, dtype=np.int32)
        self.neighbors: list[list[np.ndarray]] = []
        self.entry_point = 0
        self.max_level = 0

    def adjacency(self, level: int) -> list[np.ndarray]:
        return self.neighbors[level]


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float32)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero vector cannot be indexed")
    return vectors / norms


@dataclasses.dataclass
class ResponseIndex:
    vectors: np.ndarray  # (n, dim) float32, unit rows
    payloads: list[str]
    build_config: IndexBuildConfig
    checkpoint_fingerprint: int = 0
    graph: HnswGraph | None = None

    def __len__(self) -> int:
        return len(self.payloads)


# ---------------------------------------------------------------------------
# Graph construction and search
# ---------------------------------------------------------------------------


def _greedy_descent(
    vectors: np.ndarray, adjacency: list[np.ndarray], query: np.ndarray, start: int
) -> int:
    cur = start
    cur_dist = 1.0 - float(vectors[cur] @ query)
    improved = True
    while improved:
        improved = False
        nbrs = adjacency[cur]
        if nbrs.size == 0:
            break
        dists = 1.0 - vectors[nbrs] @ query
        j = int(np.argmin(dists))
        if dists[j] < cur_dist:
            cur = int(nbrs[j])
            cur_dist = float(dists[j])
            improved = True
    return cur


def _search_layer(
    vectors: np.ndarray,
    adjacency: list[np.ndarray],
    query: np.ndarray,
    entry: int,
    ef: int,
    visited: np.ndarray,
) -> list[tuple[float, int]]:
    """Best-first frontier search; returns up to ef (distance, id) ascending."""
    d0 = 1.0 - float(vectors[entry] @ query)
    visited[entry] = True
    candidates = [(d0, entry)]
    results = [(-d0, entry)]
    while candidates:
        dist, node = heapq.heappop(candidates)
        if dist > -results[0][0] and len(results) >= ef:
            break
        nbrs = adjacency[node]
        if nbrs.size == 0:
            continue
        fresh = nbrs[~visited[nbrs]]
        if fresh.size == 0:
            continue
        visited[fresh] = True
        dists = 1.0 - vectors[fresh] @ query
        worst = -results[0][0]
        for dn, nid in zip(dists.tolist(), fresh.tolist()):
            if len(results) < ef or dn < worst:
                heapq.heappush(candidates, (dn, nid))
                heapq.heappush(results, (-dn, nid))
                if len(results) > ef:
                    heapq.heappop(results)
                worst = -results[0][0]
    return sorted((-nd, i) for nd, i in results)


def _select_neighbors(
    vectors: np.ndarray, candidates: list[tuple[float, int]], m: int
) -> list[int]:
    """Diversity heuristic: keep a candidate only if it is closer to the
    query than to every already kept neighbor."""
    selected: list[int] = []
    for dist, node in candidates:
        if len(selected) >= m:
            break
        if selected:
            to_kept = 1.0 - vectors[selected] @ vectors[node]
            if np.min(to_kept) < dist:
                continue
        selected.append(node)
    return selected


def build_graph(
    vectors: np.ndarray, config: IndexBuildConfig
) -> HnswGraph:
    """Insert every vector in id order; deterministic given the seed."""
    n = len(vectors)
    graph = HnswGraph(n)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    mult = 1.0 / math.log(config.max_neighbors)
    levels = np.minimum(
        (-np.log(np.maximum(rng.random(n), 1e-300)) * mult).astype(np.int64), 48
    ).astype(np.int32)
    graph.levels = levels
    graph.max_level = int(levels[0])
    graph.entry_point = 0
    graph.neighbors = [
        [np.empty(0, dtype=np.int32) for _ in range(n)]
        for _ in range(int(levels.max()) + 1)
    ]
    visited = np.zeros(n, dtype=bool)
    max_degree = [2 * config.max_neighbors] + [config.max_neighbors] * 64

    for i in range(1, n):
        query = vectors[i]
        level = int(levels[i])
        entry = graph.entry_point
        for lc in range(graph.max_level, level, -1):
            entry = _greedy_descent(vectors, graph.neighbors[lc], query, entry)
        for lc in range(min(graph.max_level, level), -1, -1):
            visited[:i] = False
            found = _search_layer(
                vectors, graph.neighbors[lc], query, entry, config.ef_construction, visited
            )
            selected = _select_neighbors(vectors, found, config.max_neighbors)
            adj = graph.neighbors[lc]
            adj[i] = np.asarray(selected, dtype=np.int32)
            cap = max_degree[min(lc, 1)]
            for s in selected:
                existing = adj[s]
                if existing.size < cap:
                    adj[s] = np.append(existing, np.int32(i))
                else:
                    pool = np.append(existing, np.int32(i))
                    dists = 1.0 - vectors[pool] @ vectors[s]
                    order = np.argsort(dists, kind="stable")
                    ranked = [(float(dists[j]), int(pool[j])) for j in order]
                    adj[s] = np.asarray(
                        _select_neighbors(vectors, ranked, cap), dtype=np.int32
                    )
            entry = found[0][1]
        if level > graph.max_level:
            graph.max_level = level
            graph.entry_point = i
    return graph


def build_index_from_vectors(
    vectors: np.ndarray,
    payloads: Sequence[str],
    with_ann: bool = True,
    build_config: IndexBuildConfig | None = None,
    checkpoint_fingerprint: int = 0,
) -> ResponseIndex:
    if len(vectors) == 0:
        raise ValueError("empty response set")
    if len(vectors) != len(payloads):
        raise ValueError(
            f"vector/payload count mismatch: {len(vectors)} vs {len(payloads)}"
        )
    build_config = build_config or IndexBuildConfig()
    unit = _unit_rows(vectors)
    graph = build_graph(unit, build_config) if with_ann else None
    return ResponseIndex(
        vectors=unit,
        payloads=list(payloads),
        build_config=build_config,
        checkpoint_fingerprint=checkpoint_fingerprint,
        graph=graph,
    )


def build_index(
    responses: Sequence[str],
    params: ParamStore,
    enc_config: EncoderConfig,
    vocab: Vocabulary,
    with_ann: bool = True,
    build_config: IndexBuildConfig | None = None,
    checkpoint_fingerprint: int = 0,
    encode_chunk: int = 256,
) -> ResponseIndex:
    """Encode every response with the response-side tower and index it."""
    if len(responses) == 0:
        raise ValueError("empty response set")
    chunks = []
    for start in range(0, len(responses), encode_chunk):
        feats = [
            featurize(truncate_tokens(normalize(r), enc_config.max_positions), vocab)
            for r in responses[start : start + encode_chunk]
        ]
        chunks.append(encode_batch(None, feats, params, enc_config, "response").value)
    return build_index_from_vectors(
        np.concatenate(chunks, axis=0),
        responses,
        with_ann=with_ann,
        build_config=build_config,
        checkpoint_fingerprint=checkpoint_fingerprint,
    )


def search_exact(index: ResponseIndex, query: np.ndarray, k: int) -> SearchResult:
    """True top-k by cosine over the whole index (full scan)."""
    n = len(index)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for index of size {n}")
    t0 = time.perf_counter()
    query = np.asarray(query, dtype=np.float32)
    qn = np.linalg.norm(query)
    if qn == 0.0:
        raise ValueError("zero query vector")
    sims = index.vectors @ (query / qn)
    if k < n:
        top = np.argpartition(-sims, k - 1)[:k]
    else:
        top = np.arange(n)
    order = sorted(top.tolist(), key=lambda i: (-float(sims[i]), i))
    items = [(i, float(sims[i])) for i in order]
    return SearchResult(items=items, query_time=time.perf_counter() - t0)


def search_ann(
    index: ResponseIndex, query: np.ndarray, k: int, ef_search: int = 80
) -> SearchResult:
    """Greedy layered graph search; approximate top-k."""
    if index.graph is None:
        raise ValueError("index was built without an ANN graph")
    n = len(index)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for index of size {n}")
    if ef_search < k:
        raise ValueError(f"ef_search={ef_search} must be >= k={k}")
    t0 = time.perf_counter()
    query = np.asarray(query, dtype=np.float32)
    qn = np.linalg.norm(query)
    if qn == 0.0:
        raise ValueError("zero query vector")
    query = query / qn
    graph = index.graph
    entry = graph.entry_point
    for lc in range(graph.max_level, 0, -1):
        entry = _greedy_descent(index.vectors, graph.neighbors[lc], query, entry)
    visited = np.zeros(n, dtype=bool)
    found = _search_layer(
        index.vectors, graph.neighbors[0], query, entry, ef_search, visited
    )
    items = [(i, 1.0 - d) for d, i in found[:k]]
    return SearchResult(items=items, query_time=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Index file format
# ---------------------------------------------------------------------------


def save_index(index: ResponseIndex, path: str | Path) -> None:
    out: list[bytes] = [INDEX_MAGIC]
    n, dim = index.vectors.shape
    config_json = json.dumps(
        dataclasses.asdict(index.build_config), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    out.append(
        struct.pack(
            "<IQQII", INDEX_VERSION, index.checkpoint_fingerprint, n, dim, len(config_json)
        )
    )
    out.append(config_json)
    out.append(struct.pack("<B", 1 if index.graph is not None else 0))
    out.append(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
    for payload in index.payloads:
        data = payload.encode("utf-8")
        out.append(struct.pack("<I", len(data)))
        out.append(data)
    if index.graph is not None:
        graph = index.graph
        out.append(struct.pack("<II", graph.entry_point, graph.max_level))
        out.append(graph.levels.astype("<i4").tobytes())
        for level in range(graph.max_level + 1):
            for node in range(n):
                if graph.levels[node] >= level:
                    nbrs = graph.neighbors[level][node]
                    out.append(struct.pack("<I", nbrs.size))
                    out.append(nbrs.astype("<i4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_index(path: str | Path) -> ResponseIndex:
    data = Path(path).read_bytes()
    if data[:4] != INDEX_MAGIC:
        raise ValueError(f"{path}: not an index file (bad magic)")
    pos = 4
    version, fingerprint, n, dim, config_len = struct.unpack_from("<IQQII", data, pos)
    pos += struct.calcsize("<IQQII")
    if version != INDEX_VERSION:
        raise ValueError(f"{path}: unsupported index version {version}")
    config = IndexBuildConfig(**json.loads(data[pos : pos + config_len]))
    pos += config_len
    (has_graph,) = struct.unpack_from("<B", data, pos)
    pos += 1
    vectors = (
        np.frombuffer(data, dtype="<f4", count=n * dim, offset=pos)
        .astype(np.float32)
        .reshape(n, dim)
    )
    pos += 4 * n * dim
    payloads = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        payloads.append(data[pos : pos + length].decode("utf-8"))
        pos += length
    graph = None
    if has_graph:
        graph = HnswGraph(n)
        graph.entry_point, graph.max_level = struct.unpack_from("<II", data, pos)
        pos += 8
        graph.levels = np.frombuffer(data, dtype="<i4", count=n, offset=pos).astype(
            np.int32
        )
        pos += 4 * n
        graph.neighbors = [
            [np.empty(0, dtype=np.int32) for _ in range(n)]
            for _ in range(graph.max_level + 1)
        ]
        for level in range(graph.max_level + 1):
            for node in range(n):
                if graph.levels[node] >= level:
                    (count,) = struct.unpack_from("<I", data, pos)
                    pos += 4
                    graph.neighbors[level][node] = np.frombuffer(
                        data, dtype="<i4", count=count, offset=pos
                    ).astype(np.int32)
                    pos += 4 * count
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after index payload")
    return ResponseIndex(
        vectors=vectors,
        payloads=payloads,
        build_config=config,
        checkpoint_fingerprint=fingerprint,
        graph=graph,
    )
