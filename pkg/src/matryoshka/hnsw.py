"""Hierarchical Navigable Small World index over normalized prefix embeddings.

Layered proximity graph (Malkov & Yashunin style): geometric level
assignment, greedy descent through the upper layers and an ``ef``-wide beam
on the bottom layer.  Neighbors are chosen with the distance-based pruning
heuristic.  The insertion and search loops are compiled with numba; the
graph lives in dense ``(levels, N, 2*M)`` adjacency arrays.
"""

from __future__ import annotations

import heapq
import io
import math
import struct
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .dataio import EmbeddingStore
from .numerics import Rng
from .retrieval import CostLedger, PrefixIndexFlat, RetrievalResult, _result, prefix_unit, rerank

INDEX_MAGIC = b"MRHN1\0"


@dataclass(frozen=True)
class HnswParams:
    m_connections: int = 32
    ef_construction: int = 200
    ef_search: int = 50

    def __post_init__(self) -> None:
        if self.m_connections < 2:
            raise ValueError("m_connections must be >= 2")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ValueError("ef values must be >= 1")


@dataclass
class IndexStats:
    build_time: float
    nodes: int
    edges: int
    bytes: int
    vector_bytes: int
    mean_distance_evals: float = float("nan")

    def as_dict(self) -> dict:
        return {
            "build_time_s": self.build_time,
            "nodes": self.nodes,
            "edges": self.edges,
            "index_size_mb": self.bytes / 2**20,
            "vector_payload_mb": self.vector_bytes / 2**20,
            "mean_distance_evals": self.mean_distance_evals,
        }


# -- compiled kernels --------------------------------------------------------


@njit(cache=True)
def _dist(vecs, i, q):
    s = np.float32(0.0)
    for t in range(q.shape[0]):
        diff = vecs[i, t] - q[t]
        s += diff * diff
    return s


@njit(cache=True)
def _search_layer(vecs, q, ep_ids, ep_ds, ef, nbrs, counts, visited, tag):
    """Beam search on one layer.  Returns ascending (dist, id) arrays and the
    number of distance evaluations performed."""
    cand = [(np.float64(ep_ds[0]), np.int64(ep_ids[0]))]
    res = [(-np.float64(ep_ds[0]), -np.int64(ep_ids[0]))]
    visited[ep_ids[0]] = tag
    for i in range(1, ep_ids.shape[0]):
        visited[ep_ids[i]] = tag
        heapq.heappush(cand, (np.float64(ep_ds[i]), np.int64(ep_ids[i])))
        heapq.heappush(res, (-np.float64(ep_ds[i]), -np.int64(ep_ids[i])))
        if len(res) > ef:
            heapq.heappop(res)
    evals = 0
    while len(cand) > 0:
        d, c = heapq.heappop(cand)
        worst_d = -res[0][0]
        if d > worst_d and len(res) >= ef:
            break
        for t in range(counts[c]):
            e = nbrs[c, t]
            if visited[e] == tag:
                continue
            visited[e] = tag
            de = np.float64(_dist(vecs, e, q))
            evals += 1
            worst_d = -res[0][0]
            worst_id = -res[0][1]
            if len(res) < ef or de < worst_d or (de == worst_d and e < worst_id):
                heapq.heappush(cand, (de, np.int64(e)))
                heapq.heappush(res, (-de, -np.int64(e)))
                if len(res) > ef:
                    heapq.heappop(res)
    n = len(res)
    out_d = np.empty(n, dtype=np.float64)
    out_i = np.empty(n, dtype=np.int64)
    for j in range(n - 1, -1, -1):
        nd, ni = heapq.heappop(res)
        out_d[j] = -nd
        out_i[j] = -ni
    return out_d, out_i, evals


@njit(cache=True)
def _select_heuristic(vecs, cand_ids, cand_ds, max_n, out):
    """Keep a candidate only if it is closer to the base than to every
    already-kept neighbor.  Candidates must be sorted ascending."""
    k = 0
    for i in range(cand_ids.shape[0]):
        if k >= max_n:
            break
        e = cand_ids[i]
        good = True
        for j in range(k):
            if _dist(vecs, e, vecs[out[j]]) < cand_ds[i]:
                good = False
                break
        if good:
            out[k] = e
            k += 1
    return k


@njit(cache=True)
def _sort_pairs(ds, ids):
    order = np.argsort(ids, kind="mergesort")
    ds2 = ds[order]
    ids2 = ids[order]
    order2 = np.argsort(ds2, kind="mergesort")
    return ds2[order2], ids2[order2]


@njit(cache=True)
def _build(vecs, levels, M, ef_c, nbrs, counts):
    n = vecs.shape[0]
    visited = np.zeros(n, dtype=np.int64)
    tag = 0
    entry = 0
    max_level = levels[0]
    scratch = np.empty(2 * M + 1, dtype=np.int64)
    for q in range(1, n):
        qv = vecs[q]
        lq = levels[q]
        ep = np.array([entry], dtype=np.int64)
        epd = np.array([np.float64(_dist(vecs, entry, qv))])
        lev = max_level
        while lev > lq:
            tag += 1
            d, ids, _ = _search_layer(vecs, qv, ep, epd, 1, nbrs[lev], counts[lev], visited, tag)
            ep = ids[:1].copy()
            epd = d[:1].copy()
            lev -= 1
        lev = min(lq, max_level)
        while lev >= 0:
            tag += 1
            d, ids, _ = _search_layer(vecs, qv, ep, epd, ef_c, nbrs[lev], counts[lev], visited, tag)
            cap = 2 * M if lev == 0 else M
            k = _select_heuristic(vecs, ids, d, M, scratch)
            for j in range(k):
                nbrs[lev, q, j] = scratch[j]
            counts[lev, q] = k
            for j in range(k):
                nb = nbrs[lev, q, j]
                c = counts[lev, nb]
                if c < cap:
                    nbrs[lev, nb, c] = q
                    counts[lev, nb] = c + 1
                else:
                    cids = np.empty(c + 1, dtype=np.int64)
                    cds = np.empty(c + 1, dtype=np.float64)
                    for t in range(c):
                        cids[t] = nbrs[lev, nb, t]
                        cds[t] = _dist(vecs, cids[t], vecs[nb])
                    cids[c] = q
                    cds[c] = _dist(vecs, q, vecs[nb])
                    cds, cids = _sort_pairs(cds, cids)
                    kk = _select_heuristic(vecs, cids, cds, cap, scratch)
                    for t in range(kk):
                        nbrs[lev, nb, t] = scratch[t]
                    for t in range(kk, cap):
                        nbrs[lev, nb, t] = -1
                    counts[lev, nb] = kk
            ep = ids
            epd = d
            lev -= 1
        if lq > max_level:
            max_level = lq
            entry = q
    return entry, max_level


@njit(cache=True)
def _search_many(vecs, queries, k, ef, entry, max_level, nbrs, counts):
    nq = queries.shape[0]
    out_i = np.full((nq, k), -1, dtype=np.int64)
    out_d = np.full((nq, k), np.inf, dtype=np.float64)
    evals = np.zeros(nq, dtype=np.int64)
    visited = np.zeros(vecs.shape[0], dtype=np.int64)
    tag = 0
    for qi in range(nq):
        qv = queries[qi]
        ep = np.array([entry], dtype=np.int64)
        epd = np.array([np.float64(_dist(vecs, entry, qv))])
        ev = 1
        for lev in range(max_level, 0, -1):
            tag += 1
            d, ids, e = _search_layer(vecs, qv, ep, epd, 1, nbrs[lev], counts[lev], visited, tag)
            ev += e
            ep = ids[:1].copy()
            epd = d[:1].copy()
        tag += 1
        d, ids, e = _search_layer(vecs, qv, ep, epd, max(ef, k), nbrs[0], counts[0], visited, tag)
        ev += e
        kk = min(k, ids.shape[0])
        out_i[qi, :kk] = ids[:kk]
        out_d[qi, :kk] = d[:kk]
        evals[qi] = ev
    return out_i, out_d, evals


# -- index -------------------------------------------------------------------


class HnswIndex:
    def __init__(
        self,
        vectors: np.ndarray,
        labels: np.ndarray,
        granularity: int,
        params: HnswParams,
        seed: int,
        levels: np.ndarray,
        nbrs: np.ndarray,
        counts: np.ndarray,
        entry: int,
        max_level: int,
    ):
        self.vectors = vectors
        self.labels = labels
        self.granularity = granularity
        self.params = params
        self.seed = seed
        self.levels = levels
        self.nbrs = nbrs
        self.counts = counts
        self.entry = entry
        self.max_level = max_level

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def ef_search(self) -> int:
        return self.params.ef_search

    @ef_search.setter
    def ef_search(self, value: int) -> None:
        self.params = HnswParams(self.params.m_connections, self.params.ef_construction, value)

    def neighbors(self, node: int, level: int = 0) -> np.ndarray:
        return self.nbrs[level, node, : self.counts[level, node]]

    def num_edges(self) -> int:
        return int(self.counts.sum())

    def nbytes(self) -> int:
        # vectors + one int32 per directed edge + one int32 count per node per level it lives on
        node_levels = int((self.levels + 1).sum())
        return self.vectors.nbytes + 4 * self.num_edges() + 4 * node_levels

    def check_invariants(self) -> list[str]:
        """Degree bounds, level membership and bottom-layer reachability."""
        problems = []
        M = self.params.m_connections
        for lev in range(self.max_level + 1):
            cap = 2 * M if lev == 0 else M
            over = np.flatnonzero(self.counts[lev] > cap)
            if over.size:
                problems.append(f"level {lev}: {over.size} nodes exceed degree {cap}")
            for node in np.flatnonzero(self.counts[lev]):
                nb = self.neighbors(node, lev)
                if self.levels[node] < lev or np.any(self.levels[nb] < lev):
                    problems.append(f"level {lev}: edge touches node absent from the level")
                    break
                if len(set(nb.tolist())) != nb.size or node in nb:
                    problems.append(f"level {lev}: node {node} has duplicate or self edges")
                    break
        seen = np.zeros(self.n, dtype=bool)
        seen[self.entry] = True
        frontier = [self.entry]
        while frontier:
            nxt = []
            for node in frontier:
                for nb in self.neighbors(node, 0):
                    if not seen[nb]:
                        seen[nb] = True
                        nxt.append(int(nb))
            frontier = nxt
        if not seen.all():
            problems.append(f"{int((~seen).sum())} nodes unreachable from the entry point at layer 0")
        return problems

    def search_vectors(self, qv: np.ndarray, k: int, ef_search: int | None = None):
        ef = self.params.ef_search if ef_search is None else ef_search
        if ef < k:
            raise ValueError(f"ef_search={ef} must be >= k={k}")
        qv = np.ascontiguousarray(qv, dtype=np.float32)
        return _search_many(self.vectors, qv, k, ef, self.entry, self.max_level, self.nbrs, self.counts)

    # persistence -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        p = self.params
        buf.write(INDEX_MAGIC)
        buf.write(struct.pack("<IIIIIQiI", p.m_connections, p.ef_construction, p.ef_search,
                              self.granularity, self.n, self.seed, self.max_level, self.entry))
        buf.write(self.vectors.astype("<f4").tobytes())
        buf.write(self.labels.astype("<u4").tobytes())
        buf.write(self.levels.astype("u1").tobytes())
        for lev in range(self.max_level + 1):
            for node in np.flatnonzero(self.levels >= lev):
                nb = self.neighbors(node, lev)
                _write_varint(buf, nb.size)
                prev = int(node)
                for x in nb.tolist():
                    _write_varint(buf, _zigzag(x - prev))
                    prev = x
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "HnswIndex":
        if not data.startswith(INDEX_MAGIC):
            raise ValueError("bad HNSW index magic")
        buf = io.BytesIO(data[len(INDEX_MAGIC):])
        M, efc, efs, gran, n, seed, max_level, entry = struct.unpack("<IIIIIQiI", buf.read(36))
        vectors = np.frombuffer(buf.read(4 * n * gran), dtype="<f4").reshape(n, gran).astype(np.float32)
        labels = np.frombuffer(buf.read(4 * n), dtype="<u4").astype(np.int64)
        levels = np.frombuffer(buf.read(n), dtype="u1").astype(np.int64)
        nbrs = np.full((max_level + 1, n, 2 * M), -1, dtype=np.int64)
        counts = np.zeros((max_level + 1, n), dtype=np.int64)
        for lev in range(max_level + 1):
            for node in np.flatnonzero(levels >= lev):
                c = _read_varint(buf)
                prev = int(node)
                for t in range(c):
                    prev += _unzigzag(_read_varint(buf))
                    nbrs[lev, node, t] = prev
                counts[lev, node] = c
        return cls(vectors, labels, gran, HnswParams(M, efc, efs), seed, levels, nbrs, counts, entry, max_level)


def _zigzag(x: int) -> int:
    return (x << 1) if x >= 0 else ((-x) << 1) - 1


def _unzigzag(z: int) -> int:
    return (z >> 1) if not z & 1 else -((z + 1) >> 1)


def _write_varint(buf: io.BytesIO, x: int) -> None:
    out = bytearray()
    while True:
        b = x & 0x7F
        x >>= 7
        if x:
            out.append(b | 0x80)
        else:
            out.append(b)
            break
    buf.write(out)


def _read_varint(buf: io.BytesIO) -> int:
    shift = result = 0
    while True:
        raw = buf.read(1)
        if not raw:
            raise ValueError("truncated varint in HNSW index")
        b = raw[0]
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result
        shift += 7


def draw_levels(n: int, m_connections: int, seed: int) -> np.ndarray:
    mult = 1.0 / math.log(m_connections)
    u = 1.0 - Rng(seed).uniform(n)  # (0, 1]
    return np.minimum(np.floor(-np.log(u) * mult), 255).astype(np.int64)


def build(store: EmbeddingStore, m: int, params: HnswParams = HnswParams(), seed: int = 0) -> tuple[HnswIndex, IndexStats]:
    """Insert every row's normalized ``m``-prefix, in id order."""
    if store.n < 1:
        raise ValueError("cannot index an empty store")
    t0 = time.perf_counter()
    vecs = prefix_unit(store.vectors, m)
    levels = draw_levels(store.n, params.m_connections, seed)
    L = int(levels.max()) + 1
    nbrs = np.full((L, store.n, 2 * params.m_connections), -1, dtype=np.int64)
    counts = np.zeros((L, store.n), dtype=np.int64)
    entry, max_level = _build(vecs, levels, params.m_connections, params.ef_construction, nbrs, counts)
    index = HnswIndex(vecs, store.labels.copy(), m, params, seed, levels, nbrs, counts, int(entry), int(max_level))
    stats = IndexStats(time.perf_counter() - t0, store.n, index.num_edges(), index.nbytes(), vecs.nbytes)
    return index, stats


def search(index: HnswIndex, query, k: int, ef_search: int | None = None) -> tuple[np.ndarray, np.ndarray, int]:
    """Single query: ``(ids, distances, distance_evals)``."""
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    ids, d, ev = index.search_vectors(prefix_unit(q, index.granularity), k, ef_search)
    keep = ids[0] >= 0
    return ids[0][keep], d[0][keep].astype(np.float32), int(ev[0])


def search_batch(
    index: HnswIndex, queries: EmbeddingStore, k: int, ef_search: int | None = None
) -> tuple[RetrievalResult, CostLedger, np.ndarray]:
    if k > index.n:
        raise ValueError(f"k={k} exceeds index size {index.n}")
    qv = prefix_unit(queries.vectors, index.granularity)
    ids, d, evals = index.search_vectors(qv, k, ef_search)
    ledger = CostLedger()
    mean_evals = float(evals.mean())
    ledger.add(f"hnsw@{index.granularity}", round(mean_evals * index.granularity), round(mean_evals))
    return _result(ids, d, index.labels, queries.labels, False), ledger, evals


def adaptive_retrieve_hnsw(
    index: HnswIndex,
    flat: PrefixIndexFlat,
    queries: EmbeddingStore,
    d_r: int,
    k_shortlist: int,
    k_final: int,
    ef_search: int | None = None,
) -> tuple[RetrievalResult, CostLedger]:
    """HNSW shortlist at the index granularity, exact rerank at ``d_r``."""
    ef = max(k_shortlist, index.params.ef_search if ef_search is None else ef_search)
    short, ledger, _ = search_batch(index, queries, k_shortlist, ef)
    ids, dists = rerank(flat, queries, short.ids, d_r, k_final)
    ledger.add(f"rerank@{d_r}", k_shortlist * d_r, k_shortlist)
    return _result(ids, dists, flat.store.labels, queries.labels, False), ledger


def recall_at_k(approx_ids: np.ndarray, exact_ids: np.ndarray) -> float:
    k = exact_ids.shape[1]
    hits = sum(len(set(a[:k].tolist()) & set(e.tolist())) for a, e in zip(approx_ids, exact_ids))
    return hits / exact_ids.size
