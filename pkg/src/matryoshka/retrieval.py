"""Exact prefix-aware k-NN search, shortlist/rerank pipelines and IR metrics.

Every granularity ``m`` is searched on the first ``m`` coordinates,
re-normalized to unit length (a prefix of a unit vector is not unit), with
squared L2 distance in float32.  Ties go to the lower database id.

Cost accounting counts one FLOP per dimension per candidate: exact search at
``m`` over ``N`` points costs ``m * N`` per query.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import EmbeddingStore

MAP_DENOMINATORS = ("min-k-r", "k", "retrieved-relevant")


def prefix_unit(x: np.ndarray, m: int) -> np.ndarray:
    """Unit-normalized float32 prefixes; rows with ~zero norm are left as-is."""
    p = np.asarray(x, dtype=np.float64)[:, :m]
    norms = np.sqrt(np.einsum("ij,ij->i", p, p))
    norms[norms <= 1e-12] = 1.0
    return (p / norms[:, None]).astype(np.float32)


class PrefixIndexFlat:
    """Database wrapper that materializes normalized prefixes on demand."""

    def __init__(self, store: EmbeddingStore):
        self.store = store
        self._views: dict[int, np.ndarray] = {}

    @property
    def n(self) -> int:
        return self.store.n

    @property
    def d(self) -> int:
        return self.store.d

    def view(self, m: int) -> np.ndarray:
        if not 1 <= m <= self.d:
            raise ValueError(f"granularity {m} outside [1, {self.d}]")
        if m not in self._views:
            self._views[m] = prefix_unit(self.store.vectors, m)
        return self._views[m]


@dataclass
class CostLedger:
    """FLOPs per query, split by pipeline stage."""

    stages: list[tuple[str, int]] = field(default_factory=list)
    distance_evals: int = 0

    def add(self, name: str, flops: int, evals: int = 0) -> None:
        self.stages.append((name, int(flops)))
        self.distance_evals += int(evals)

    @property
    def flops_per_query(self) -> int:
        return sum(f for _, f in self.stages)

    @property
    def mflops(self) -> float:
        return self.flops_per_query / 1e6

    def stage_flops(self, prefix: str) -> int:
        return sum(f for name, f in self.stages if name.startswith(prefix))

    def as_dict(self) -> dict:
        return {
            "flops_per_query": self.flops_per_query,
            "mflops_per_query": self.mflops,
            "distance_evals_per_query": self.distance_evals,
            "stages": [{"stage": n, "flops": f} for n, f in self.stages],
        }


@dataclass
class RetrievalResult:
    ids: np.ndarray  # (Q, k) int64, ranked
    distances: np.ndarray  # (Q, k) float32, non-decreasing per row
    relevant: np.ndarray  # (Q, k) bool: neighbor label == query label
    query_labels: np.ndarray
    truncated: bool = False

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def to_jsonl(self) -> str:
        lines = []
        for q in range(self.ids.shape[0]):
            ids = ",".join(str(int(i)) for i in self.ids[q])
            dists = ",".join(repr(float(x)) for x in self.distances[q])
            lines.append(f'{{"query_id": {q}, "ids": [{ids}], "distances": [{dists}]}}\n')
        return "".join(lines)


def _rank(dist: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` smallest ``(dist, id)`` pairs, in order."""
    n = dist.shape[0]
    if k < n:
        kth = np.partition(dist, k - 1)[k - 1]
        cand = np.flatnonzero(dist <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], dist[cand]))
    return cand[order[:k]]


def _sq_dists(db: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = db - q
    return np.einsum("ij,ij->i", diff, diff)


def _result(ids, dists, db_labels, q_labels, truncated) -> RetrievalResult:
    ids = np.asarray(ids, dtype=np.int64)
    q_labels = np.asarray(q_labels)
    return RetrievalResult(ids, np.asarray(dists, dtype=np.float32), db_labels[ids] == q_labels[:, None], q_labels, truncated)


def search_flat(index: PrefixIndexFlat, queries: EmbeddingStore, m: int, k: int) -> tuple[RetrievalResult, CostLedger]:
    """Exact top-``k`` at granularity ``m``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if m > queries.d:
        raise ValueError(f"granularity {m} exceeds query dimension {queries.d}")
    db = index.view(m)
    qv = prefix_unit(queries.vectors, m)
    N = index.n
    kk = min(k, N)
    all_ids = np.arange(N)
    ids = np.empty((qv.shape[0], kk), dtype=np.int64)
    dists = np.empty((qv.shape[0], kk), dtype=np.float32)
    for i, q in enumerate(qv):
        dist = _sq_dists(db, q)
        pos = _rank(dist, all_ids, kk)
        ids[i], dists[i] = pos, dist[pos]
    ledger = CostLedger()
    ledger.add(f"shortlist@{m}", m * N, N)
    return _result(ids, dists, index.store.labels, queries.labels, k > N), ledger


def rerank(index: PrefixIndexFlat, queries: EmbeddingStore, shortlist: np.ndarray, m: int, keep: int) -> tuple[np.ndarray, np.ndarray]:
    """Re-sort each row of candidate ids at granularity ``m`` and keep the best ``keep``."""
    db = index.view(m)
    qv = prefix_unit(queries.vectors, m)
    keep = min(keep, shortlist.shape[1])
    ids = np.empty((shortlist.shape[0], keep), dtype=np.int64)
    dists = np.empty((shortlist.shape[0], keep), dtype=np.float32)
    for i, q in enumerate(qv):
        cand = shortlist[i]
        dist = _sq_dists(db[cand], q)
        pos = _rank(dist, cand, keep)
        ids[i], dists[i] = cand[pos], dist[pos]
    return ids, dists


def adaptive_cost(n: int, d_s: int, d_r: int, k_shortlist: int) -> CostLedger:
    ledger = CostLedger()
    k_shortlist = min(k_shortlist, n)
    ledger.add(f"shortlist@{d_s}", d_s * n, n)
    ledger.add(f"rerank@{d_r}", k_shortlist * d_r, k_shortlist)
    return ledger


def adaptive_retrieve(
    index: PrefixIndexFlat,
    queries: EmbeddingStore,
    d_s: int,
    d_r: int,
    k_shortlist: int,
    k_final: int,
) -> tuple[RetrievalResult, CostLedger]:
    """Shortlist ``k_shortlist`` at ``d_s``, rerank at ``d_r``, keep ``k_final``."""
    if not d_s <= d_r <= index.d:
        raise ValueError(f"need D_s <= D_r <= d, got {d_s}, {d_r}, {index.d}")
    if k_final > k_shortlist:
        raise ValueError("k_final must not exceed k_shortlist")
    short, _ = search_flat(index, queries, d_s, k_shortlist)
    ids, dists = rerank(index, queries, short.ids, d_r, k_final)
    return (
        _result(ids, dists, index.store.labels, queries.labels, short.truncated),
        adaptive_cost(index.n, d_s, d_r, k_shortlist),
    )


@dataclass(frozen=True)
class FunnelSpec:
    """``d_s`` shortlisting, then rerank at ``rerank_cascade[i]`` over the
    current list cut to ``shortlist_cascade[i]`` entries.

    The initial shortlist has ``initial_k`` entries (default: the first
    shortlist length).
    """

    d_s: int
    rerank_cascade: tuple[int, ...]
    shortlist_cascade: tuple[int, ...]
    initial_k: int | None = None

    def __post_init__(self) -> None:
        rc, sc = tuple(self.rerank_cascade), tuple(self.shortlist_cascade)
        object.__setattr__(self, "rerank_cascade", rc)
        object.__setattr__(self, "shortlist_cascade", sc)
        if not rc or len(rc) != len(sc):
            raise ValueError("rerank and shortlist cascades must be non-empty and equally long")
        if any(b <= a for a, b in zip(rc, rc[1:])):
            raise ValueError(f"rerank cascade must be strictly increasing, got {rc}")
        if any(b >= a for a, b in zip(sc, sc[1:])):
            raise ValueError(f"shortlist cascade must be strictly decreasing, got {sc}")
        if self.d_s < 1 or sc[-1] < 1:
            raise ValueError("granularities and shortlist lengths must be positive")
        if self.initial_k is not None and sc[0] > self.initial_k:
            raise ValueError("first shortlist length exceeds the initial shortlist")

    @property
    def k0(self) -> int:
        return self.initial_k if self.initial_k is not None else self.shortlist_cascade[0]


def funnel_cost(n: int, spec: FunnelSpec) -> CostLedger:
    ledger = CostLedger()
    ledger.add(f"shortlist@{spec.d_s}", spec.d_s * n, n)
    for m, k in zip(spec.rerank_cascade, spec.shortlist_cascade):
        k = min(k, n)
        ledger.add(f"rerank@{m}", k * m, k)
    return ledger


def funnel_retrieve(index: PrefixIndexFlat, queries: EmbeddingStore, spec: FunnelSpec) -> tuple[RetrievalResult, CostLedger]:
    if spec.rerank_cascade[-1] > index.d:
        raise ValueError(f"rerank cascade reaches {spec.rerank_cascade[-1]} > d={index.d}")
    short, _ = search_flat(index, queries, spec.d_s, spec.k0)
    ids, dists = short.ids, short.distances
    for m, k in zip(spec.rerank_cascade, spec.shortlist_cascade):
        ids, dists = rerank(index, queries, ids[:, :k], m, k)
    ledger = funnel_cost(index.n, spec)
    return _result(ids, dists, index.store.labels, queries.labels, short.truncated), ledger


# -- metrics -----------------------------------------------------------------


def _denominator(kind: str, k: int, r_q: np.ndarray, hits: np.ndarray) -> np.ndarray:
    if kind == "min-k-r":
        return np.minimum(k, r_q)
    if kind == "k":
        return np.full(r_q.shape, k)
    if kind == "retrieved-relevant":
        return hits
    raise ValueError(f"unknown mAP denominator {kind!r}; expected one of {MAP_DENOMINATORS}")


def metrics(
    result: RetrievalResult,
    db_label_counts: np.ndarray,
    ks: Sequence[int] = (10, 25, 50, 100),
    map_denominator: str = "min-k-r",
) -> dict[str, float]:
    """Top-k accuracy, P@k and corrected mAP@k for each ``k``.

    ``R_q`` (the number of relevant database items) comes from
    ``db_label_counts[result.query_labels]``.  A query with a zero denominator
    scores an AP of 0.
    """
    rel = result.relevant.astype(np.float64)
    r_q = np.asarray(db_label_counts)[result.query_labels]
    cum = np.cumsum(rel, axis=1)
    ranks = np.arange(1, rel.shape[1] + 1)
    prec_at_i = cum / ranks
    out: dict[str, float] = {}
    for k in ks:
        if k > rel.shape[1]:
            raise ValueError(f"k={k} exceeds result length {rel.shape[1]}")
        hits = cum[:, k - 1]
        denom = _denominator(map_denominator, k, r_q, hits)
        num = (prec_at_i[:, :k] * rel[:, :k]).sum(axis=1)
        ap = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
        out[f"top{k}"] = float(np.mean(hits > 0))
        out[f"P@{k}"] = float(np.mean(hits / k))
        out[f"mAP@{k}"] = float(np.mean(ap))
    return out


def shortlist_sweep(
    index: PrefixIndexFlat,
    queries: EmbeddingStore,
    d_s: int,
    d_r: int,
    k_values: Sequence[int],
    ks: Sequence[int] = (10,),
    k_final: int | None = None,
    map_denominator: str = "min-k-r",
) -> list[dict]:
    """Adaptive retrieval metrics per shortlist length."""
    counts = index.store.label_counts()
    rows = []
    for k in k_values:
        kf = min(k, k_final if k_final is not None else max(ks))
        res, ledger = adaptive_retrieve(index, queries, d_s, d_r, k, kf)
        usable = [x for x in ks if x <= res.k]
        row = {"k": k, "mflops": ledger.mflops}
        row.update(metrics(res, counts, usable, map_denominator))
        row["top1"] = float(np.mean(res.relevant[:, 0]))
        rows.append(row)
    return rows
