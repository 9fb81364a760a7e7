from __future__ import annotations

import numpy as np
import pytest

from matryoshka import hnsw
from matryoshka.dataio import EmbeddingStore, SyntheticSpec, generate_synthetic
from matryoshka.hnsw import HnswIndex, HnswParams
from matryoshka.retrieval import PrefixIndexFlat, adaptive_retrieve, search_flat

from conftest import random_store


def test_params_validation():
    with pytest.raises(ValueError):
        HnswParams(m_connections=1)
    with pytest.raises(ValueError):
        HnswParams(ef_construction=0)


def test_single_node():
    store = EmbeddingStore(np.array([[1.0, 2.0]]), np.array([0]), 1)
    index, stats = hnsw.build(store, 2)
    assert stats.nodes == 1 and stats.edges == 0
    ids, dists, evals = hnsw.search(index, [1.0, 2.0], 1, 1)
    assert ids.tolist() == [0] and dists[0] == 0.0 and evals == 1
    assert index.check_invariants() == []


def test_index_bytes_exceed_payload(nprng):
    store = random_store(nprng, 200, 16, 3)
    _, stats = hnsw.build(store, 16, HnswParams(8, 40))
    assert stats.bytes > store.n * 16 * 4 and stats.vector_bytes == store.n * 16 * 4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tiny_full_beam_equals_exact(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 64))
    store = random_store(rng, n, 8, 3)
    index, _ = hnsw.build(store, 8, HnswParams(m_connections=n, ef_construction=n), seed)
    assert index.check_invariants() == []
    q = random_store(rng, 15, 8, 3)
    res, _, _ = hnsw.search_batch(index, q, 5, ef_search=n)
    exact, _ = search_flat(PrefixIndexFlat(store), q, 8, 5)
    assert np.array_equal(res.ids, exact.ids)


def test_self_query_well_separated():
    train, _, _ = generate_synthetic(SyntheticSpec(n_train=500))
    index, _ = hnsw.build(train, 64, HnswParams(16, 100))
    for i in (0, 123, 499):
        ids, dists, _ = hnsw.search(index, train.vectors[i], 3, 20)
        assert ids[0] == i and dists[0] == pytest.approx(0.0, abs=1e-6)


def test_ef_smaller_than_k_is_an_error(nprng):
    index, _ = hnsw.build(random_store(nprng, 30, 4, 2), 4)
    with pytest.raises(ValueError):
        hnsw.search(index, np.ones(4), 10, 5)


def test_build_is_deterministic(nprng):
    store = random_store(nprng, 300, 16, 3)
    a, _ = hnsw.build(store, 8, HnswParams(8, 50), seed=3)
    b, _ = hnsw.build(store, 8, HnswParams(8, 50), seed=3)
    assert a.to_bytes() == b.to_bytes()


def test_persistence_round_trip(nprng):
    store = random_store(nprng, 400, 12, 4)
    index, _ = hnsw.build(store, 12, HnswParams(6, 40, 30), seed=1)
    raw = index.to_bytes()
    assert raw[:6] == b"MRHN1\0"
    back = HnswIndex.from_bytes(raw)
    assert back.to_bytes() == raw
    assert back.check_invariants() == []
    q = random_store(nprng, 20, 12, 4)
    r1, _, e1 = hnsw.search_batch(index, q, 5)
    r2, _, e2 = hnsw.search_batch(back, q, 5)
    assert np.array_equal(r1.ids, r2.ids) and np.array_equal(e1, e2)
    with pytest.raises(ValueError):
        HnswIndex.from_bytes(b"WRONG!" + raw[6:])


def test_invariant_checker_detects_damage(nprng):
    index, _ = hnsw.build(random_store(nprng, 100, 8, 2), 8, HnswParams(4, 30))
    assert index.check_invariants() == []
    # sever node 5 from everyone at layer 0
    for v in range(index.n):
        row = index.neighbors(v, 0).tolist()
        if 5 in row:
            row.remove(5)
            index.counts[0, v] = len(row)
            index.nbrs[0, v, : len(row)] = row
    index.counts[0, 5] = 0
    assert any("reach" in p for p in index.check_invariants())


def test_level_distribution():
    levels = hnsw.draw_levels(100_000, 32, 0)
    # P(level >= 1) = 1/M for the geometric assignment
    assert abs(np.mean(levels >= 1) - 1 / 32) < 0.003
    assert np.array_equal(levels, hnsw.draw_levels(100_000, 32, 0))


@pytest.mark.slow
def test_recall_and_adaptive_hnsw_on_benchmark():
    db, queries, _ = generate_synthetic(SyntheticSpec(n_train=10_000, n_test=300))
    index, stats = hnsw.build(db, 64)
    assert index.check_invariants() == []
    exact, _ = search_flat(PrefixIndexFlat(db), queries, 64, 10)
    res20, _, _ = hnsw.search_batch(index, queries, 10, 20)
    res50, ledger, evals = hnsw.search_batch(index, queries, 10, 50)
    res100, _, _ = hnsw.search_batch(index, queries, 10, 100)
    r20, r50, r100 = (hnsw.recall_at_k(r.ids, exact.ids) for r in (res20, res50, res100))
    assert r50 >= 0.95 and r100 >= r20
    assert evals.mean() < 0.2 * db.n
    assert ledger.distance_evals == round(evals.mean())

    flat = PrefixIndexFlat(db)
    small, _ = hnsw.build(db, 16)
    a_h, _ = hnsw.adaptive_retrieve_hnsw(small, flat, queries, 64, 200, 10)
    a_f, _ = adaptive_retrieve(flat, queries, 16, 64, 200, 10)
    assert abs(a_h.relevant[:, 0].mean() - a_f.relevant[:, 0].mean()) <= 0.005
