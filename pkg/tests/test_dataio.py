from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from matryoshka.dataio import (
    EmbeddingStore,
    LabelOutOfRange,
    MagicMismatch,
    SuperclassMap,
    SyntheticSpec,
    Truncated,
    from_bytes,
    generate_synthetic,
    read_csv_store,
    read_store,
    read_superclass_map,
    to_bytes,
    write_store,
    write_superclass_map,
)

from conftest import random_store


def test_round_trip_file(tmp_path, nprng):
    store = random_store(nprng, 50, 9, 4)
    write_store(store, tmp_path / "s.mrem")
    back = read_store(tmp_path / "s.mrem")
    assert np.array_equal(back.vectors, store.vectors)
    assert np.array_equal(back.labels, store.labels)
    assert back.num_classes == 4


@st.composite
def stores(draw):
    n = draw(st.integers(1, 20))
    d = draw(st.integers(1, 8))
    L = draw(st.integers(1, 6))
    floats = st.floats(-1e6, 1e6, allow_nan=False, width=32)
    vecs = draw(hnp.arrays(np.float32, (n, d), elements=floats)).astype(np.float64)
    labels = draw(hnp.arrays(np.int64, n, elements=st.integers(0, L - 1)))
    return EmbeddingStore(vecs, labels, L)


@settings(max_examples=60, deadline=None)
@given(stores())
def test_round_trip_property(store):
    back = from_bytes(to_bytes(store))
    assert np.array_equal(back.vectors, store.vectors)
    assert np.array_equal(back.labels, store.labels)
    assert back.num_classes == store.num_classes


def test_layout_is_little_endian_float32(nprng):
    store = random_store(nprng, 3, 2, 5)
    raw = to_bytes(store)
    assert raw[:6] == b"MREM1\0"
    assert struct.unpack("<III", raw[6:18]) == (3, 2, 5)
    assert np.array_equal(np.frombuffer(raw[18:42], "<f4").reshape(3, 2), store.vectors)
    assert np.array_equal(np.frombuffer(raw[42:], "<u4"), store.labels)
    assert len(raw) == 6 + 12 + 3 * 2 * 4 + 3 * 4


def test_wrong_magic(nprng):
    raw = bytearray(to_bytes(random_store(nprng, 3, 2, 2)))
    raw[0:6] = b"NOPE1\0"
    with pytest.raises(MagicMismatch):
        from_bytes(bytes(raw))


def test_truncated_rows(nprng):
    store = random_store(nprng, 10, 4, 3)
    raw = to_bytes(store)
    # header says n=10 but only 9 rows of vectors follow (labels dropped too)
    cut = raw[: 18 + 9 * 4 * 4]
    with pytest.raises(Truncated):
        from_bytes(cut)
    with pytest.raises(Truncated):
        from_bytes(raw[:-1])
    with pytest.raises(Truncated):
        from_bytes(raw[:10])


def test_label_out_of_range_on_read(nprng):
    raw = bytearray(to_bytes(random_store(nprng, 4, 2, 3)))
    raw[-4:] = struct.pack("<I", 3)
    with pytest.raises(LabelOutOfRange):
        from_bytes(bytes(raw))


def test_store_rejects_nan():
    with pytest.raises(ValueError):
        EmbeddingStore(np.array([[np.nan]]), np.array([0]), 1)


def test_csv_import(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("label,f0,f1\n1,0.5,-2\n0,3,4\n")
    store = read_csv_store(path)
    assert store.labels.tolist() == [1, 0]
    assert np.array_equal(store.vectors, [[0.5, -2.0], [3.0, 4.0]])
    assert store.num_classes == 2


def test_superclass_map_io(tmp_path):
    smap = SuperclassMap(np.array([0, 0, 1, 2, 1]), 3)
    write_superclass_map(smap, tmp_path / "m.tsv")
    assert (tmp_path / "m.tsv").read_text().splitlines()[2] == "2\t1"
    back = read_superclass_map(tmp_path / "m.tsv")
    assert np.array_equal(back.mapping, smap.mapping)
    assert back(np.array([4, 3])).tolist() == [1, 2]


def test_superclass_map_must_be_dense():
    with pytest.raises(ValueError):
        SuperclassMap(np.array([0, 2]), 3)


def test_generate_bookkeeping():
    spec = SyntheticSpec(num_superclasses=3, classes_per_superclass=4, d=64, n_train=2000, n_test=500)
    train, test, smap = generate_synthetic(spec)
    assert train.num_classes == 12 and train.n == 2000 and test.n == 500 and train.d == 64
    counts = train.label_counts()
    assert counts.max() - counts.min() <= 1
    assert smap.num_superclasses == 3
    assert np.array_equal(smap.mapping, np.repeat(np.arange(3), 4))


def test_generate_deterministic():
    a = generate_synthetic(SyntheticSpec(seed=7))
    b = generate_synthetic(SyntheticSpec(seed=7))
    c = generate_synthetic(SyntheticSpec(seed=8))
    assert to_bytes(a[0]) == to_bytes(b[0]) and to_bytes(a[1]) == to_bytes(b[1])
    assert to_bytes(a[0]) != to_bytes(c[0])


def test_generate_rejects_invalid_spec():
    for bad in (dict(noise_sigma=0.0), dict(class_separation=-1.0), dict(n_train=0)):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticSpec(**bad))


def _nn_accuracy(db, db_labels, q, q_labels):
    d2 = ((q[:, None, :] - db[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(db_labels[np.argmin(d2, axis=1)] == q_labels))


def test_noiseless_limit_is_perfectly_separable():
    train, test, _ = generate_synthetic(SyntheticSpec(noise_sigma=1e-6, n_train=240, n_test=120))
    assert _nn_accuracy(train.vectors, train.labels, test.vectors, test.labels) == 1.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_leading_coordinates_carry_superclass_signal(seed):
    spec = SyntheticSpec(seed=seed)
    train, test, smap = generate_synthetic(spec)
    m = -(-spec.d // 8)
    acc = _nn_accuracy(train.prefix(m), smap(train.labels), test.prefix(m), smap(test.labels))
    assert acc >= 3.0 / spec.num_superclasses
