"""Embedding stores, their on-disk formats and the synthetic data generator."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng

STORE_MAGIC = b"MREM1\0"
_HEADER = struct.Struct("<III")


class StoreFormatError(ValueError):
    pass


class MagicMismatch(StoreFormatError):
    pass


class Truncated(StoreFormatError):
    pass


class LabelOutOfRange(StoreFormatError):
    pass


@dataclass(frozen=True)
class EmbeddingStore:
    """``n`` labelled ``d``-dim vectors.

    ``vectors`` is float64 but every entry is float32-representable, which is
    what makes the binary round trip exact.
    """

    vectors: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors)
        lab = np.asarray(self.labels)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"vectors must be a non-empty 2-D array, got shape {v.shape}")
        if lab.shape != (v.shape[0],):
            raise ValueError(f"expected {v.shape[0]} labels, got shape {lab.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vectors contain NaN or Inf")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "vectors", np.ascontiguousarray(v, dtype=np.float64))
        object.__setattr__(self, "labels", np.ascontiguousarray(lab, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def prefix(self, m: int) -> np.ndarray:
        if not 1 <= m <= self.d:
            raise ValueError(f"prefix size {m} outside [1, {self.d}]")
        return self.vectors[:, :m]

    def subset(self, idx) -> "EmbeddingStore":
        idx = np.asarray(idx)
        return EmbeddingStore(self.vectors[idx], self.labels[idx], self.num_classes)

    def truncate(self, m: int) -> "EmbeddingStore":
        return EmbeddingStore(self.prefix(m).copy(), self.labels, self.num_classes)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def same_as(self, other: "EmbeddingStore") -> bool:
        return (
            self is other
            or (
                self.num_classes == other.num_classes
                and self.vectors.shape == other.vectors.shape
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.vectors, other.vectors)
            )
        )


def to_bytes(store: EmbeddingStore) -> bytes:
    return b"".join(
        [
            STORE_MAGIC,
            _HEADER.pack(store.n, store.d, store.num_classes),
            store.vectors.astype("<f4").tobytes(),
            store.labels.astype("<u4").tobytes(),
        ]
    )


def from_bytes(buf: bytes) -> EmbeddingStore:
    if buf[: len(STORE_MAGIC)] != STORE_MAGIC:
        raise MagicMismatch(f"bad magic {buf[:len(STORE_MAGIC)]!r}, expected {STORE_MAGIC!r}")
    off = len(STORE_MAGIC)
    if len(buf) < off + _HEADER.size:
        raise Truncated("file ends inside the header")
    n, d, L = _HEADER.unpack_from(buf, off)
    off += _HEADER.size
    need = off + 4 * n * d + 4 * n
    if len(buf) < need:
        raise Truncated(f"header declares n={n}, d={d} ({need} bytes) but file has {len(buf)} bytes")
    vectors = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off + 4 * n * d)
    if n and labels.max() >= L:
        raise LabelOutOfRange(f"label {int(labels.max())} >= num_classes {L}")
    return EmbeddingStore(vectors.astype(np.float64), labels.astype(np.int64), L)


def write_store(store: EmbeddingStore, path) -> None:
    Path(path).write_bytes(to_bytes(store))


def read_store(path) -> EmbeddingStore:
    return from_bytes(Path(path).read_bytes())


def read_csv_store(path, num_classes: int | None = None) -> EmbeddingStore:
    """Ingest ``label,f0,...,f{d-1}`` rows produced by an external extractor."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label" or any(h != f"f{i}" for i, h in enumerate(header[1:])):
            raise StoreFormatError("CSV header must be label,f0,...,f{d-1}")
        rows = [r for r in reader if r]
    if not rows:
        raise StoreFormatError("CSV has no data rows")
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    vectors = np.array([[float(x) for x in r[1:]] for r in rows], dtype=np.float32)
    L = int(labels.max()) + 1 if num_classes is None else num_classes
    return EmbeddingStore(vectors.astype(np.float64), labels, L)


@dataclass(frozen=True)
class SuperclassMap:
    mapping: np.ndarray  # class index -> superclass index
    num_superclasses: int

    def __post_init__(self) -> None:
        m = np.asarray(self.mapping, dtype=np.int64)
        if m.ndim != 1 or m.size == 0:
            raise ValueError("mapping must be a non-empty vector")
        if m.min() < 0 or m.max() >= self.num_superclasses:
            raise ValueError("superclass indices outside [0, num_superclasses)")
        if len(np.unique(m)) != self.num_superclasses:
            raise ValueError("superclass indices must be dense")
        object.__setattr__(self, "mapping", m)

    @property
    def num_classes(self) -> int:
        return self.mapping.size

    def __call__(self, classes) -> np.ndarray:
        c = np.asarray(classes)
        if c.size and (c.min() < 0 or c.max() >= self.mapping.size):
            raise KeyError(f"class index outside the {self.mapping.size} mapped classes")
        return self.mapping[c]

    @classmethod
    def identity(cls, num_classes: int) -> "SuperclassMap":
        return cls(np.arange(num_classes), num_classes)


def write_superclass_map(smap: SuperclassMap, path) -> None:
    lines = [f"{c}\t{s}\n" for c, s in enumerate(smap.mapping.tolist())]
    Path(path).write_text("".join(lines))


def read_superclass_map(path) -> SuperclassMap:
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            c, s = (int(x) for x in line.split("\t"))
        except ValueError as exc:
            raise StoreFormatError(f"{path}:{lineno}: expected 'class<TAB>superclass'") from exc
        pairs[c] = s
    if sorted(pairs) != list(range(len(pairs))):
        raise StoreFormatError("superclass map must cover classes 0..L-1 exactly once")
    mapping = np.array([pairs[c] for c in range(len(pairs))])
    return SuperclassMap(mapping, int(mapping.max()) + 1)


@dataclass(frozen=True)
class SyntheticSpec:
    num_superclasses: int = 4
    classes_per_superclass: int = 3
    d: int = 64
    n_train: int = 2000
    n_test: int = 600
    superclass_separation: float = 4.0
    class_separation: float = 2.0
    noise_sigma: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        counts = (self.num_superclasses, self.classes_per_superclass, self.d, self.n_train, self.n_test)
        if any(c < 1 for c in counts):
            raise ValueError("all counts must be >= 1")
        if self.superclass_separation <= 0 or self.class_separation <= 0:
            raise ValueError("separations must be positive")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if self.d < 2:
            raise ValueError("d must be at least 2 to hold coarse and fine blocks")

    @property
    def num_classes(self) -> int:
        return self.num_superclasses * self.classes_per_superclass


PRESETS = {
    "default": SyntheticSpec(),
    "tiny": SyntheticSpec(num_superclasses=3, classes_per_superclass=2, d=16, n_train=300, n_test=100),
}


def _balanced_labels(n: int, num_classes: int, rng: Rng) -> np.ndarray:
    labels = np.arange(n) % num_classes
    return labels[rng.permutation(n)]


def generate_synthetic(spec: SyntheticSpec) -> tuple[EmbeddingStore, EmbeddingStore, SuperclassMap]:
    """Hierarchical Gaussian mixture with coarse information up front.

    Superclass means live in a random rotation of the first ``d // 4``
    coordinates; class offsets live in the remaining ones.  Prefixes of a
    vector therefore resolve the superclass before the class.
    """
    spec.validate()
    rng_means, rng_train, rng_test = Rng(spec.seed).split(3)
    d = spec.d
    d_coarse = max(1, d // 4)
    S, C = spec.num_superclasses, spec.classes_per_superclass
    L = S * C

    rot, _ = np.linalg.qr(rng_means.normal((d_coarse, d_coarse)))
    # unit-variance Gaussian scaled so the expected inter-mean distance is the separation
    super_means = np.zeros((S, d))
    super_means[:, :d_coarse] = rng_means.normal((S, d_coarse)) @ rot.T * (
        spec.superclass_separation / math.sqrt(2 * d_coarse)
    )
    d_fine = d - d_coarse
    offsets = np.zeros((L, d))
    offsets[:, d_coarse:] = rng_means.normal((L, d_fine)) * (spec.class_separation / math.sqrt(2 * d_fine))
    class_means = np.repeat(super_means, C, axis=0) + offsets
    mapping = np.repeat(np.arange(S), C)

    def sample(n: int, rng: Rng) -> EmbeddingStore:
        labels = _balanced_labels(n, L, rng)
        x = class_means[labels] + rng.normal((n, d), scale=spec.noise_sigma)
        return EmbeddingStore(x.astype(np.float32).astype(np.float64), labels, L)

    train = sample(spec.n_train, rng_train)
    test = sample(spec.n_test, rng_test)
    return train, test, SuperclassMap(mapping, S)
