"""Evaluation battery for nested representations.

Linear-probe and 1-NN accuracy per granularity, nearest-class-mean few-shot
accuracy, oracle accuracy over granularities, per-class trend analysis and
superclass-level accuracy.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import EmbeddingStore, SuperclassMap
from .mrl import Encoder, MrlHead
from .numerics import Rng, softmax
from .retrieval import prefix_unit

TRENDS = ("monotone-up", "up-then-down", "down-then-up", "no-trend")


@dataclass(frozen=True)
class AccuracyRow:
    m: int
    top1: float
    top5: float
    n_correct: int
    n_total: int


@dataclass
class AccuracyTable:
    rows: list[AccuracyRow]

    def top1(self, m: int) -> float:
        return next(r.top1 for r in self.rows if r.m == m)

    def as_dict(self) -> list[dict]:
        return [r.__dict__.copy() for r in self.rows]

    def to_csv(self) -> str:
        lines = ["m,top1,top5,n_correct,n_total"]
        lines += [f"{r.m},{r.top1!r},{r.top5!r},{r.n_correct},{r.n_total}" for r in self.rows]
        return "\n".join(lines) + "\n"


@dataclass
class PredictionRecord:
    """Per test point: true label, argmax class and max-softmax confidence
    at each granularity, plus the top-5 classes (for top-5 accuracy)."""

    dims: tuple[int, ...]
    labels: np.ndarray  # (n,)
    preds: np.ndarray  # (n, |M|)
    confidences: np.ndarray  # (n, |M|)
    top5: np.ndarray  # (n, |M|, min(5, L))

    def __post_init__(self) -> None:
        n, k = self.preds.shape
        if self.labels.shape != (n,) or self.confidences.shape != (n, k) or k != len(self.dims):
            raise ValueError("inconsistent prediction record shapes")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def correct(self) -> np.ndarray:
        return self.preds == self.labels[:, None]

    def subset(self, idx) -> "PredictionRecord":
        idx = np.asarray(idx)
        return PredictionRecord(self.dims, self.labels[idx], self.preds[idx], self.confidences[idx], self.top5[idx])


def _topk_classes(logits: np.ndarray, k: int) -> np.ndarray:
    # stable sort on negated logits: ties go to the lower class index
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def record_from_logits(dims: Sequence[int], logits: Sequence[np.ndarray], labels: np.ndarray) -> PredictionRecord:
    preds, confs, top5 = [], [], []
    for lg in logits:
        t5 = _topk_classes(lg, min(5, lg.shape[1]))
        preds.append(t5[:, 0])
        confs.append(softmax(lg).max(axis=1))
        top5.append(t5)
    return PredictionRecord(
        tuple(dims), np.asarray(labels), np.stack(preds, axis=1), np.stack(confs, axis=1), np.stack(top5, axis=1)
    )


def table_from_record(record: PredictionRecord) -> AccuracyTable:
    rows = []
    for j, m in enumerate(record.dims):
        c = record.preds[:, j] == record.labels
        c5 = (record.top5[:, j, :] == record.labels[:, None]).any(axis=1)
        rows.append(AccuracyRow(m, float(c.mean()), float(c5.mean()), int(c.sum()), record.n))
    return AccuracyTable(rows)


def eval_linear(
    head: MrlHead, encoder: Encoder, test_store: EmbeddingStore, dims: Sequence[int] | None = None
) -> tuple[AccuracyTable, PredictionRecord]:
    """Argmax accuracy of the nested head at each granularity.

    ``dims`` defaults to the trained granularities; tied heads also accept
    untrained (interpolated) sizes.
    """
    dims = tuple(head.spec.dims if dims is None else dims)
    Z = encoder(test_store.vectors)
    if Z.shape[1] != head.spec.d:
        raise ValueError(f"encoder emits {Z.shape[1]} dims, head expects {head.spec.d}")
    record = record_from_logits(dims, [head.logits_at(Z, m) for m in dims], test_store.labels)
    return table_from_record(record), record


def _nn_labels(db: np.ndarray, db_labels: np.ndarray, q: np.ndarray, exclude_self: bool) -> np.ndarray:
    out = np.empty(q.shape[0], dtype=np.int64)
    for i in range(q.shape[0]):
        diff = db - q[i]
        dist = np.einsum("ij,ij->i", diff, diff)
        if exclude_self:
            dist[i] = np.inf
        out[i] = db_labels[np.argmin(dist)]  # argmin returns the lowest id on ties
    return out


def eval_1nn(db: EmbeddingStore, queries: EmbeddingStore, m: int) -> float:
    """Top-1 accuracy of exact 1-NN on normalized ``m``-prefixes.

    When ``db`` and ``queries`` are the same data each point is excluded from
    its own neighbor search.
    """
    if m > db.d or m > queries.d:
        raise ValueError(f"granularity {m} exceeds representation size {min(db.d, queries.d)}")
    exclude = db.same_as(queries)
    if exclude and db.n < 2:
        raise ValueError("leave-one-out 1-NN needs at least two points")
    pred = _nn_labels(prefix_unit(db.vectors, m), db.labels, prefix_unit(queries.vectors, m), exclude)
    return float(np.mean(pred == queries.labels))


def eval_ncm(
    db: EmbeddingStore,
    queries: EmbeddingStore,
    m: int,
    shots: int,
    ways: int,
    trials: int = 10,
    seed: int = 0,
) -> tuple[float, float]:
    """Few-shot nearest-class-mean accuracy, ``(mean, std)`` over trials.

    Each trial samples ``ways`` classes and ``shots`` support points per class
    from ``db``; centroids are means of normalized prefixes, re-normalized.
    Queries are all query points of the sampled classes (support points
    excluded when ``db`` and ``queries`` are the same data).
    """
    counts = db.label_counts()
    eligible = np.flatnonzero(counts >= shots)
    if shots < 1 or ways < 1 or eligible.size < ways:
        raise ValueError(f"need {ways} classes with >= {shots} examples; only {eligible.size} qualify")
    same = db.same_as(queries)
    dbv = prefix_unit(db.vectors, m).astype(np.float64)
    qv = prefix_unit(queries.vectors, m).astype(np.float64)
    rng = Rng(seed)
    accs = []
    for _ in range(trials):
        classes = np.sort(rng.choice(eligible, ways))
        support = [np.sort(rng.choice(np.flatnonzero(db.labels == c), shots)) for c in classes]
        cent = np.stack([dbv[s].mean(axis=0) for s in support])
        norms = np.linalg.norm(cent, axis=1, keepdims=True)
        cent = cent / np.where(norms > 1e-12, norms, 1.0)
        mask = np.isin(queries.labels, classes)
        if same:
            mask[np.concatenate(support)] = False
        qi = np.flatnonzero(mask)
        if qi.size == 0:
            raise ValueError("no query points for the sampled classes")
        dist = ((qv[qi, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
        pred = classes[np.argmin(dist, axis=1)]
        accs.append(float(np.mean(pred == queries.labels[qi])))
    return float(np.mean(accs)), float(np.std(accs))


@dataclass
class OracleReport:
    oracle_top1: float
    first_correct: dict[int, float]
    always_wrong: float

    def as_row(self) -> dict:
        row = {str(m): v for m, v in self.first_correct.items()}
        row["always_wrong"] = self.always_wrong
        return row


def oracle_accuracy(record: PredictionRecord) -> OracleReport:
    """Fraction correct at any granularity and where each point first becomes correct."""
    if record.n == 0:
        raise ValueError("empty prediction record")
    correct = record.correct
    any_correct = correct.any(axis=1)
    first = np.argmax(correct, axis=1)
    hist = {m: float(np.sum(any_correct & (first == j))) / record.n for j, m in enumerate(record.dims)}
    return OracleReport(float(any_correct.mean()), hist, float(np.sum(~any_correct)) / record.n)


def classify_trend(seq: Sequence[float], tol: float = 0.0) -> str:
    """Label an accuracy sequence by the sign pattern of its first differences.

    Differences within ``tol`` count as flat; a sequence that never drops is
    monotone-up (constant included).
    """
    diffs = np.diff(np.asarray(seq, dtype=np.float64))
    signs = [int(np.sign(x)) for x in diffs if abs(x) > tol]
    if all(s > 0 for s in signs):
        return "monotone-up"
    runs = [s for i, s in enumerate(signs) if i == 0 or s != signs[i - 1]]
    if runs == [1, -1]:
        return "up-then-down"
    if runs == [-1, 1]:
        return "down-then-up"
    return "no-trend"


def disagreement(record: PredictionRecord, tolerance: int = 1) -> dict[str, int]:
    """Count classes per trend; ``tolerance`` misclassifications count as noise."""
    correct = record.correct
    counts = Counter({t: 0 for t in TRENDS})
    for c in np.unique(record.labels):
        rows = record.labels == c
        n_c = int(rows.sum())
        acc = correct[rows].mean(axis=0)
        # strictly more than `tolerance` errors must move for a change to count
        counts[classify_trend(acc, tol=(tolerance + 0.5) / n_c if tolerance else 0.0)] += 1
    return dict(counts)


def eval_superclass(record: PredictionRecord, smap: SuperclassMap) -> AccuracyTable:
    """Map fine predictions and labels to superclasses, then score."""
    coarse = PredictionRecord(
        record.dims,
        smap(record.labels),
        smap(record.preds),
        record.confidences,
        smap(record.top5),
    )
    return table_from_record(coarse)
