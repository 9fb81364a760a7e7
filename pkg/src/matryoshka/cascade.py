"""Adaptive classification: escalate through granularities until the
max-softmax confidence clears a per-granularity threshold."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .classify import PredictionRecord

FIT_MODES = ("escalate-to-final", "next-stage")


@dataclass
class ThresholdPolicy:
    dims: tuple[int, ...]
    thresholds: tuple[float, ...]  # one per granularity except the last
    grid_resolution: int = 100

    def __post_init__(self) -> None:
        if len(self.thresholds) != len(self.dims) - 1:
            raise ValueError("need exactly one threshold per non-final granularity")
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise ValueError("thresholds must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps({"dims": list(self.dims), "thresholds": list(self.thresholds)})

    @classmethod
    def from_json(cls, text: str) -> "ThresholdPolicy":
        obj = json.loads(text)
        return cls(tuple(obj["dims"]), tuple(float(t) for t in obj["thresholds"]))


def _stop_index(conf: np.ndarray, thresholds) -> np.ndarray:
    """Granularity index each point stops at; ``inf`` thresholds never stop."""
    n, k = conf.shape
    stop = np.full(n, k - 1)
    undecided = np.ones(n, dtype=bool)
    for j, t in enumerate(thresholds):
        hit = undecided & (conf[:, j] >= t)
        stop[hit] = j
        undecided &= ~hit
    return stop


def _accuracy(record: PredictionRecord, stop: np.ndarray) -> float:
    return float(np.mean(record.preds[np.arange(record.n), stop] == record.labels))


def fit_thresholds(record: PredictionRecord, grid_resolution: int = 100, mode: str = "escalate-to-final") -> ThresholdPolicy:
    """Greedy grid search, smallest granularity first.

    For each granularity the threshold is the smallest grid value reaching
    the best holdout accuracy, with earlier thresholds frozen.  In
    ``escalate-to-final`` mode later (unfit) stages pass everything through
    to the largest granularity; in ``next-stage`` mode a point that escalates
    is scored at the next granularity.
    """
    if record.n == 0:
        raise ValueError("empty holdout record")
    if grid_resolution < 2:
        raise ValueError("grid_resolution must be >= 2")
    if mode not in FIT_MODES:
        raise ValueError(f"unknown fit mode {mode!r}; expected one of {FIT_MODES}")
    k = len(record.dims)
    grid = np.linspace(0.0, 1.0, grid_resolution)
    fitted: list[float] = []
    for j in range(k - 1):
        best_acc, best_t = -1.0, 0.0
        for t in grid:
            trial = fitted + [t] + [np.inf] * (k - 2 - j)
            if mode == "next-stage" and j + 1 < k - 1:
                trial[j + 1] = 0.0
            acc = _accuracy(record, _stop_index(record.confidences, trial))
            if acc > best_acc:
                best_acc, best_t = acc, float(t)
        fitted.append(best_t)
    return ThresholdPolicy(tuple(record.dims), tuple(fitted), grid_resolution)


@dataclass
class CascadeReport:
    accuracy: float
    usage: dict[int, float]  # fraction of points finishing at each granularity
    expected_dim_final: float
    expected_dim_cumulative: float

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "usage": {str(m): p for m, p in self.usage.items()},
            "expected_rep_size_final": self.expected_dim_final,
            "expected_rep_size_cumulative": self.expected_dim_cumulative,
        }


def run_cascade(record: PredictionRecord, policy: ThresholdPolicy) -> CascadeReport:
    if tuple(record.dims) != tuple(policy.dims):
        raise ValueError(f"policy covers {policy.dims}, record has {record.dims}")
    stop = _stop_index(record.confidences, policy.thresholds)
    dims = np.asarray(record.dims, dtype=np.float64)
    usage = np.bincount(stop, minlength=len(dims)) / record.n
    cumulative = np.cumsum(dims)
    return CascadeReport(
        _accuracy(record, stop),
        {m: float(p) for m, p in zip(record.dims, usage)},
        float(usage @ dims),
        float(usage @ cumulative),
    )
