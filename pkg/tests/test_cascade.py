from __future__ import annotations

import numpy as np
import pytest

from matryoshka.cascade import ThresholdPolicy, _stop_index, fit_thresholds, run_cascade
from matryoshka.classify import PredictionRecord, eval_linear, oracle_accuracy, record_from_logits
from matryoshka.dataio import SyntheticSpec, generate_synthetic
from matryoshka.mrl import NestingSpec, TrainConfig, train


def make_record(preds, labels, conf, dims=(4, 8, 16)):
    preds = np.asarray(preds)
    return PredictionRecord(tuple(dims), np.asarray(labels), preds, np.asarray(conf, float), preds[:, :, None])


def random_record(rng, n=80, dims=(4, 8, 16), L=4):
    logits = [rng.standard_normal((n, L)) * (1 + j) for j in range(len(dims))]
    return record_from_logits(dims, logits, rng.integers(0, L, n))


def test_policy_validation_and_json():
    pol = ThresholdPolicy((4, 8, 16), (0.3, 0.7))
    assert ThresholdPolicy.from_json(pol.to_json()) == pol
    with pytest.raises(ValueError):
        ThresholdPolicy((4, 8), (0.1, 0.2))
    with pytest.raises(ValueError):
        ThresholdPolicy((4, 8), (1.5,))


def test_zero_thresholds_stop_at_first():
    rec = random_record(np.random.default_rng(0))
    rep = run_cascade(rec, ThresholdPolicy(rec.dims, (0.0, 0.0)))
    assert rep.usage[4] == 1.0 and rep.expected_dim_final == 4 and rep.expected_dim_cumulative == 4
    assert rep.accuracy == pytest.approx(rec.correct[:, 0].mean())


def test_unit_thresholds_escalate_to_last():
    rec = random_record(np.random.default_rng(1))
    assert rec.confidences.max() < 1.0
    rep = run_cascade(rec, ThresholdPolicy(rec.dims, (1.0, 1.0)))
    assert rep.usage[16] == 1.0
    assert rep.expected_dim_final == 16 and rep.expected_dim_cumulative == 28


def test_expected_sizes_by_hand():
    rec = make_record([[0, 0, 0]] * 4, [0] * 4, [[0.9, 0.9, 0.9], [0.1, 0.9, 0.9], [0.1, 0.1, 0.9], [0.1, 0.1, 0.1]])
    rep = run_cascade(rec, ThresholdPolicy((4, 8, 16), (0.5, 0.5)))
    assert rep.usage == {4: 0.25, 8: 0.25, 16: 0.5}
    assert rep.expected_dim_final == pytest.approx(0.25 * 4 + 0.25 * 8 + 0.5 * 16)
    assert rep.expected_dim_cumulative == pytest.approx(0.25 * 4 + 0.25 * 12 + 0.5 * 28)


def test_stop_rule_is_inclusive():
    assert _stop_index(np.array([[0.5, 0.2, 0.1]]), (0.5, 0.9)).tolist() == [0]


def test_calibrated_confidences_reach_oracle():
    rng = np.random.default_rng(3)
    n = 100
    labels = rng.integers(0, 3, n)
    correct = rng.random((n, 3)) < np.array([0.5, 0.6, 0.7])
    preds = np.where(correct, labels[:, None], (labels[:, None] + 1) % 3)
    conf = np.where(correct, 1.0, rng.uniform(0.3, 0.9, (n, 3)))
    rec = make_record(preds, labels, conf)
    pol = fit_thresholds(rec)
    smallest_correct_conf = 1.0
    assert all(t <= smallest_correct_conf for t in pol.thresholds)
    assert run_cascade(rec, pol).accuracy == pytest.approx(oracle_accuracy(rec).oracle_top1)


def test_all_correct_at_first_gives_zero_threshold():
    rec = make_record([[1, 0, 1]] * 5, [1] * 5, np.random.default_rng(0).uniform(0.2, 0.9, (5, 3)))
    assert fit_thresholds(rec).thresholds[0] == 0.0


def test_fit_is_deterministic_and_grid_aligned():
    rec = random_record(np.random.default_rng(5))
    a, b = fit_thresholds(rec, 50), fit_thresholds(rec, 50)
    assert a == b
    grid = np.linspace(0, 1, 50)
    assert all(np.any(grid == t) for t in a.thresholds)


def test_resolution_two_grid():
    rec = random_record(np.random.default_rng(6))
    pol = fit_thresholds(rec, 2)
    assert set(pol.thresholds) <= {0.0, 1.0}
    run_cascade(rec, pol)


@pytest.mark.parametrize("mode", ["escalate-to-final", "next-stage"])
def test_guaranteed_bounds_on_random_records(mode):
    rng = np.random.default_rng(7)
    for _ in range(40):
        rec = random_record(rng)
        pol = fit_thresholds(rec, mode=mode)
        rep = run_cascade(rec, pol)
        acc = rec.correct.mean(axis=0)
        assert rep.accuracy >= acc[0] - 1e-12
        assert rep.accuracy <= oracle_accuracy(rec).oracle_top1 + 1e-12
        assert rep.expected_dim_cumulative >= rep.expected_dim_final
        assert sum(rep.usage.values()) == pytest.approx(1.0)
        assert min(rec.dims) <= rep.expected_dim_final <= max(rec.dims)
        if mode == "escalate-to-final":
            assert rep.accuracy >= acc[-1] - 1e-12


def test_errors():
    rec = random_record(np.random.default_rng(8))
    with pytest.raises(ValueError):
        fit_thresholds(rec.subset(np.array([], dtype=int)))
    with pytest.raises(ValueError):
        fit_thresholds(rec, mode="bogus")
    with pytest.raises(ValueError):
        run_cascade(rec, ThresholdPolicy((4, 16), (0.5,)))


@pytest.mark.slow
def test_fitted_policy_beats_every_fixed_granularity_on_trained_record():
    tr, te, _ = generate_synthetic(SyntheticSpec(n_test=2000))
    res = train(tr, NestingSpec((4, 8, 16, 32, 64)), "mrl", "linear", TrainConfig(epochs=30))
    _, rec = eval_linear(res.head, res.encoder, te)
    pol = fit_thresholds(rec)
    fitted = run_cascade(rec, pol).accuracy
    assert fitted >= rec.correct.mean(axis=0).max()
