import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from losscal import metrics
from losscal.metrics import (
    ScoreSet,
    aupr,
    auroc,
    balanced_accuracy,
    detection_error,
    detection_report,
    fpr_at_tpr95,
    per_class_sensitivity,
)

# coarse grid so hypothesis produces plenty of ties
scores = arrays(np.float64, st.integers(1, 40), elements=st.integers(0, 12).map(lambda v: v / 12))


def random_instance(rng, n_max=100):
    n_in, n_out = rng.integers(1, n_max + 1, size=2)
    if rng.random() < 0.5:
        return rng.integers(0, 10, n_in) / 10.0, rng.integers(0, 10, n_out) / 10.0
    return rng.random(n_in), rng.random(n_out)


def brute_force_metrics(ins, outs):
    ins, outs = list(ins), list(outs)
    return {
        "fpr_at_tpr95": oracles.fpr_at_tpr95(ins, outs),
        "dterr": oracles.detection_error(ins, outs),
        "auroc": oracles.auroc(ins, outs),
        "aupr_in": oracles.aupr(ins, outs, "in"),
        "aupr_out": oracles.aupr(ins, outs, "out"),
    }


def test_fpr_examples():
    assert fpr_at_tpr95([0.9] * 5, [0.1] * 5) == 0.0
    assert fpr_at_tpr95([0.9, 0.8, 0.7, 0.6], [0.75, 0.65, 0.55, 0.45]) == 0.5
    same = np.random.default_rng(0).random(50)
    assert fpr_at_tpr95(same, same.copy()) >= 0.95


def test_detection_error_examples():
    assert detection_error([0.9, 0.8], [0.1, 0.2]) == 0.0
    same = [0.3, 0.5, 0.5, 0.9]
    assert detection_error(same, list(same)) == 0.5
    assert detection_error([0.9, 0.6], [0.7, 0.2]) == 0.25


def test_auroc_examples():
    assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert auroc([0.8, 0.2], [0.6, 0.4]) == 0.5
    ins, outs = np.random.default_rng(1).random((2, 30))
    assert auroc(outs, ins) == pytest.approx(1 - auroc(ins, outs), abs=1e-15)


def test_aupr_examples():
    assert aupr([0.9, 0.8], [0.1, 0.2], positive="in") == 1.0
    assert aupr([0.9, 0.8], [0.1, 0.2], positive="out") == 1.0
    # thresholds 0.8 (P=1, R=.5), 0.6, 0.4 (R unchanged), 0.2 (P=.5, R=1)
    assert aupr([0.8, 0.2], [0.6, 0.4], positive="in") == pytest.approx(0.75, abs=1e-15)
    assert oracles.aupr([0.8, 0.2], [0.6, 0.4]) == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(ValueError):
        aupr([0.5], [0.4], positive="both")


def test_empty_lists_fail():
    for fn in (fpr_at_tpr95, detection_error, auroc, aupr):
        with pytest.raises(ValueError, match="nonempty"):
            fn([], [0.5])
        with pytest.raises(ValueError, match="nonempty"):
            fn([0.5], [])


def test_all_metrics_match_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(200):
        ins, outs = random_instance(rng)
        report = detection_report(ins, outs)
        for key, ref in brute_force_metrics(ins, outs).items():
            assert getattr(report, key) == pytest.approx(ref, abs=1e-10), key


def test_auroc_rank_formula_matches_trapezoid():
    rng = np.random.default_rng(3)
    for _ in range(100):
        ins, outs = random_instance(rng, n_max=200)
        assert auroc(ins, outs) == pytest.approx(oracles.auroc_trapezoid(list(ins), list(outs)), abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(ins=scores, outs=scores)
def test_metric_bounds(ins, outs):
    rep = detection_report(ins, outs)
    for key in metrics.TABLE_COLUMNS:
        assert 0.0 <= getattr(rep, key) <= 1.0
    assert rep.dterr <= 0.5
    if ins.min() > outs.max():
        assert rep.fpr_at_tpr95 == 0.0


@settings(max_examples=60, deadline=None)
@given(ins=scores, outs=scores, scale=st.floats(0.1, 10), shift=st.floats(-5, 5))
def test_monotone_transform_invariance(ins, outs, scale, shift):
    warp = lambda s: np.exp(scale * s) + shift
    a, b = detection_report(ins, outs), detection_report(warp(ins), warp(outs))
    for key in metrics.TABLE_COLUMNS:
        assert getattr(a, key) == pytest.approx(getattr(b, key), abs=1e-12)


def test_tpr95_threshold_admits_95_percent():
    ins = np.arange(1, 101) / 100.0
    tau = metrics.tpr95_threshold(ins)
    assert tau == pytest.approx(0.06)
    assert np.mean(ins >= tau) == 0.95


def test_report_row_and_table_round_trip(tmp_path):
    rep = detection_report([0.9, 0.95], [0.1, 0.2])
    assert rep.as_row("far") == ["far", "0.0000", "0.0000", "100.0000", "100.0000", "100.0000"]
    path = tmp_path / "t.csv"
    metrics.write_table([("far", rep)], path)
    assert path.read_text().splitlines()[0] == "dataset,fpr_at_tpr95,dterr,auroc,aupr_in,aupr_out"
    back = metrics.read_table(path)
    assert back == [{"dataset": "far", "fpr_at_tpr95": "0.0000", "dterr": "0.0000", "auroc": "100.0000",
                     "aupr_in": "100.0000", "aupr_out": "100.0000"}]
    assert (rep.n_in, rep.n_out) == (2, 2)


def test_scoreset_flattens():
    s = ScoreSet([[0.1, 0.2]], [0.3])
    assert s.in_scores.shape == (2,)


def test_balanced_accuracy_examples():
    assert balanced_accuracy([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert balanced_accuracy([0, 0, 1, 0], [0, 0, 1, 1], 2) == 0.75
    labels = np.repeat(np.arange(4), 5)
    assert balanced_accuracy(np.zeros(20, int), labels, 4) == 0.25


def test_sensitivity_examples():
    np.testing.assert_array_equal(per_class_sensitivity([0, 1], [0, 1], 2), [1.0, 1.0])
    sens = per_class_sensitivity([0, 0, 1, 1], [0, 0, 0, 1], 3)
    assert sens[0] == pytest.approx(2 / 3)
    assert np.isnan(sens[2])
    assert balanced_accuracy([0, 0, 1, 1], [0, 0, 0, 1], 3) == pytest.approx((2 / 3 + 1) / 2)


def test_length_mismatch_fails():
    with pytest.raises(ValueError, match="length"):
        per_class_sensitivity([0, 1], [0], 2)
    with pytest.raises(ValueError, match="length"):
        balanced_accuracy([0], [0, 1], 2)
