import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octfp import metrics

import oracles


def test_confusion_perfect_prediction_is_diagonal():
    labels = np.array([[0, 1], [2, 3]])
    cm = metrics.confusion_matrix(labels, labels)
    assert np.array_equal(cm, np.eye(4, dtype=np.int64))


def test_confusion_all_wrong_single_cell():
    pred = np.zeros((3, 4), dtype=int)
    true = np.ones((3, 4), dtype=int)
    cm = metrics.confusion_matrix(pred, true)
    assert cm[1, 0] == 12 and cm.sum() == 12


def test_confusion_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pred = rng.integers(0, 4, size=(8, 8))
        true = rng.integers(0, 4, size=(8, 8))
        assert np.array_equal(metrics.confusion_matrix(pred, true),
                              oracles.confusion_scalar(pred, true))


def test_confusion_rejects_out_of_range():
    with pytest.raises(ValueError, match="outside"):
        metrics.confusion_matrix([4], [0])


def test_miou_perfect_is_one():
    cm = np.diag([5, 2, 9, 1])
    assert metrics.miou(cm) == 1.0


def test_miou_total_swap_is_zero():
    cm = np.array([[0, 3, 0, 0], [4, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]])
    assert metrics.miou(cm) == 0.0


def test_miou_hand_example():
    cm = np.array([[2, 1], [1, 2]])
    assert metrics.miou(cm) == pytest.approx(0.5)


def test_miou_excludes_absent_classes():
    cm = np.diag([7, 0, 3, 0])
    assert metrics.miou(cm) == 1.0


def test_pixel_accuracy_hand_examples():
    assert metrics.pixel_accuracy(np.diag([3, 1])) == 1.0
    assert metrics.pixel_accuracy(np.array([[3, 1], [2, 4]])) == pytest.approx(0.7)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_miou_pa_invariant_under_label_permutation(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 4, size=(6, 6))
    true = rng.integers(0, 4, size=(6, 6))
    perm = rng.permutation(4)
    cm = metrics.confusion_matrix(pred, true)
    cm_p = metrics.confusion_matrix(perm[pred], perm[true])
    assert metrics.miou(cm) == pytest.approx(metrics.miou(cm_p), abs=1e-12)
    assert metrics.pixel_accuracy(cm) == pytest.approx(
        metrics.pixel_accuracy(cm_p), abs=1e-12)


def test_both_equal_one_iff_diagonal():
    rng = np.random.default_rng(4)
    diag = np.diag(rng.integers(1, 9, size=4))
    assert metrics.miou(diag) == 1.0 and metrics.pixel_accuracy(diag) == 1.0
    off = diag.copy()
    off[0, 1] = 1
    assert metrics.miou(off) < 1.0 and metrics.pixel_accuracy(off) < 1.0


def test_eer_perfect_separation_is_zero():
    assert metrics.eer([5.0, 6.0, 7.0], [1.0, 2.0]) == 0.0


def test_eer_identical_distributions_near_half():
    scores = list(np.linspace(0, 1, 40))
    assert metrics.eer(scores, scores) == pytest.approx(50.0, abs=2.0)


def test_eer_matches_sweep_oracle():
    rng = np.random.default_rng(9)
    for _ in range(50):
        g = rng.normal(1.0, 1.0, size=rng.integers(5, 15))
        i = rng.normal(0.0, 1.0, size=rng.integers(5, 15))
        assert metrics.eer(g, i) == pytest.approx(
            oracles.eer_scalar(list(g), list(i)), abs=1e-9)


def test_fmr100_trivial_cases():
    assert metrics.fmr100([5.0, 6.0], [1.0, 2.0]) == 0.0
    # every genuine below every impostor: rejecting all impostors rejects
    # all genuine attempts too
    assert metrics.fmr100([1.0, 2.0], [5.0, 6.0]) == 100.0


def test_fmr100_and_gmr_match_sweep_oracle():
    rng = np.random.default_rng(10)
    for _ in range(50):
        g = rng.normal(1.0, 1.0, size=rng.integers(5, 15))
        i = rng.normal(0.0, 1.0, size=rng.integers(5, 15))
        assert metrics.fmr100(g, i) == pytest.approx(
            oracles.fnmr_at_fmr_scalar(list(g), list(i), 1.0), abs=1e-9)
        assert metrics.gmr_at_fmr(g, i, 5.0) == pytest.approx(
            100.0 - oracles.fnmr_at_fmr_scalar(list(g), list(i), 5.0), abs=1e-9)


def test_gmr_handles_single_scores():
    assert metrics.gmr_at_fmr([2.0], [1.0], 5.0) == 100.0
    assert metrics.fmr100([1.0], [1.0]) == 100.0


def test_fmr100_is_complement_of_gmr_at_one_percent():
    rng = np.random.default_rng(12)
    g = rng.normal(1.0, 1.0, size=30)
    i = rng.normal(0.0, 1.0, size=30)
    assert metrics.fmr100(g, i) == pytest.approx(
        100.0 - metrics.gmr_at_fmr(g, i, 1.0), abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
@settings(max_examples=30, deadline=None)
def test_score_metrics_invariant_under_increasing_transform(seed, scale, shift):
    rng = np.random.default_rng(seed)
    g = rng.normal(1.0, 1.0, size=12)
    i = rng.normal(0.0, 1.0, size=12)
    tg, ti = scale * g + shift, scale * i + shift
    assert metrics.eer(g, i) == pytest.approx(metrics.eer(tg, ti), abs=1e-9)
    assert metrics.fmr100(g, i) == pytest.approx(metrics.fmr100(tg, ti), abs=1e-9)
    assert metrics.gmr_at_fmr(g, i) == pytest.approx(
        metrics.gmr_at_fmr(tg, ti), abs=1e-9)


def test_empty_scores_rejected():
    with pytest.raises(ValueError, match="empty"):
        metrics.eer([], [1.0])
