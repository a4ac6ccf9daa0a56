import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sevit_ids import evalkit as E
from sevit_ids.errors import DataError, ShapeError
from sevit_ids.model import ModelSpec, build_model
from sevit_ids.numkernel import make_rng


def counting_cm(y_true, y_pred, k):
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        cm[t][p] += 1
    return np.array(cm)


def mann_whitney(scores, positive):
    """Fraction of (positive, negative) pairs ranked correctly, ties count half."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def random_cm(rng, k):
    cm = rng.integers(0, 20, size=(k, k))
    if cm.sum() == 0:
        cm[0, 0] = 1
    return cm


# -- confusion matrix --------------------------------------------------------


def test_cm_perfect():
    cm = E.confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert np.array_equal(cm, np.diag([1, 1, 2]))


def test_cm_always_zero_prediction():
    cm = E.confusion_matrix([0, 1, 1, 2], [0, 0, 0, 0], 3)
    assert cm[:, 0].tolist() == [1, 2, 1] and cm[:, 1:].sum() == 0


@pytest.mark.parametrize("seed", range(10))
def test_cm_matches_counting_loop(seed):
    rng = make_rng(seed)
    k = int(rng.integers(2, 7))
    y, p = rng.integers(0, k, 40), rng.integers(0, k, 40)
    cm = E.confusion_matrix(y, p, k)
    assert np.array_equal(cm, counting_cm(y, p, k))
    assert cm.sum() == 40


def test_cm_rejects_out_of_range():
    with pytest.raises(DataError):
        E.confusion_matrix([0, 3], [0, 1], 3)
    with pytest.raises(ShapeError):
        E.confusion_matrix([0, 1], [0], 3)


# -- class report ------------------------------------------------------------


def test_report_two_class_hand_case():
    # true 0: 8 right, 2 wrong; true 1: 1 wrong, 9 right
    r = E.class_report(np.array([[8, 2], [1, 9]]), ["a", "b"])
    assert r.precision == [8 / 9, 9 / 11]
    assert r.recall == [0.8, 0.9]
    assert r.class_fpr == [0.1, 0.2]
    assert r.macro_fpr == pytest.approx(0.15)
    assert r.accuracy == 17 / 20
    assert r.support == [10, 10]


def test_zero_over_zero_is_zero():
    # class 2 never predicted and never present
    r = E.class_report(np.array([[3, 1, 0], [0, 2, 0], [0, 0, 0]]))
    assert r.precision[2] == 0 and r.recall[2] == 0 and r.f1[2] == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 8))
def test_micro_identity(seed, k):
    cm = random_cm(make_rng(seed), k)
    r = E.class_report(cm)
    acc = E.accuracy_from_cm(cm)
    assert r.micro["precision"] == r.micro["recall"] == r.micro["f1"] == r.accuracy == float(acc)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 8))
def test_report_is_pure_and_consistent(seed, k):
    cm = random_cm(make_rng(seed), k)
    a, b = E.class_report(cm), E.class_report(cm.copy())
    assert a.to_dict() == b.to_dict()
    assert a.support == cm.sum(axis=1).tolist() and a.total == cm.sum()
    assert all(0 <= v <= 1 for v in a.precision + a.recall + a.f1 + a.class_fpr)


def test_accuracy_is_exact_fraction():
    assert E.accuracy_from_cm([[1, 2], [0, 0]]) == Fraction(1, 3)


def test_empty_cm_rejected():
    with pytest.raises(DataError):
        E.class_report(np.zeros((2, 2), dtype=int))


def test_report_text_layout():
    text = E.class_report(np.array([[5, 0], [1, 4]]), ["Normal", "DDoS"]).to_text()
    assert "precision" in text and "weighted avg" in text and "macro FPR" in text


# -- ROC ---------------------------------------------------------------------


def test_roc_perfect_separation():
    r = E.roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], 1)
    assert r.auc == 1.0


def test_roc_identical_scores_is_diagonal():
    r = E.roc_curve(np.full(6, 0.3), [0, 1, 0, 1, 1, 0], 1)
    assert r.fpr.tolist() == [0, 1] and r.tpr.tolist() == [0, 1] and r.auc == 0.5


def test_roc_single_class_truth():
    with pytest.raises(DataError):
        E.roc_curve([0.1, 0.2], [1, 1], 1)


@pytest.mark.parametrize("seed", range(10))
def test_auc_matches_pairwise_oracle(seed):
    rng = make_rng(seed)
    y = rng.integers(0, 2, 20)
    y[:2] = [0, 1]
    scores = rng.integers(0, 8, 20) / 8.0  # coarse grid forces ties
    r = E.roc_curve(scores, y, 1)
    assert abs(r.auc - mann_whitney(scores, y == 1)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 50))
def test_roc_properties(seed, n):
    rng = make_rng(seed)
    y = rng.integers(0, 3, n)
    y[0], y[1] = 0, 2
    probs = rng.dirichlet(np.ones(3), size=n)
    r = E.roc_curve(probs, y, 2)
    assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)
    assert r.fpr[0] == r.tpr[0] == 0 and r.fpr[-1] == r.tpr[-1] == 1
    assert 0 <= r.auc <= 1
    assert abs(r.auc - mann_whitney(probs[:, 2], y == 2)) < 1e-12


def test_roc_csv(tmp_path):
    E.roc_curve([0.9, 0.1], [1, 0], 1).to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr" and lines[1].startswith("inf,")


# -- latency -----------------------------------------------------------------


def tiny_model(hidden=3):
    return build_model(ModelSpec("Parallel_H32", steps=5, embed=4, hidden=hidden, n_classes=3), make_rng(0))


def test_latency_positive():
    rep = E.latency_benchmark(tiny_model(), np.zeros((3, 5, 1)), warmup=2, reps=5)
    assert rep.mean_seconds > 0 and rep.instances == 5


def test_latency_single_rep_equals_total():
    rep = E.latency_benchmark(tiny_model(), np.zeros((1, 5, 1)), warmup=0, reps=1)
    assert rep.mean_seconds == rep.total_seconds


def test_latency_rejects_zero_reps():
    with pytest.raises(DataError):
        E.latency_benchmark(tiny_model(), np.zeros((1, 5, 1)), reps=0)


def test_latency_wider_model_logged(capsys):
    x = np.zeros((1, 5, 1))
    small = E.latency_benchmark(tiny_model(3), x, reps=50).mean_seconds
    wide = E.latency_benchmark(tiny_model(96), x, reps=50).mean_seconds
    # machine-dependent, reported but not asserted
    print(f"latency small={small:.3e}s wide={wide:.3e}s")


# -- evaluate ----------------------------------------------------------------


def test_evaluate_round_trip():
    rng = make_rng(2)
    y = np.repeat(np.arange(3), 5)
    probs = rng.dirichlet(np.ones(3), size=15)
    rep = E.evaluate(probs, y, ["a", "b", "c"], loss=0.5)
    d = json.loads(rep.to_json())
    assert d["accuracy"] == float(E.accuracy_from_cm(rep.confusion))
    assert sorted(d["auc"]) == ["a", "b", "c"]
    assert "confusion matrix" in rep.to_text()


def test_evaluate_skips_absent_class_roc():
    probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.7, 0.1]])
    rep = E.evaluate(probs, [0, 1], ["a", "b", "c"])
    assert sorted(rep.roc) == [0, 1]
