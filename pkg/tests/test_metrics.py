import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapseg.errors import ContractError, DimensionError
from lapseg.metrics import (
    ConfusionMatrix,
    class_metrics,
    format_report,
    macro_average,
    predict_labels,
    report_from_confusion,
)

# Per-class IoU table rows and the corresponding averaged IoU column
TABLE_ROWS = [
    ((74.97, 86.46, 94.15, 88.63), 86.05),
    ((74.28, 86.56, 94.06, 87.97), 85.72),
    ((74.26, 87.14, 94.49, 89.09), 86.25),
    ((74.57, 86.64, 94.20, 88.87), 86.07),
]


def confusion_oracle(pred, truth, n):
    counts = np.zeros((n, n), dtype=np.int64)
    for y in range(truth.shape[0]):
        for x in range(truth.shape[1]):
            t = truth[y, x]
            if t != 255:
                counts[t, pred[y, x]] += 1
    return counts


def test_diagonal_when_perfect(rng):
    truth = rng.integers(0, 4, size=(8, 8))
    cm = ConfusionMatrix(4).add(truth, truth)
    assert (cm.counts == np.diag(np.diag(cm.counts))).all()
    assert cm.total() == 64


def test_all_ignored_leaves_matrix_unchanged(rng):
    cm = ConfusionMatrix(4)
    truth = np.full((5, 5), 255)
    cm.add(rng.integers(0, 4, size=(5, 5)), truth)
    assert cm.total() == 0


def test_random_pairs_match_oracle(rng):
    cm = ConfusionMatrix(4)
    expected = np.zeros((4, 4), dtype=np.int64)
    for _ in range(50):
        truth = rng.integers(0, 4, size=(8, 8))
        truth[rng.random((8, 8)) < 0.15] = 255
        pred = rng.integers(0, 4, size=(8, 8))
        cm.add(pred, truth)
        expected += confusion_oracle(pred, truth, 4)
    np.testing.assert_array_equal(cm.counts, expected)


def test_shape_mismatch_rejected(rng):
    with pytest.raises(DimensionError):
        ConfusionMatrix(4).add(np.zeros((2, 3), dtype=int), np.zeros((3, 2), dtype=int))


def test_out_of_range_rejected():
    with pytest.raises(DimensionError):
        ConfusionMatrix(4).add(np.array([[4]]), np.array([[0]]))


def test_accumulation_order_independent(rng):
    pairs = [
        (rng.integers(0, 3, size=(6, 6)), rng.integers(0, 3, size=(6, 6)))
        for _ in range(6)
    ]
    a = ConfusionMatrix(3)
    for p, t in pairs:
        a.add(p, t)
    b = ConfusionMatrix(3)
    for p, t in reversed(pairs):
        b.add(p, t)
    np.testing.assert_array_equal(a.counts, b.counts)
    merged = ConfusionMatrix(3)
    half1, half2 = ConfusionMatrix(3), ConfusionMatrix(3)
    for p, t in pairs[:3]:
        half1.add(p, t)
    for p, t in pairs[3:]:
        half2.add(p, t)
    merged.merge(half1).merge(half2)
    np.testing.assert_array_equal(merged.counts, a.counts)


def test_class_metrics_hand_counts():
    cm = ConfusionMatrix(2)
    # class 0: TP=3, FP=1, FN=2 (plus filler on class 1)
    cm.counts[0, 0] = 3
    cm.counts[1, 0] = 1
    cm.counts[0, 1] = 2
    m = class_metrics(cm, 0)
    assert m.precision == pytest.approx(0.75)
    assert m.recall == pytest.approx(0.6)
    assert m.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    assert m.iou == pytest.approx(0.5)


def test_class_metrics_perfect_and_absent():
    from lapseg.metrics import ClassMetrics

    cm = ConfusionMatrix(3)
    cm.counts[0, 0] = 10
    assert class_metrics(cm, 0) == ClassMetrics(1.0, 1.0, 1.0, 1.0)
    assert class_metrics(cm, 2) == ClassMetrics(1.0, 1.0, 1.0, 1.0)  # absent everywhere


def test_class_present_never_predicted():
    cm = ConfusionMatrix(2)
    cm.counts[1, 0] = 5  # truth says class 1, prediction never does
    m = class_metrics(cm, 1)
    assert m.recall == 0.0 and m.iou == 0.0 and m.f1 == 0.0


@given(st.lists(st.integers(0, 200), min_size=9, max_size=9), st.data())
@settings(max_examples=60, deadline=None)
def test_iou_f1_identity_random_matrices(entries, data):
    cm = ConfusionMatrix(3)
    cm.counts[...] = np.array(entries).reshape(3, 3)
    for c in range(3):
        m = class_metrics(cm, c)
        assert 0.0 <= m.iou <= m.f1 <= 1.0
        assert abs(m.iou - m.f1 / (2.0 - m.f1)) < 1e-12


@pytest.mark.parametrize("row,avg", TABLE_ROWS)
def test_macro_average_reproduces_table_column(row, avg):
    # the table entry is the two-decimal rendering of the class mean, so
    # the unrounded mean must sit within half an ULP (0.005) of it
    got = macro_average(v / 100.0 for v in row) * 100.0
    assert abs(got - avg) <= 0.005 + 1e-9


def test_macro_average_identical_values():
    assert macro_average([0.4, 0.4, 0.4]) == pytest.approx(0.4)
    with pytest.raises(ContractError):
        macro_average([])


def test_report_shape_and_decimals(rng):
    cm = ConfusionMatrix(3)
    cm.add(rng.integers(0, 3, size=(16, 16)), rng.integers(0, 3, size=(16, 16)))
    report = report_from_confusion(cm)
    text = format_report(report, ("background", "a", "b"))
    lines = text.strip().splitlines()
    assert len(lines) == 1 + 3 + 1  # header, three classes, average
    assert lines[-1].startswith("average")
    cells = lines[1].split()
    assert all("." in c and len(c.split(".")[1]) == 2 for c in cells[1:])


def test_predict_labels_tie_breaks_low_index():
    scores = np.zeros((1, 3, 2, 2))
    labels = predict_labels(scores)
    assert (labels == 0).all()
    scores[0, 2] = 1.0
    scores[0, 1] = 1.0
    assert (predict_labels(scores) == 1).all()


def test_report_averages_are_macro(rng):
    cm = ConfusionMatrix(4)
    cm.add(rng.integers(0, 4, size=(32, 32)), rng.integers(0, 4, size=(32, 32)))
    report = report_from_confusion(cm)
    for field in ("precision", "recall", "f1", "iou"):
        manual = macro_average(getattr(m, field) for m in report.per_class)
        assert getattr(report.average, field) == pytest.approx(manual)
