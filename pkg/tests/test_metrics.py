import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from groupmixer.errors import UsageError
from groupmixer.metrics import (
    ConfusionMatrix, accumulate, compute_metrics, confusion_from_labels, emit_report,
    f1_from_precision_recall, read_confusion_csv,
)

counts = st.integers(0, 500)
matrices = st.builds(ConfusionMatrix, tp=counts, tn=counts, fp=counts, fn=counts).filter(lambda c: c.total > 0)


def test_worked_example():
    r = compute_metrics(ConfusionMatrix(tp=50, tn=30, fp=10, fn=10))
    assert r.accuracy == pytest.approx(0.8)
    assert r.precision == pytest.approx(50 / 60)
    assert r.recall == pytest.approx(50 / 60)
    assert r.f1 == pytest.approx(0.8333, abs=1e-4)
    assert r.undefined == []


def test_high_precision_recall_pair():
    assert f1_from_precision_recall(0.9891, 0.9765) == pytest.approx(0.9828, abs=1e-3)


def test_f1_is_harmonic_not_half_harmonic():
    # P*R/(P+R) would give roughly half the value
    assert f1_from_precision_recall(0.8, 0.6) == pytest.approx(2 * 0.48 / 1.4)


def test_accumulate_cells():
    cm = ConfusionMatrix()
    for pred, act in [(1, 1), (0, 0), (1, 0), (0, 1), (1, 1)]:
        cm = accumulate(cm, pred, act)
    assert cm == ConfusionMatrix(tp=2, tn=1, fp=1, fn=1)
    assert cm.as_rows() == [[1, 1], [1, 2]]


def test_accumulate_rejects_bad_labels():
    with pytest.raises(UsageError):
        accumulate(ConfusionMatrix(), 2, 0)


def test_empty_matrix_rejected():
    with pytest.raises(UsageError):
        compute_metrics(ConfusionMatrix())


def test_undefined_precision_flagged():
    r = compute_metrics(ConfusionMatrix(tn=5, fn=3))
    assert r.precision is None and r.f1 is None
    assert r.recall == 0.0
    assert r.undefined == ["precision", "f1"]
    assert not any(isinstance(v, float) and math.isnan(v) for v in r.to_dict().values())


def test_all_negative_recall_undefined():
    r = compute_metrics(ConfusionMatrix(tn=4, fp=1))
    assert r.recall is None and "recall" in r.undefined


@given(matrices)
def test_accuracy_invariant_under_class_swap(cm):
    assert compute_metrics(cm).accuracy == pytest.approx(compute_metrics(cm.swapped()).accuracy)


@given(st.integers(1, 300), st.integers(0, 300), st.integers(0, 300))
def test_f1_equals_precision_and_recall_when_errors_balance(tp, tn, err):
    r = compute_metrics(ConfusionMatrix(tp=tp, tn=tn, fp=err, fn=err))
    assert r.precision == pytest.approx(r.recall)
    assert r.f1 == pytest.approx(r.precision)


@given(matrices, st.integers(2, 7))
def test_ratios_scale_invariant(cm, k):
    big = ConfusionMatrix(cm.tp * k, cm.tn * k, cm.fp * k, cm.fn * k)
    a, b = compute_metrics(cm), compute_metrics(big)
    for name in ("accuracy", "precision", "recall", "f1"):
        va, vb = getattr(a, name), getattr(b, name)
        assert (va is None and vb is None) or va == pytest.approx(vb)


@given(matrices)
def test_metrics_bounded(cm):
    r = compute_metrics(cm)
    for v in (r.accuracy, r.precision, r.recall, r.f1):
        assert v is None or 0.0 <= v <= 1.0
    if r.f1 is not None:
        assert min(r.precision, r.recall) - 1e-12 <= r.f1 <= max(r.precision, r.recall) + 1e-12


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), max_size=50))
def test_counts_sum_to_samples(pairs):
    cm = confusion_from_labels([p for p, _ in pairs], [a for _, a in pairs])
    assert cm.total == len(pairs)


def test_report_files_round_trip(tmp_path):
    cm = ConfusionMatrix(tp=7, tn=9, fp=2, fn=1)
    report = compute_metrics(cm, magnification="40X")
    written = emit_report(report, cm, tmp_path / "out", svg=True)
    payload = json.loads(written["json"].read_text())
    assert payload["f1"] == pytest.approx(report.f1)
    assert payload["magnification"] == "40X"
    assert payload["n"] == 19
    assert read_confusion_csv(written["csv"]) == cm
    assert written["svg"].read_text().startswith("<svg")


def test_report_deterministic(tmp_path):
    cm = ConfusionMatrix(tp=3, tn=4, fp=1, fn=2)
    r = compute_metrics(cm)
    a = emit_report(r, cm, tmp_path / "a")["json"].read_bytes()
    b = emit_report(r, cm, tmp_path / "b")["json"].read_bytes()
    assert a == b


def test_empty_report_path():
    cm = ConfusionMatrix(tp=1, tn=1)
    with pytest.raises(UsageError):
        emit_report(compute_metrics(cm), cm, "")
