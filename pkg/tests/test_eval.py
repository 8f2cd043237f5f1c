import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from posr.errors import MetricsParseError
from posr.eval import (
    CSV_FIELDS,
    MetricsRecord,
    accuracy,
    aggregate_across_runs,
    aggregate_runs,
    auroc,
    format_mean_std,
    format_report,
    metrics_csv_text,
    read_metrics_csv,
    write_metrics_csv,
)


def rec(acc, method="CE_clf", run="run0", fold=0, au=None):
    return MetricsRecord(run, fold, fold, method, acc, au, 0, 10)


def test_accuracy_examples():
    assert accuracy([1, 0, 1, 1], [1, 0, 0, 1]) == 0.75
    assert accuracy([2, 1], [2, 1]) == 1.0
    assert accuracy([1, 1, 0], [0, 0, 1]) == 0.0
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1], [1, 0])


def test_constant_predictor_balanced():
    labels = np.array([0, 1] * 50)
    assert abs(accuracy(np.zeros(100), labels) - 0.5) <= 1 / 100


def test_auroc_examples():
    assert auroc([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert auroc([0.1, 0.9], [0.5]) == 0.5
    assert auroc([0.3, 0.3, 0.3], [0.3, 0.3]) == 0.5
    with pytest.raises(ValueError):
        auroc([], [0.1])
    with pytest.raises(ValueError):
        auroc([0.1], [])


scores = st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=15)


@settings(max_examples=200, deadline=None)
@given(scores, scores)
def test_auroc_matches_pairwise(known, unknown):
    assert auroc(known, unknown) == pytest.approx(O.auroc_pairwise(known, unknown), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(scores, scores)
def test_auroc_monotone_invariance(known, unknown):
    f = lambda x: np.exp(np.asarray(x) / 3.0) * 7 - 2
    assert auroc(f(known), f(unknown)) == pytest.approx(auroc(known, unknown), abs=1e-12)


def test_format():
    assert format_mean_std(0.7283, 0.1422) == "72.83 (±14.22)"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert aggregate_runs([rec(0.8), rec(0.8, fold=1)])["CE_clf"].formatted() == "80.00 (±0.00)"
    assert aggregate_runs([rec(0.7), rec(0.9, fold=1)])["CE_clf"].formatted() == "80.00 (±14.14)"


def test_single_record_flagged():
    with pytest.warns(UserWarning, match="single"):
        agg = aggregate_runs([rec(0.6)])["CE_clf"]
    assert agg.single and agg.std == 0.0 and agg.formatted() == "60.00 (±0.00)"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=12))
def test_aggregate_mean_in_range(accs):
    agg = aggregate_runs([rec(a, fold=i) for i, a in enumerate(accs)])["CE_clf"]
    assert min(accs) - 1e-12 <= agg.mean <= max(accs) + 1e-12


def test_aggregate_per_method_and_runs():
    records = [rec(0.6, "A", "r0", 0), rec(0.8, "A", "r0", 1), rec(1.0, "A", "r1", 0), rec(0.5, "B", "r0", 0), rec(0.7, "B", "r0", 1)]
    folds = aggregate_runs(records)
    assert set(folds) == {"A", "B"} and folds["A"].n == 3
    runs = aggregate_across_runs(records)
    assert runs["A"].n == 2 and runs["A"].mean == pytest.approx(0.85)
    assert runs["B"].single


def test_record_validation():
    with pytest.raises(ValueError):
        rec(1.2)
    with pytest.raises(ValueError):
        rec(0.5, au=-0.1)


def test_csv_round_trip(tmp_path):
    records = [rec(0.75, "GCPL_clf+GCPL_ossr", au=0.9), rec(0.5, fold=1)]
    path = tmp_path / "m.csv"
    write_metrics_csv(records, path)
    raw = path.read_bytes()
    assert raw.startswith(",".join(CSV_FIELDS).encode() + b"\n") and b"\r" not in raw
    assert read_metrics_csv(path) == records
    assert metrics_csv_text(records).splitlines()[2] == "run0,1,1,CE_clf,0.500000,,0,10"


@pytest.mark.parametrize(
    "body, line",
    [
        ("run_id,fold\n", 1),
        (",".join(CSV_FIELDS) + "\nrun0,0,0,CE_clf,0.5,,0\n", 2),
        (",".join(CSV_FIELDS) + "\nrun0,0,0,CE_clf,0.5,,0,10\nrun0,x,0,CE_clf,0.5,,0,10\n", 3),
        (",".join(CSV_FIELDS) + "\nrun0,0,0,CE_clf,1.5,,0,10\n", 2),
        (",".join(CSV_FIELDS) + "\nrun0,0,0,CE_clf,nan,,0,10\n", 2),
    ],
)
def test_csv_parse_errors(tmp_path, body, line):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(MetricsParseError) as info:
        read_metrics_csv(path)
    assert info.value.line == line and f":{line}:" in str(info.value)


def test_report_contains_format():
    text = format_report([rec(0.7, au=0.6), rec(0.9, fold=1, au=0.8)])
    assert "80.00 (±14.14)" in text and "0.7000" in text
