import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doublemix.metrics import ResultMatrix, as_percent, avg_accuracy, avg_forgetting

ESC50_ORDER1 = [81.00, 76.85, 67.87, 69.38, 66.52]
ESC50_ORDER2 = [85.00, 70.00, 72.10, 69.40, 68.82]


def lower_triangles(max_t=5):
    """Random complete lower-triangular accuracy matrices."""
    return st.integers(1, max_t).flatmap(lambda T: st.lists(
        st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=T, max_size=T),
        min_size=T, max_size=T))


def test_published_rows_average():
    assert avg_accuracy(ESC50_ORDER1) == pytest.approx(72.32, abs=0.01)
    assert avg_accuracy(ESC50_ORDER2) == pytest.approx(73.06, abs=0.01)


def test_avg_accuracy_trivial_cases():
    assert avg_accuracy(ResultMatrix(1).record(0, 0, 0.37)) == pytest.approx(0.37)
    R = ResultMatrix.from_rows([[0.9], [0.1, 0.4], [0.4, 0.4, 0.4]])
    assert avg_accuracy(R) == pytest.approx(0.4)


def test_forgetting_hand_example():
    R = ResultMatrix.from_rows([[0.80], [0.50, 0.60], [0.50, 0.40, 0.90]])
    # ((0.80 - 0.50) + (0.60 - 0.40) + 0) / 3
    assert avg_forgetting(R) == pytest.approx(0.1667, abs=1e-4)


def test_forgetting_trivial_cases():
    assert avg_forgetting(ResultMatrix(1).record(0, 0, 0.5)) == 0.0
    const = ResultMatrix.from_rows([[0.7], [0.7, 0.7], [0.7, 0.7, 0.7]])
    assert avg_forgetting(const) == pytest.approx(0.0, abs=1e-15)


def test_forgetting_can_be_negative():
    R = ResultMatrix.from_rows([[0.2], [0.6, 0.5]])
    assert avg_forgetting(R) < 0


def test_record_contract():
    R = ResultMatrix(3)
    R.record(0, 0, 0.8)
    assert R[0, 0] == 0.8
    with pytest.raises(IndexError):
        R.record(0, 1, 0.5)
    with pytest.raises(ValueError):
        R.record(0, 0, 0.8)
    with pytest.raises(ValueError):
        R.record(1, 0, 1.2)
    with pytest.raises(IndexError):
        R[0, 2]


def test_incomplete_rows_raise():
    R = ResultMatrix(2).record(0, 0, 0.5).record(1, 1, 0.5)
    with pytest.raises(ValueError):
        avg_accuracy(R)
    R2 = ResultMatrix(2).record(1, 0, 0.5).record(1, 1, 0.5)
    avg_accuracy(R2)
    with pytest.raises(ValueError):
        avg_forgetting(R2)


def test_csv_roundtrip(tmp_path):
    R = ResultMatrix.from_rows([[0.8], [0.5, 0.6], [0.5, 0.4, 0.9]])
    R.to_csv(tmp_path / "R.csv")
    back = ResultMatrix.from_csv(tmp_path / "R.csv")
    np.testing.assert_array_equal(np.nan_to_num(back.values, nan=-1), np.nan_to_num(R.values, nan=-1))
    header = (tmp_path / "R.csv").read_text().splitlines()[0]
    assert header == "checkpoint,task0,task1,task2"


def test_as_percent_rounds_to_two_places():
    assert as_percent(0.723245) == 72.32
    assert as_percent(1.0) == 100.0


@settings(max_examples=60, deadline=None)
@given(lower_triangles(), st.floats(0.01, 1.0))
def test_metrics_scale_linearly(rows, c):
    R = ResultMatrix.from_rows(rows)
    scaled = ResultMatrix.from_rows([[c * v for v in row] for row in rows])
    assert avg_accuracy(scaled) == pytest.approx(c * avg_accuracy(R), abs=1e-12)
    assert avg_forgetting(scaled) == pytest.approx(c * avg_forgetting(R), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(lower_triangles(), st.floats(-0.5, 0.5))
def test_forgetting_shift_invariant(rows, k):
    arr = np.tril(np.asarray(rows, dtype=float))
    shifted = arr + k
    assert avg_forgetting(shifted) == pytest.approx(avg_forgetting(arr), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(lower_triangles())
def test_forgetting_nonnegative_when_columns_decay(rows):
    arr = np.asarray(rows, dtype=float)
    T = arr.shape[0]
    # sort each column so that accuracy only falls after the task is learned
    for i in range(T):
        arr[i:, i] = np.sort(arr[i:, i])[::-1]
    assert avg_forgetting(np.tril(arr)) >= -1e-12
