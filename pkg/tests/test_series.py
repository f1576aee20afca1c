import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symcast.series import (
    Scaler,
    SeriesError,
    SplitSpec,
    TimeSeries,
    load_csv,
    make_lags,
    split,
    split_bounds,
    write_csv,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_timeseries_rejects_short_and_nonfinite():
    with pytest.raises(SeriesError):
        TimeSeries([1.0])
    with pytest.raises(SeriesError, match="index 1"):
        TimeSeries([1.0, np.nan, 2.0])


def test_timeseries_values_are_read_only():
    ts = TimeSeries([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        ts.values[0] = 5.0


def test_load_csv_basic(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("t,value\n0,1.0\n1,2.0\n2,3.0\n")
    ts = load_csv(f, "value")
    assert ts.values.tolist() == [1.0, 2.0, 3.0]
    assert ts.name == "s"


def test_load_csv_names_bad_row(tmp_path):
    f = tmp_path / "s.csv"
    rows = ["x"] + [str(i) for i in range(6)] + ["abc", "9"]
    f.write_text("\n".join(rows) + "\n")
    with pytest.raises(SeriesError, match="row 7"):
        load_csv(f, "x")


def test_load_csv_missing_file_and_column(tmp_path):
    with pytest.raises(SeriesError, match="not found"):
        load_csv(tmp_path / "nope.csv", "x")
    f = tmp_path / "s.csv"
    f.write_text("a\n1\n2\n")
    with pytest.raises(SeriesError, match="column"):
        load_csv(f, "b")


def test_load_csv_length_of_weekly_file(tmp_path):
    f = tmp_path / "cases.csv"
    rng = np.random.default_rng(0)
    lines = ["week,cases"] + [f"{i},{v}" for i, v in enumerate(rng.poisson(30, 1196))]
    f.write_text("\n".join(lines) + "\n")
    assert len(load_csv(f, "cases", granularity="weekly")) == 1196


def test_write_then_load_is_lossless(tmp_path):
    ts = TimeSeries(np.random.default_rng(1).normal(size=50))
    write_csv(tmp_path / "o.csv", ts)
    back = load_csv(tmp_path / "o.csv", "value")
    assert np.array_equal(back.values, ts.values)


def test_make_lags_example():
    d = make_lags(TimeSeries([1.0, 2.0, 3.0, 4.0]), 2)
    assert d.inputs.tolist() == [[2.0, 1.0], [3.0, 2.0]]
    assert d.targets.tolist() == [3.0, 4.0]


def test_make_lags_errors():
    with pytest.raises(SeriesError):
        make_lags(np.array([5.0]), 1)
    with pytest.raises(SeriesError):
        make_lags(TimeSeries([1.0, 2.0]), 0)
    with pytest.raises(SeriesError):
        make_lags(TimeSeries([1.0, 2.0, 3.0]), 3)


@given(st.floats(-100, 100), st.integers(1, 5))
def test_make_lags_constant_series(c, p):
    d = make_lags(np.full(8, c), p)
    assert np.all(d.inputs == c)


@given(st.lists(finite, min_size=2, max_size=60), st.data())
def test_make_lags_round_trip(values, data):
    p = data.draw(st.integers(1, len(values) - 1))
    d = make_lags(np.array(values), p)
    # first column holds y[t-1]; walking it back plus the oldest lags rebuilds the series
    rebuilt = np.concatenate([d.inputs[0, ::-1], d.targets])
    assert np.array_equal(rebuilt, np.array(values))
    assert np.array_equal(np.concatenate([d.inputs[:, 0], d.targets[-1:]]), np.array(values)[p - 1 :])


@pytest.mark.parametrize(
    "n, spec, lengths",
    [(1200, SplitSpec(1000, 0, 200), (1000, 0, 200)), (1196, SplitSpec(1144, 0, 52), (1144, 0, 52))],
)
def test_split_lengths(n, spec, lengths):
    parts = split(TimeSeries(np.arange(n, dtype=float)), spec)
    assert tuple(len(p) for p in parts) == lengths


def test_split_index_ranges():
    assert split_bounds(SplitSpec(5, 3, 2)) == {"train": (0, 5), "calibration": (5, 8), "test": (8, 10)}
    tr, cal, te = split(TimeSeries(np.arange(10.0)), SplitSpec(5, 3, 2))
    assert tr.tolist() == [0, 1, 2, 3, 4] and cal.tolist() == [5, 6, 7] and te.tolist() == [8, 9]


def test_split_mismatch():
    with pytest.raises(SeriesError):
        split(TimeSeries(np.arange(10.0)), SplitSpec(5, 0, 2))


@given(st.integers(2, 50), st.integers(0, 20), st.integers(0, 20))
def test_split_concatenates(a, b, c):
    values = np.arange(a + b + c, dtype=float)
    assert np.array_equal(np.concatenate(split(TimeSeries(values), SplitSpec(a, b, c))), values)


def test_with_calibration_carves_tail():
    s = SplitSpec.with_calibration(1000, 200)
    assert (s.train_len, s.calibration_len, s.test_len) == (900, 100, 200)


def test_scaler_rejects_constant():
    with pytest.raises(SeriesError):
        Scaler.fit(np.ones(10))


@settings(max_examples=200)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=100))
def test_scaler_properties(values):
    arr = np.array(values)
    if arr.std() < 1e-3:
        return
    sc = Scaler.fit(arr)
    z = sc.transform(arr)
    assert abs(z.mean()) < 1e-9
    assert abs(z.std() - 1.0) < 1e-9
    assert np.allclose(sc.inverse(z), arr, rtol=0, atol=1e-12 * max(1.0, np.abs(arr).max()))
