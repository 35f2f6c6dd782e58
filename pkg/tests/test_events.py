"""Event container, windowing and the binary/CSV file formats."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evimatch.events import (EventStream, accumulate_mask, load_events,
                             save_events, window)


def make_stream(n=20, width=16, height=12, seed=0):
    rng = np.random.default_rng(seed)
    ts = np.sort(rng.uniform(0.0, 1.0, n))
    return EventStream(
        rng.integers(0, width, n), rng.integers(0, height, n), ts,
        rng.choice([-1, 1], n), width, height)


def test_stream_dtypes_and_len():
    s = make_stream()
    assert s.xs.dtype == np.int32 and s.ys.dtype == np.int32
    assert s.ts.dtype == np.float64 and s.ps.dtype == np.int8
    assert len(s) == 20


def test_stream_rejects_mismatched_lengths():
    with pytest.raises(ValueError, match="equal length"):
        EventStream([0, 1], [0], [0.0, 0.1], [1, 1], 4, 4)


def test_stream_rejects_out_of_range_coordinate():
    with pytest.raises(ValueError, match="event 1"):
        EventStream([0, 9], [0, 0], [0.0, 0.1], [1, 1], 4, 4)


def test_stream_rejects_bad_polarity():
    with pytest.raises(ValueError, match="polarity 0"):
        EventStream([0, 1], [0, 0], [0.0, 0.1], [1, 0], 4, 4)


def test_stream_resorts_unsorted_timestamps():
    s = EventStream([0, 1, 2], [0, 0, 0], [0.2, 0.1, 0.3], [1, -1, 1], 4, 4)
    assert s.resorted
    assert list(s.ts) == [0.1, 0.2, 0.3]
    assert list(s.xs) == [1, 0, 2]


def test_stream_stable_resort_keeps_tie_order():
    s = EventStream([0, 1, 2, 3], [0, 0, 0, 0], [0.5, 0.2, 0.2, 0.2],
                    [1, 1, -1, 1], 8, 4)
    # the three t=0.2 events keep their original relative order
    assert list(s.xs) == [1, 2, 3, 0]
    assert list(s.ps) == [1, -1, 1, 1]


def test_sorted_input_is_not_flagged():
    assert not make_stream().resorted


def test_window_closed_on_both_ends():
    s = EventStream([0, 1, 2, 3], [0, 0, 0, 0], [0.0, 0.1, 0.2, 0.3],
                    [1, 1, 1, 1], 4, 4)
    w = window(s, t_end=0.2, delta_t=0.1)
    assert list(w.ts) == [0.1, 0.2]
    assert w.extent() == (pytest.approx(0.1), pytest.approx(0.2))


def test_window_empty_keeps_bounds():
    s = make_stream()
    w = window(s, t_end=9.0, delta_t=0.5)
    assert len(w) == 0
    assert w.extent() == (8.5, 9.0)


def test_window_rejects_nonpositive_delta():
    with pytest.raises(ValueError, match="delta_t"):
        window(make_stream(), 1.0, 0.0)


def test_accumulate_mask_marks_event_pixels():
    s = EventStream([1, 1, 3], [2, 2, 0], [0.0, 0.1, 0.2], [1, -1, 1], 4, 4)
    m = accumulate_mask(s)
    assert m.mask.shape == (4, 4)
    assert m.mask[2, 1] == 1 and m.mask[0, 3] == 1
    assert m.mask.sum() == 2
    assert m.coverage == pytest.approx(2 / 16)


def test_binary_roundtrip_exact(tmp_path):
    s = make_stream(seed=3)
    # quantize to whole microseconds so the roundtrip is bit exact
    s = EventStream(s.xs, s.ys, np.round(s.ts * 1e6) * 1e-6, s.ps,
                    s.width, s.height)
    path = tmp_path / "ev.evt"
    save_events(path, s)
    back = load_events(path)
    assert back.width == s.width and back.height == s.height
    np.testing.assert_array_equal(back.xs, s.xs)
    np.testing.assert_array_equal(back.ys, s.ys)
    np.testing.assert_allclose(back.ts, s.ts, atol=1e-12)
    np.testing.assert_array_equal(back.ps, s.ps)


def test_binary_empty_stream_roundtrip(tmp_path):
    s = EventStream([], [], [], [], 8, 6)
    path = tmp_path / "empty.evt"
    save_events(path, s)
    back = load_events(path)
    assert len(back) == 0 and back.width == 8 and back.height == 6


def test_load_truncated_file_raises(tmp_path):
    s = make_stream()
    path = tmp_path / "cut.evt"
    save_events(path, s)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="expected 20 records"):
        load_events(path)


def test_csv_load_with_header(tmp_path):
    path = tmp_path / "ev.csv"
    path.write_text("x,y,t,p\n1,2,1000,1\n3,4,2000,-1\n")
    s = load_events(path, width=8, height=8)
    assert list(s.xs) == [1, 3]
    assert s.ts[1] == pytest.approx(0.002)
    assert list(s.ps) == [1, -1]


def test_csv_requires_resolution(tmp_path):
    path = tmp_path / "ev.csv"
    path.write_text("1,2,1000,1\n")
    with pytest.raises(ValueError, match="width and height"):
        load_events(path)


def test_csv_malformed_row_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2,1000,1\n1,2,oops,1\n")
    with pytest.raises(ValueError, match="line 2"):
        load_events(path, width=8, height=8)


def test_csv_wrong_field_count(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2,1000\n")
    with pytest.raises(ValueError, match="expected 4 fields"):
        load_events(path, width=8, height=8)


def test_load_unsorted_warns_and_sorts(tmp_path):
    path = tmp_path / "uns.csv"
    path.write_text("0,0,2000,1\n1,0,1000,-1\n")
    with pytest.warns(UserWarning, match="re-sorted"):
        s = load_events(path, width=4, height=4)
    assert s.resorted
    assert list(s.xs) == [1, 0]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 31), st.integers(0, 23),
                          st.integers(0, 10 ** 7), st.sampled_from([-1, 1])),
                max_size=200))
def test_binary_roundtrip_property(tmp_path_factory, rows):
    xs = [r[0] for r in rows]
    ys = [r[1] for r in rows]
    ts = [r[2] * 1e-6 for r in rows]
    ps = [r[3] for r in rows]
    order = np.argsort(ts, kind="stable")
    s = EventStream(np.asarray(xs)[order] if rows else [],
                    np.asarray(ys)[order] if rows else [],
                    np.asarray(ts)[order] if rows else [],
                    np.asarray(ps)[order] if rows else [], 32, 24)
    path = tmp_path_factory.mktemp("ev") / "p.evt"
    save_events(path, s)
    back = load_events(path)
    np.testing.assert_array_equal(back.xs, s.xs)
    np.testing.assert_allclose(back.ts, s.ts, atol=1e-12)
    np.testing.assert_array_equal(back.ps, s.ps)
