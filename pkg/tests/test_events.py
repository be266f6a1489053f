import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evslam.events import (
    Event,
    EventStream,
    build_event_mat,
    build_time_surface,
    load_events_text,
    save_events_text,
)


def make_stream(records, w=16, h=12):
    return EventStream.from_records(records, w, h)


def replay_time_surface_oracle(stream, t_ref, eta):
    """Sequential per-pixel replay: the independent oracle for Eq.-style decay."""
    last = {}
    for i in range(len(stream)):
        e = stream[i]
        if e.t <= t_ref:
            last[(e.u, e.v)] = (e.t, e.p)
    vals = np.zeros((stream.height, stream.width))
    for (u, v), (t, p) in last.items():
        vals[v, u] = p * np.exp(-(t_ref - t) / eta)
    return vals


class TestTimeSurface:
    def test_event_at_t_ref_is_unit(self):
        ts = build_time_surface(make_stream([(1.0, 3, 4, 1)]), t_ref=1.0, eta=0.03)
        assert ts.values[4, 3] == 1.0

    def test_decay_one_eta_is_inv_e(self):
        eta = 0.03
        ts = build_time_surface(make_stream([(1.0, 3, 4, 1)]), t_ref=1.0 + eta, eta=eta)
        assert abs(ts.values[4, 3] - np.exp(-1)) < 1e-12

    def test_last_polarity_wins(self):
        s = make_stream([(1.0, 3, 4, 1), (1.5, 3, 4, -1)])
        ts = build_time_surface(s, t_ref=2.0, eta=0.5)
        expected = replay_time_surface_oracle(s, 2.0, 0.5)
        assert ts.values[4, 3] < 0
        assert np.allclose(ts.values, expected, atol=1e-15)

    def test_unfired_pixels_zero(self):
        ts = build_time_surface(make_stream([(1.0, 3, 4, 1)]), t_ref=1.0, eta=0.03)
        mask = np.ones_like(ts.values, dtype=bool)
        mask[4, 3] = False
        assert np.all(ts.values[mask] == 0.0)

    def test_events_after_t_ref_ignored(self):
        s = make_stream([(1.0, 3, 4, 1), (2.0, 5, 5, -1)])
        ts = build_time_surface(s, t_ref=1.5, eta=0.1)
        assert ts.values[5, 5] == 0.0
        assert ts.values[4, 3] != 0.0

    def test_nonpositive_eta_rejected(self):
        with pytest.raises(ValueError):
            build_time_surface(make_stream([(1.0, 0, 0, 1)]), t_ref=1.0, eta=0.0)

    def test_matches_replay_oracle_random(self):
        rng = np.random.default_rng(7)
        n = 4000
        t = np.sort(rng.uniform(0, 1, n))
        u = rng.integers(0, 16, n)
        v = rng.integers(0, 12, n)
        p = rng.choice([-1, 1], n)
        s = EventStream(t, u, v, p, 16, 12)
        ts = build_time_surface(s, t_ref=1.0, eta=0.05)
        oracle = replay_time_surface_oracle(s, 1.0, 0.05)
        assert np.max(np.abs(ts.values - oracle)) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 10.0), st.floats(0.0, 2.0))
    def test_decay_monotone_in_age(self, eta, age):
        # strictly decreasing magnitude as t_ref - t_last grows
        s = make_stream([(0.0, 1, 1, 1)])
        a = build_time_surface(s, t_ref=age, eta=eta).values[1, 1]
        b = build_time_surface(s, t_ref=age + 0.1, eta=eta).values[1, 1]
        assert b < a


class TestEventMat:
    def test_empty_window_all_zero(self):
        mat = build_event_mat(make_stream([(1.0, 3, 4, 1)]), t0=2.0, dt=0.5)
        assert np.all(mat.values == 0)

    def test_single_event_sets_255(self):
        mat = build_event_mat(make_stream([(1.0, 3, 4, 1)]), t0=0.9, dt=0.2)
        assert mat.values[4, 3] == 255.0
        assert mat.active_count == 1

    def test_event_just_after_window_excluded(self):
        t0, dt = 1.0, 0.5
        mat = build_event_mat(make_stream([(t0 + dt + 1e-6, 3, 4, 1)]), t0=t0, dt=dt)
        assert np.all(mat.values == 0)

    def test_boundaries_inclusive(self):
        mat = build_event_mat(make_stream([(1.0, 1, 1, 1), (1.5, 2, 2, -1)]), 1.0, 0.5)
        assert mat.values[1, 1] == 255.0 and mat.values[2, 2] == 255.0

    def test_duplicate_events_idempotent(self):
        once = build_event_mat(make_stream([(1.0, 3, 4, 1)]), 0.9, 0.2)
        twice = build_event_mat(make_stream([(1.0, 3, 4, 1), (1.0, 3, 4, 1)]), 0.9, 0.2)
        assert np.array_equal(once.values, twice.values)

    def test_matches_brute_force_scan(self):
        rng = np.random.default_rng(11)
        n = 3000
        t = np.sort(rng.uniform(0, 1, n))
        u = rng.integers(0, 16, n)
        v = rng.integers(0, 12, n)
        p = rng.choice([-1, 1], n)
        s = EventStream(t, u, v, p, 16, 12)
        t0, dt = 0.3, 0.25
        mat = build_event_mat(s, t0, dt)
        counts = np.zeros((12, 16))
        for i in range(n):
            if t0 <= t[i] <= t0 + dt:
                counts[v[i], u[i]] += 1
        assert np.array_equal(mat.values, np.where(counts > 0, 255.0, 0.0))

    def test_nonpositive_dt_rejected(self):
        with pytest.raises(ValueError):
            build_event_mat(make_stream([]), 0.0, 0.0)


class TestStreamContainer:
    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            EventStream([1.0, 0.5], [0, 0], [0, 0], [1, 1], 4, 4)
        with pytest.raises(ValueError):
            EventStream([0.0], [5], [0], [1], 4, 4)
        with pytest.raises(ValueError):
            EventStream([0.0], [0], [0], [2], 4, 4)
        with pytest.raises(ValueError):
            Event(0.0, 0, 0, 0)

    def test_slice_time(self):
        s = make_stream([(0.1, 0, 0, 1), (0.2, 1, 1, 1), (0.3, 2, 2, -1)])
        sub = s.slice_time(0.15, 0.25)
        assert len(sub) == 1 and sub[0].u == 1

    def test_text_roundtrip(self, tmp_path):
        s = make_stream([(0.1, 0, 0, 1), (0.2, 1, 1, -1), (0.30000025, 2, 3, 1)])
        path = tmp_path / "events.txt"
        save_events_text(path, s)
        s2 = load_events_text(path, 16, 12)
        assert np.allclose(s2.t, s.t, atol=1e-9)
        assert np.array_equal(s2.u, s.u)
        assert np.array_equal(s2.v, s.v)
        assert np.array_equal(s2.p, s.p)

    def test_text_monotonicity_reports_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0.1 0 0 1\n0.3 1 1 1\n0.2 2 2 0\n")
        with pytest.raises(ValueError, match="line 3"):
            load_events_text(path, 16, 12)
