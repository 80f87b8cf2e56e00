import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pupilkit.errors import AlignmentError, InvalidInput, UnrecoverableTrace
from pupilkit.preprocess import (RawPupilTrace, align_to_frames, clean_trace, impute_linear,
                                 mark_blinks, missing_samples, read_frame_times, read_raw_trace,
                                 replace_blinks_frame_median, write_frame_times, write_raw_trace)

PERIOD = 1000 / 60


def trace_60hz(values, right=None):
    values = np.asarray(values, dtype=float)
    n = len(values)
    t = np.arange(n) * PERIOD
    gaze = np.full(n, 100.0)
    return RawPupilTrace(t, values, values if right is None else right, gaze, gaze)


def masks(n):
    return st.lists(st.booleans(), min_size=n, max_size=n).map(np.array)


class TestBlinks:
    def test_no_sentinels(self):
        assert not mark_blinks(trace_60hz(np.full(20, 4.0))).any()

    def test_single_sentinel_gets_one_sample_pad(self):
        v = np.full(20, 4.0)
        v[7] = -1
        assert np.flatnonzero(mark_blinks(trace_60hz(v))).tolist() == [6, 7, 8]

    def test_run_of_five(self):
        v = np.full(30, 4.0)
        v[10:15] = -1
        m = mark_blinks(trace_60hz(v))
        idx = np.flatnonzero(m)
        assert len(idx) >= 7 and np.all(np.diff(idx) == 1)
        assert idx[0] <= 9 and idx[-1] >= 15

    def test_one_eye_missing_counts(self):
        v = np.full(10, 4.0)
        r = v.copy()
        r[4] = -1
        assert missing_samples(trace_60hz(v, r))[4]

    def test_nan_counts_as_missing(self):
        v = np.full(10, 4.0)
        v[2] = np.nan
        assert missing_samples(trace_60hz(v))[2]

    @given(masks(40), st.floats(0, 80), st.floats(0, 80))
    def test_monotone_in_pad(self, missing, p1, p2):
        v = np.where(missing, -1.0, 4.0)
        small, large = sorted((p1, p2))
        tr = trace_60hz(v)
        assert np.all(mark_blinks(tr, small) <= mark_blinks(tr, large))

    def test_wide_pad_in_time(self):
        v = np.full(40, 4.0)
        v[20] = -1
        m = mark_blinks(trace_60hz(v), pad_ms=50)
        # 50 ms covers three 16.7 ms periods on each side
        assert np.flatnonzero(m).tolist() == list(range(17, 24))


class TestImpute:
    def test_midpoint(self):
        tr = RawPupilTrace([0, 50, 100], [4.0, -1, 5.0], [4.0, -1, 5.0], [0, 0, 0], [0, 0, 0])
        assert impute_linear(tr, np.array([False, True, False])).pupil[1] == 4.5

    def test_leading_run_copies_first_valid(self):
        v = np.array([-1, -1, 3.0, 3.5, 4.0])
        clean = impute_linear(trace_60hz(v), v == -1)
        assert clean.pupil[:2].tolist() == [3.0, 3.0]

    @given(masks(50))
    def test_ramp_recovered_exactly(self, mask):
        if (~mask).sum() < 2:
            mask[[0, -1]] = False
        ramp = 3.0 + 0.01 * np.arange(50) * PERIOD
        lo, hi = np.flatnonzero(~mask)[[0, -1]]
        clean = impute_linear(trace_60hz(ramp), mask)
        inside = slice(lo, hi + 1)
        assert np.allclose(clean.pupil[inside], ramp[inside], rtol=0, atol=1e-12)

    @given(masks(30))
    def test_unmasked_untouched_and_clean(self, mask):
        mask[[0, 5]] = False
        rng = np.random.default_rng(int(mask.sum()))
        v = rng.uniform(3, 6, 30)
        v[mask & (rng.random(30) < 0.5)] = -1
        clean = impute_linear(trace_60hz(v), mask | (v == -1))
        keep = ~mask & (v != -1)
        assert np.array_equal(clean.pupil[keep], v[keep])
        assert np.all(np.isfinite(clean.pupil)) and np.all(clean.pupil > 0)

    def test_eyes_averaged(self):
        clean = clean_trace(trace_60hz(np.full(5, 4.0), np.full(5, 5.0)))
        assert np.all(clean.pupil == 4.5)

    def test_unrecoverable(self):
        with pytest.raises(UnrecoverableTrace):
            clean_trace(trace_60hz([-1, -1, 4.0, -1]))

    def test_timestamps_must_increase(self):
        with pytest.raises(InvalidInput):
            RawPupilTrace([0, 2, 1], [4, 4, 4], [4, 4, 4], [0, 0, 0], [0, 0, 0])

    def test_frame_median_path(self):
        v = np.array([4.0, 5.0, -1, 6.0, 9.0, 9.0])
        tr = trace_60hz(v)
        ft = [[0, 3 * PERIOD], [3 * PERIOD, 6 * PERIOD]]
        # frame one holds samples 0-2: median of 4 and 5
        assert replace_blinks_frame_median(tr, ft).pupil[2] == 4.5


def brute_align(t, pupil, ft):
    out = []
    for k, (s, e) in enumerate(ft):
        members = [p for ti, p in zip(t, pupil) if s <= ti < e]
        out.append(np.mean(members) if members else out[-1])
    return np.array(out)


class TestAlign:
    def test_one_sample_per_frame(self):
        clean = clean_trace(trace_60hz([3.0, 4.0, 5.0]))
        ft = [[k * PERIOD, (k + 1) * PERIOD] for k in range(3)]
        assert align_to_frames(clean, ft).pupil.tolist() == [3.0, 4.0, 5.0]

    def test_constant(self):
        clean = clean_trace(trace_60hz(np.full(120, 4.2)))
        ft = [[k * 40.0, (k + 1) * 40.0] for k in range(50)]
        assert np.all(align_to_frames(clean, ft).pupil == 4.2)

    def test_matches_bruteforce_windows(self, rng):
        n = 480
        t = np.sort(np.arange(n) * PERIOD + rng.uniform(-2, 2, n))
        pupil = 4 + rng.standard_normal(n) * 0.2
        tr = RawPupilTrace(t, pupil, pupil, np.full(n, 5.0), np.full(n, 5.0))
        ft = np.array([[k * 40.0, (k + 1) * 40.0] for k in range(200)])
        got = align_to_frames(clean_trace(tr), ft).pupil
        assert np.allclose(got, brute_align(t, pupil, ft), rtol=0, atol=1e-12)

    def test_stationary_mean_preserved(self, rng):
        n = 6000
        pupil = 4 + 0.1 * rng.standard_normal(n)
        tr = trace_60hz(pupil)
        ft = [[k * 40.0, (k + 1) * 40.0] for k in range(int(n * PERIOD // 40))]
        got = align_to_frames(clean_trace(tr), ft).pupil
        assert abs(got.mean() - pupil.mean()) / pupil.mean() < 1e-3

    def test_empty_frame_repeats_previous(self):
        clean = clean_trace(trace_60hz([3.0, 4.0]))
        ft = [[0, 1], [1, 2], [PERIOD, PERIOD + 1]]
        assert align_to_frames(clean, ft).pupil.tolist() == [3.0, 3.0, 4.0]

    def test_empty_first_frame(self):
        clean = clean_trace(trace_60hz([3.0, 4.0]))
        with pytest.raises(AlignmentError):
            align_to_frames(clean, [[1, 2], [PERIOD, PERIOD + 1]])

    def test_gaze_mean_ignores_invalid(self):
        tr = RawPupilTrace([0, 10, 20], [4, 4, 4], [4, 4, 4], [100, np.nan, 200], [10, np.nan, 30])
        fs = align_to_frames(clean_trace(tr), [[0, 30]])
        assert fs.gaze[0].tolist() == [150.0, 20.0]


class TestFiles:
    def test_trace_round_trip(self, tmp_path, rng):
        n = 50
        tr = RawPupilTrace(np.arange(n) * PERIOD, rng.uniform(3, 5, n), rng.uniform(3, 5, n),
                           rng.uniform(0, 1000, n), rng.uniform(0, 1000, n))
        back = read_raw_trace(write_raw_trace(tmp_path / "t.csv", tr))
        for f in ("timestamps", "left", "right", "gaze_x", "gaze_y"):
            assert np.array_equal(getattr(back, f), getattr(tr, f))

    def test_invalid_gaze_written_as_sentinel(self, tmp_path):
        tr = RawPupilTrace([0, 1], [4, 4], [4, 4], [np.nan, 3], [np.nan, 3])
        back = read_raw_trace(write_raw_trace(tmp_path / "t.csv", tr))
        assert np.isnan(back.gaze_x[0]) and back.gaze_x[1] == 3

    def test_frame_times_round_trip(self, tmp_path):
        ft = np.array([[0.0, 40.0], [40.0, 80.0]])
        assert np.array_equal(read_frame_times(write_frame_times(tmp_path / "f.csv", ft)), ft)
