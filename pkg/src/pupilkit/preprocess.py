"""Eye-tracker export cleaning: blink masking, imputation and frame alignment."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tableio
from .errors import AlignmentError, InvalidInput, UnrecoverableTrace

SENTINEL = -1.0


@dataclass(frozen=True)
class RawPupilTrace:
    """Samples as exported by the tracker. Missing pupil samples are ``-1``;
    invalid gaze is NaN."""

    timestamps: np.ndarray
    left: np.ndarray
    right: np.ndarray
    gaze_x: np.ndarray
    gaze_y: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, f), dtype=float)
                  for f in ("timestamps", "left", "right", "gaze_x", "gaze_y")]
        n = len(arrays[0])
        if any(len(a) != n for a in arrays):
            raise InvalidInput("trace columns differ in length")
        if n and (not np.all(np.isfinite(arrays[0])) or np.any(np.diff(arrays[0]) <= 0)):
            raise InvalidInput("timestamps must be finite and strictly increasing")
        for name, arr in zip(("timestamps", "left", "right", "gaze_x", "gaze_y"), arrays):
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.timestamps)


@dataclass(frozen=True)
class CleanTrace:
    timestamps: np.ndarray
    pupil: np.ndarray
    gaze_x: np.ndarray
    gaze_y: np.ndarray


@dataclass(frozen=True)
class FrameSeries:
    """Per-frame mean pupil and gaze point (NaN where no valid gaze)."""

    pupil: np.ndarray
    gaze: np.ndarray


def missing_samples(trace: RawPupilTrace) -> np.ndarray:
    bad = np.zeros(len(trace), dtype=bool)
    for eye in (trace.left, trace.right):
        bad |= (eye == SENTINEL) | ~np.isfinite(eye)
    return bad


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (start, end) index pairs of consecutive True runs."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def mark_blinks(trace: RawPupilTrace, pad_ms: float = 2.0) -> np.ndarray:
    """Mask sentinel samples plus ``pad_ms`` on both sides of every blink run.

    At least one neighbouring sample is masked on each side of a run even when
    ``pad_ms`` is shorter than the sampling period.
    """
    if pad_ms < 0:
        raise InvalidInput("pad_ms must be >= 0")
    raw = missing_samples(trace)
    mask = raw.copy()
    t = trace.timestamps
    n = len(t)
    for i0, i1 in _runs(raw):
        lo = int(np.searchsorted(t, t[i0] - pad_ms, side="left"))
        hi = int(np.searchsorted(t, t[i1] + pad_ms, side="right")) - 1
        lo = min(lo, max(i0 - 1, 0))
        hi = max(hi, min(i1 + 1, n - 1))
        mask[lo:hi + 1] = True
    return mask


def _interp_eye(t: np.ndarray, x: np.ndarray, valid: np.ndarray) -> np.ndarray:
    # np.interp holds the end values constant outside the valid range
    out = x.copy()
    out[~valid] = np.interp(t[~valid], t[valid], x[valid])
    return out


def impute_linear(trace: RawPupilTrace, mask: np.ndarray) -> CleanTrace:
    """Fill masked samples by linear interpolation in time, then average eyes."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != trace.timestamps.shape:
        raise InvalidInput("mask length differs from trace")
    valid = ~mask & ~missing_samples(trace)
    if valid.sum() < 2:
        raise UnrecoverableTrace(f"only {int(valid.sum())} valid samples")
    left = _interp_eye(trace.timestamps, trace.left, valid)
    right = _interp_eye(trace.timestamps, trace.right, valid)
    pupil = 0.5 * (left + right)
    if not np.all(np.isfinite(pupil)) or np.any(pupil <= 0):
        raise UnrecoverableTrace("imputed pupil has nonpositive or non-finite values")
    return CleanTrace(trace.timestamps.copy(), pupil, trace.gaze_x.copy(), trace.gaze_y.copy())


def clean_trace(trace: RawPupilTrace, pad_ms: float = 2.0) -> CleanTrace:
    return impute_linear(trace, mark_blinks(trace, pad_ms))


def _check_frames(frame_times) -> np.ndarray:
    ft = np.asarray(frame_times, dtype=float).reshape(-1, 2)
    if np.any(ft[:, 1] <= ft[:, 0]) or np.any(ft[1:, 0] < ft[:-1, 1]):
        raise InvalidInput("frames must be ordered, non-empty and non-overlapping")
    return ft


def replace_blinks_frame_median(trace: RawPupilTrace, frame_times) -> CleanTrace:
    """Calibration-path cleaning: each missing sample takes the median of the
    valid samples of the same eye within its frame. Frames without any valid
    sample fall back to linear imputation."""
    ft = _check_frames(frame_times)
    t = trace.timestamps
    eyes = [trace.left.copy(), trace.right.copy()]
    still_missing = np.zeros(len(t), dtype=bool)
    for start, end in ft:
        lo, hi = np.searchsorted(t, [start, end], side="left")
        for eye in eyes:
            seg = eye[lo:hi]
            bad = (seg == SENTINEL) | ~np.isfinite(seg)
            if bad.any():
                if (~bad).any():
                    seg[bad] = np.median(seg[~bad])
                else:
                    still_missing[lo:hi] = True
    patched = RawPupilTrace(t, eyes[0], eyes[1], trace.gaze_x, trace.gaze_y)
    return impute_linear(patched, still_missing | missing_samples(patched))


def align_to_frames(trace: CleanTrace, frame_times) -> FrameSeries:
    """Mean pupil over samples with ``start <= t < end`` for each frame.

    Frames without samples repeat the previous frame's pupil value; the gaze
    point is the mean of the valid gaze samples in the window (NaN if none).
    """
    ft = _check_frames(frame_times)
    t = trace.timestamps
    lo = np.searchsorted(t, ft[:, 0], side="left")
    hi = np.searchsorted(t, ft[:, 1], side="left")
    pupil = np.empty(len(ft))
    gaze = np.full((len(ft), 2), np.nan)
    gxy = np.column_stack([trace.gaze_x, trace.gaze_y])
    for k, (i0, i1) in enumerate(zip(lo, hi)):
        if i1 > i0:
            pupil[k] = trace.pupil[i0:i1].mean()
            g = gxy[i0:i1]
            g = g[np.all(np.isfinite(g), axis=1)]
            if len(g):
                gaze[k] = g.mean(axis=0)
        elif k == 0:
            raise AlignmentError(f"first frame [{ft[0, 0]}, {ft[0, 1]}) has no samples")
        else:
            pupil[k] = pupil[k - 1]
    return FrameSeries(pupil, gaze)


# --- file formats -------------------------------------------------------------

def _gaze_value(text: str) -> float:
    if text is None or text.strip() == "":
        return float("nan")
    v = float(text)
    return v if v >= 0 else float("nan")


def read_raw_trace(path) -> RawPupilTrace:
    rows = tableio.read_csv(path, ["timestamp_ms", "left_mm", "right_mm", "gaze_x", "gaze_y"])
    return RawPupilTrace(
        np.array([float(r["timestamp_ms"]) for r in rows]),
        np.array([float(r["left_mm"]) for r in rows]),
        np.array([float(r["right_mm"]) for r in rows]),
        np.array([_gaze_value(r["gaze_x"]) for r in rows]),
        np.array([_gaze_value(r["gaze_y"]) for r in rows]),
    )


def write_raw_trace(path, trace: RawPupilTrace) -> Path:
    def g(v):
        return -1.0 if not np.isfinite(v) else float(v)
    rows = ([float(t), float(l), float(r), g(x), g(y)] for t, l, r, x, y in
            zip(trace.timestamps, trace.left, trace.right, trace.gaze_x, trace.gaze_y))
    return tableio.write_csv(path, ["timestamp_ms", "left_mm", "right_mm", "gaze_x", "gaze_y"], rows)


def read_frame_times(path) -> np.ndarray:
    rows = tableio.read_csv(path, ["frame_index", "start_ms", "end_ms"])
    rows.sort(key=lambda r: int(r["frame_index"]))
    return _check_frames([[float(r["start_ms"]), float(r["end_ms"])] for r in rows])


def write_frame_times(path, frame_times) -> Path:
    ft = np.asarray(frame_times, dtype=float)
    return tableio.write_csv(path, ["frame_index", "start_ms", "end_ms"],
                             ([i, float(s), float(e)] for i, (s, e) in enumerate(ft)))
