"""Split measured pupil size into a luminosity-driven part and an arousal residual."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tableio
from .errors import InsufficientData, InvalidInput, InvalidInterval
from .luminance import LuminanceLUT, cached, check_rgb, effective_rgb
from .plr import (CombinedWeights, PlrModelSet, channel_predictors, fit_combined,
                  predict_combined)

MIN_FRAMES = 6


@dataclass(frozen=True)
class ClipDecomposition:
    ps_measured: np.ndarray
    ps_luminosity: np.ndarray
    ps_arousal: np.ndarray
    weights: CombinedWeights
    predictors: np.ndarray

    @property
    def residual_mean(self) -> float:
        return float(self.ps_arousal.mean())


@dataclass(frozen=True)
class SalientInterval:
    clip_id: str
    intervals: tuple

    def __post_init__(self):
        iv = sorted((float(s), float(e)) for s, e in self.intervals)
        for s, e in iv:
            if not e > s or s < 0:
                raise InvalidInterval(f"{self.clip_id}: bad interval [{s}, {e}]")
        for (s0, e0), (s1, e1) in zip(iv, iv[1:]):
            if s1 < e0:
                raise InvalidInterval(f"{self.clip_id}: overlapping intervals")
        object.__setattr__(self, "intervals", tuple(iv))


def frame_exposure(frames, gaze, lut: LuminanceLUT, radius_px: int = 300,
                   query=None) -> tuple[np.ndarray, np.ndarray]:
    """Effective RGB and luminosity of every frame.

    ``frames`` items are either (H, W, 3) pixel arrays or precomputed mean RGB
    triples; gaze-region luminance only applies to pixel frames.
    """
    q = query or cached(lut)
    n = len(frames)
    gaze = np.full((n, 2), np.nan) if gaze is None else np.asarray(gaze, dtype=float)
    rgbs = np.empty((n, 3))
    lux = np.empty(n)
    for i, fr in enumerate(frames):
        arr = np.asarray(fr, dtype=float)
        if arr.ndim == 3:
            rgb, lx = effective_rgb(arr, gaze[i], lut, radius_px)
            rgbs[i], lux[i] = rgb, lx
        else:
            rgbs[i] = check_rgb(arr)
            lux[i] = q(tuple(rgbs[i]))
    return rgbs, lux


def frame_predictors(model: PlrModelSet, rgbs: np.ndarray, lux: np.ndarray,
                     lut: LuminanceLUT, query=None) -> np.ndarray:
    """``(n, 4)`` matrix of gray/red/green/blue curve predictions per frame."""
    q = query or cached(lut)
    return np.array([channel_predictors(model, rgb, lut, lux=lx, query=q)
                     for rgb, lx in zip(rgbs, lux)])


def decompose(predictors: np.ndarray, measured, weights: Optional[CombinedWeights] = None
              ) -> ClipDecomposition:
    """Residual decomposition given per-frame predictors.

    Without ``weights`` the combined model is fitted to this clip.
    """
    y = np.asarray(measured, dtype=float)
    P = np.asarray(predictors, dtype=float)
    if len(y) != len(P):
        raise InvalidInput("measured series is not aligned with frames")
    if weights is None:
        if len(y) < MIN_FRAMES:
            raise InsufficientData(f"clip has {len(y)} frames, need >= {MIN_FRAMES}")
        weights = fit_combined(P, y)
    lum = np.asarray(predict_combined(weights, P), dtype=float)
    return ClipDecomposition(y.copy(), lum, y - lum, weights, P)


def decompose_clip(frames, gaze, model: PlrModelSet, lut: LuminanceLUT, measured,
                   radius_px: int = 300, weights: Optional[CombinedWeights] = None,
                   query=None) -> ClipDecomposition:
    rgbs, lux = frame_exposure(frames, gaze, lut, radius_px, query)
    return decompose(frame_predictors(model, rgbs, lux, lut, query), measured, weights)


def decompose_participant(predictor_list: Sequence[np.ndarray], measured_list: Sequence,
                          scope: str = "clip") -> list[ClipDecomposition]:
    """Decompose all clips of one participant.

    ``scope="clip"`` refits the combined weights per clip; ``"participant"``
    fits one set of weights over every frame of the participant.
    """
    if scope == "clip":
        return [decompose(P, y) for P, y in zip(predictor_list, measured_list)]
    if scope == "participant":
        w = fit_combined(np.vstack(predictor_list), np.concatenate(measured_list))
        return [decompose(P, y, w) for P, y in zip(predictor_list, measured_list)]
    raise InvalidInput(f"unknown fit scope {scope!r}")


def salient_frames(salient: SalientInterval, frame_times) -> np.ndarray:
    """Boolean mask of frames whose midpoint lies in an interval.

    Interval bounds are seconds from the onset of the first frame.
    """
    ft = np.asarray(frame_times, dtype=float).reshape(-1, 2)
    mid = (0.5 * (ft[:, 0] + ft[:, 1]) - ft[0, 0]) / 1000.0
    mask = np.zeros(len(ft), dtype=bool)
    for s, e in salient.intervals:
        mask |= (mid >= s) & (mid <= e)
    return mask


def salient_mean(series, salient: SalientInterval, frame_times) -> float:
    x = np.asarray(series, dtype=float)
    mask = salient_frames(salient, frame_times)
    if len(mask) != len(x):
        raise InvalidInput("series and frame times differ in length")
    if not mask.any():
        raise InvalidInterval(f"salient intervals of {salient.clip_id} cover no frames")
    return float(x[mask].mean())


# --- file formats -------------------------------------------------------------

def read_salient(path) -> dict[str, SalientInterval]:
    rows = tableio.read_csv(path, ["clip_id", "start_s", "end_s"])
    by_clip: dict[str, list] = {}
    for r in rows:
        by_clip.setdefault(r["clip_id"], []).append((float(r["start_s"]), float(r["end_s"])))
    return {c: SalientInterval(c, tuple(iv)) for c, iv in sorted(by_clip.items())}


def write_salient(path, salient: dict[str, SalientInterval]) -> Path:
    rows = [[c, s, e] for c, si in sorted(salient.items()) for s, e in si.intervals]
    return tableio.write_csv(path, ["clip_id", "start_s", "end_s"], rows)


def write_decomposition(path, dec: ClipDecomposition) -> Path:
    rows = ([i, float(m), float(l), float(a)] for i, (m, l, a) in
            enumerate(zip(dec.ps_measured, dec.ps_luminosity, dec.ps_arousal)))
    return tableio.write_csv(path, ["frame_index", "ps_measured", "ps_luminosity", "ps_arousal"], rows)


def read_decomposition(path) -> dict[str, np.ndarray]:
    rows = tableio.read_csv(path, ["frame_index", "ps_measured", "ps_luminosity", "ps_arousal"])
    return {k: np.array([float(r[k]) for r in rows])
            for k in ("ps_measured", "ps_luminosity", "ps_arousal")}
