"""In-memory pipeline stages shared by the command line and the experiment scripts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .adm import StudyDataset
from .decouple import (ClipDecomposition, SalientInterval, decompose, frame_exposure,
                       frame_predictors, salient_frames, salient_mean)
from .errors import InvalidInput, MissingData
from .gbt import extract_features
from .luminance import LuminanceLUT, cached
from .plr import GROUP_MODEL, PlrModelSet, calibrate_participant, fit_combined
from .preprocess import align_to_frames, clean_trace
from .scaling import RatingTensor, dissimilarities, indscal_fit, labels


@dataclass(frozen=True)
class Options:
    pad_ms: float = 2.0
    gaze_radius: int = 300
    fit_scope: str = "clip"
    label_source: str = "indscal"
    label_scope: str = "shared"
    feature_set: str = "strict"
    seed: int = 0


def calibrate_all(calibration: dict, lut: LuminanceLUT, group: PlrModelSet = GROUP_MODEL) -> dict:
    return {pid: calibrate_participant(group, samples, lut, pid)
            for pid, samples in sorted(calibration.items())}


def _frame_inputs(frames):
    """Frame-mean records or pixel arrays, as accepted by :func:`frame_exposure`."""
    out = []
    for fr in frames:
        out.append(np.asarray(fr.mean_rgb if hasattr(fr, "mean_rgb") else fr, dtype=float))
    return out


def decouple_participant(model: PlrModelSet, lut: LuminanceLUT, traces: dict, frames: dict,
                         frame_times: dict, opts: Options = Options(), query=None) -> dict:
    """Decompose every clip of one participant; ``traces`` maps clip id to raw trace."""
    q = query or cached(lut)
    preds, measured = {}, {}
    for clip in sorted(traces):
        if clip not in frames or clip not in frame_times:
            raise MissingData(f"no frames or frame times for clip {clip}")
        series = align_to_frames(clean_trace(traces[clip], opts.pad_ms), frame_times[clip])
        rgbs, lux = frame_exposure(_frame_inputs(frames[clip]), series.gaze, lut,
                                   opts.gaze_radius, q)
        preds[clip] = frame_predictors(model, rgbs, lux, lut, q)
        measured[clip] = series.pupil
    if opts.fit_scope == "participant":
        w = fit_combined(np.vstack([preds[c] for c in preds]),
                         np.concatenate([measured[c] for c in preds]))
        return {c: decompose(preds[c], measured[c], w) for c in preds}
    if opts.fit_scope != "clip":
        raise InvalidInput(f"unknown fit scope {opts.fit_scope!r}")
    return {c: decompose(preds[c], measured[c]) for c in preds}


def decouple_all(models: dict, lut: LuminanceLUT, traces: dict, frames: dict, frame_times: dict,
                 opts: Options = Options(), n_jobs: int = 1) -> dict:
    """Decompositions keyed by ``(participant, clip)``; parallel over participants."""
    by_part: dict[str, dict] = {}
    for (pid, clip), tr in traces.items():
        by_part.setdefault(pid, {})[clip] = tr
    missing = sorted(set(by_part) - set(models))
    if missing:
        raise MissingData(f"no calibrated model for participants {missing}")
    parts = sorted(by_part)
    if n_jobs > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(
            delayed(decouple_participant)(models[p], lut, by_part[p], frames, frame_times, opts)
            for p in parts)
    else:
        q = cached(lut)
        results = [decouple_participant(models[p], lut, by_part[p], frames, frame_times, opts, q)
                   for p in parts]
    return {(p, c): dec for p, res in zip(parts, results) for c, dec in res.items()}


def ratings_labels(ratings: RatingTensor, seed: int = 0):
    """INDSCAL group space and rescaled ``(valence, arousal)`` per clip."""
    space = indscal_fit(dissimilarities(ratings), seed=seed, ratings=ratings)
    return space, labels(space)


def build_dataset(decomps: dict, salient: dict[str, SalientInterval], frame_times: dict,
                  clip_labels: dict, label_source: str = "indscal",
                  with_features: bool = True) -> StudyDataset:
    """Salient-interval summaries (and features) per (participant, clip)."""
    rows = []
    feats = []
    for (pid, clip) in sorted(decomps):
        dec: ClipDecomposition = decomps[(pid, clip)]
        if clip not in salient:
            raise MissingData(f"no salient interval for clip {clip}")
        if clip not in clip_labels:
            raise MissingData(f"no label for clip {clip}")
        ft = frame_times[clip]
        v, a = clip_labels[clip]
        rows.append((pid, clip, salient_mean(dec.ps_arousal, salient[clip], ft),
                     salient_mean(dec.ps_measured, salient[clip], ft), a, v))
        if with_features:
            mask = salient_frames(salient[clip], ft)
            feats.append(extract_features(dec.ps_measured, dec.ps_luminosity, dec.ps_arousal, mask))
    cols = list(zip(*rows))
    return StudyDataset(cols[0], cols[1], cols[2], cols[3], cols[4], cols[5], label_source,
                        np.array(feats) if with_features else None)


def run_study_in_memory(study, opts: Options = Options(), n_jobs: int = 1,
                        label_source: Optional[str] = None):
    """Full pipeline on a :class:`~pupilkit.synth.SynthStudy` without touching disk."""
    models = calibrate_all(study.calibration, study.lut)
    ft = {c: study.frame_times for c in study.clips}
    frames = {c: list(study.frames[c]) for c in study.clips}
    decomps = decouple_all(models, study.lut, study.traces, frames, ft, opts, n_jobs)
    source = label_source or opts.label_source
    if source == "indscal":
        space, lab = ratings_labels(study.ratings, opts.seed)
        clip_labels = {c: tuple(lab[j]) for j, c in enumerate(study.ratings.clips)}
    elif source == "truth":
        clip_labels = {c: (float(v), float(a)) for c, v, a in
                       zip(study.clips, study.valence, study.arousal)}
    else:
        raise InvalidInput(f"unknown label source {source!r}")
    return models, decomps, build_dataset(decomps, study.salient, ft, clip_labels, source)
