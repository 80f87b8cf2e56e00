"""Linear arousal detection model with leave-one-participant-out evaluation.

Pupil size is regressed on arousal (``pupil = a * arousal + b``) and the fit
is inverted to read arousal off a pupil value.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tableio
from .errors import InvalidInput, NonInvertibleModel, PupilkitError
from .metrics import Aggregate, EvalReport, aggregate, evaluate

EPSILON_A = 1e-6
SIGNALS = {"corrected": "ps_arousal", "uncorrected": "ps_measured"}


@dataclass(frozen=True)
class AdmCoefficients:
    a: float
    b: float
    fit_r2: float


@dataclass
class StudyDataset:
    """One row per (participant, clip) with salient-interval pupil summaries.

    ``features`` optionally holds the 36-column moment/derivative matrix used
    by the boosted-tree model, row-aligned with the other columns.
    """

    participant: np.ndarray
    clip: np.ndarray
    ps_arousal: np.ndarray
    ps_measured: np.ndarray
    arousal: np.ndarray
    valence: np.ndarray
    label_source: str = "indscal"
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.participant = np.asarray(self.participant, dtype=str)
        self.clip = np.asarray(self.clip, dtype=str)
        for name in ("ps_arousal", "ps_measured", "arousal", "valence"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.participant)
        if any(len(getattr(self, k)) != n for k in
               ("clip", "ps_arousal", "ps_measured", "arousal", "valence")):
            raise InvalidInput("dataset columns differ in length")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=float)
            if len(self.features) != n:
                raise InvalidInput("feature matrix is not row-aligned with the dataset")

    def __len__(self):
        return len(self.participant)

    @property
    def participants(self) -> list[str]:
        return sorted(set(self.participant.tolist()))

    def signal(self, which: str) -> np.ndarray:
        if which not in SIGNALS:
            raise InvalidInput(f"signal must be one of {sorted(SIGNALS)}, got {which!r}")
        return getattr(self, SIGNALS[which])

    def target(self, which: str) -> np.ndarray:
        if which not in ("arousal", "valence"):
            raise InvalidInput(f"target must be arousal or valence, got {which!r}")
        return getattr(self, which)

    def subset(self, rows: np.ndarray) -> "StudyDataset":
        return StudyDataset(self.participant[rows], self.clip[rows], self.ps_arousal[rows],
                            self.ps_measured[rows], self.arousal[rows], self.valence[rows],
                            self.label_source,
                            None if self.features is None else self.features[rows])


def fit_adm(pupil, arousal, epsilon_a: float = EPSILON_A) -> AdmCoefficients:
    """Ordinary least squares of pupil size on arousal."""
    x = np.asarray(arousal, dtype=float)
    y = np.asarray(pupil, dtype=float)
    if len(x) != len(y) or len(x) < 3:
        raise InvalidInput("need at least 3 aligned (pupil, arousal) pairs")
    dx = x - x.mean()
    sxx = dx @ dx
    if not sxx > 0:
        raise InvalidInput("arousal labels have zero variance")
    a = float(dx @ (y - y.mean()) / sxx)
    b = float(y.mean() - a * x.mean())
    if abs(a) <= epsilon_a:
        raise NonInvertibleModel(f"slope {a:.3g} is below the invertibility floor {epsilon_a}")
    resid = y - (a * x + b)
    ss_tot = ((y - y.mean()) ** 2).sum()
    fit_r2 = float(1.0 - (resid @ resid) / ss_tot) if ss_tot > 0 else 1.0
    return AdmCoefficients(a, b, fit_r2)


def predict_arousal(pupil, coeffs: AdmCoefficients, epsilon_a: float = EPSILON_A):
    if abs(coeffs.a) <= epsilon_a:
        raise NonInvertibleModel(f"slope {coeffs.a:.3g} is not invertible")
    out = (np.asarray(pupil, dtype=float) - coeffs.b) / coeffs.a
    return float(out) if out.ndim == 0 else out


@dataclass
class LopoResult:
    per_participant: dict[str, EvalReport]
    aggregate: Optional[Aggregate]
    coefficients: dict[str, AdmCoefficients]
    predictions: list = field(default_factory=list)
    folds: list = field(default_factory=list)
    flagged: dict[str, str] = field(default_factory=dict)


def lopo_evaluate(dataset: StudyDataset, signal: str = "corrected",
                  epsilon_a: float = EPSILON_A) -> LopoResult:
    """Leave-one-participant-out evaluation of the linear model.

    Each fold fits on the pooled rows of every other participant and predicts
    the held-out participant's clips. Folds that cannot be scored (slope below
    ``epsilon_a``, constant predictions) are flagged and left out of the
    aggregate.
    """
    parts = dataset.participants
    if len(parts) < 3:
        raise InvalidInput("LOPO needs at least 3 participants")
    x = dataset.signal(signal)
    y = dataset.arousal
    per, coeffs, preds, folds, flagged = {}, {}, [], [], {}
    for pid in parts:
        test = dataset.participant == pid
        train = ~test
        if test.sum() < 3:
            raise InvalidInput(f"participant {pid} has fewer than 3 clips")
        folds.append({"held_out": pid, "train": sorted(set(dataset.participant[train].tolist())),
                      "train_rows": np.flatnonzero(train).tolist(),
                      "test_rows": np.flatnonzero(test).tolist()})
        try:
            c = fit_adm(x[train], y[train], epsilon_a)
            est = predict_arousal(x[test], c, epsilon_a)
            per[pid] = evaluate(y[test], est)
        except PupilkitError as exc:
            flagged[pid] = f"{exc.kind}: {exc}"
            warnings.warn(f"fold {pid} excluded: {exc}", RuntimeWarning, stacklevel=2)
            continue
        coeffs[pid] = c
        for clip, p_hat, actual in zip(dataset.clip[test], est, y[test]):
            preds.append((pid, str(clip), float(p_hat), float(actual)))
    agg = aggregate(list(per.values())) if per else None
    return LopoResult(per, agg, coeffs, preds, folds, flagged)


# --- file formats -------------------------------------------------------------

DATASET_COLUMNS = ["participant_id", "clip_id", "ps_arousal_mm", "ps_measured_mm",
                   "arousal", "valence", "label_source"]


def write_dataset(path, ds: StudyDataset) -> Path:
    rows = ([p, c, a, m, ar, v, ds.label_source] for p, c, a, m, ar, v in
            zip(ds.participant, ds.clip, ds.ps_arousal, ds.ps_measured, ds.arousal, ds.valence))
    return tableio.write_csv(path, DATASET_COLUMNS, rows)


def read_dataset(path) -> StudyDataset:
    rows = tableio.read_csv(path, DATASET_COLUMNS)
    sources = {r["label_source"] for r in rows}
    if len(sources) != 1:
        raise InvalidInput(f"{path}: mixed label sources {sorted(sources)}")
    col = lambda k: [r[k] for r in rows]  # noqa: E731
    return StudyDataset(col("participant_id"), col("clip_id"),
                        np.array(col("ps_arousal_mm"), dtype=float),
                        np.array(col("ps_measured_mm"), dtype=float),
                        np.array(col("arousal"), dtype=float),
                        np.array(col("valence"), dtype=float), sources.pop())


def write_predictions(path, predictions) -> Path:
    return tableio.write_csv(path, ["participant_id", "clip_id", "predicted", "actual"], predictions)
