"""Evaluation statistics: Pearson r with two-sided p, R^2 and range-normalised RMSE."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betainc

from . import tableio
from .errors import UndefinedStatistic


@dataclass(frozen=True)
class EvalReport:
    r: float
    p: float
    r2: float
    nrmse: float
    n: int


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    return x, y


def t_two_sided_p(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t via the regularised incomplete beta."""
    if np.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def pearson(x, y) -> tuple[float, float]:
    x, y = _pair(x, y)
    n = len(x)
    if n < 3:
        raise UndefinedStatistic(f"pearson needs n >= 3, got {n}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = dx @ dx
    syy = dy @ dy
    if sxx <= 0 or syy <= 0:
        raise UndefinedStatistic("pearson undefined for a zero-variance series")
    r = float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) >= 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return r, t_two_sided_p(t, n - 2)


def r2_score(observed, predicted) -> float:
    obs, pred = _pair(observed, predicted)
    if len(obs) < 2:
        raise UndefinedStatistic("r2 needs n >= 2")
    ss_tot = ((obs - obs.mean()) ** 2).sum()
    if ss_tot <= 0:
        raise UndefinedStatistic("r2 undefined for constant observations")
    return float(1.0 - ((obs - pred) ** 2).sum() / ss_tot)


def nrmse(observed, predicted) -> float:
    obs, pred = _pair(observed, predicted)
    span = obs.max() - obs.min() if len(obs) else 0.0
    if span <= 0:
        raise UndefinedStatistic("nrmse undefined for constant observations")
    return float(np.sqrt(np.mean((obs - pred) ** 2)) / span)


def evaluate(observed, predicted) -> EvalReport:
    """All three statistics of predictions against observations."""
    obs, pred = _pair(observed, predicted)
    r, p = pearson(obs, pred)
    return EvalReport(r, p, r2_score(obs, pred), nrmse(obs, pred), len(obs))


@dataclass(frozen=True)
class Aggregate:
    """Mean, sample standard deviation and maximum of per-participant reports."""

    mean: EvalReport
    sd: EvalReport
    max: EvalReport
    n_folds: int

    @property
    def r(self) -> float:
        return self.mean.r

    @property
    def r2(self) -> float:
        return self.mean.r2


def aggregate(reports: Sequence[EvalReport]) -> Aggregate:
    if not reports:
        raise UndefinedStatistic("no reports to aggregate")
    arr = np.array([[r.r, r.p, r.r2, r.nrmse, r.n] for r in reports], dtype=float)
    ddof = 1 if len(reports) > 1 else 0

    def rep(v):
        return EvalReport(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(round(v[4])))

    return Aggregate(rep(arr.mean(axis=0)), rep(arr.std(axis=0, ddof=ddof)),
                     rep(arr.max(axis=0)), len(reports))


REPORT_COLUMNS = ["scope", "participant_id", "n", "r", "p", "r2", "nrmse"]


def report_rows(scope: str, per_participant: dict, agg: Aggregate | None = None) -> list[list]:
    rows = [[scope, pid, rep.n, rep.r, rep.p, rep.r2, rep.nrmse]
            for pid, rep in per_participant.items()]
    if agg is not None:
        for label in ("mean", "sd", "max"):
            rep = getattr(agg, label)
            rows.append([scope, label, rep.n, rep.r, rep.p, rep.r2, rep.nrmse])
    return rows


def write_report(path, rows: Iterable[Sequence], extra_columns: Sequence[str] = ()) -> Path:
    return tableio.write_csv(path, REPORT_COLUMNS + list(extra_columns), rows)


def as_dict(report) -> dict:
    return asdict(report)
