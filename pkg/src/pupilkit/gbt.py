"""Gradient-boosted regression trees on pupil-signal features.

Squared-error boosting with depth-limited trees grown level by level. Split
search is exhaustive over features and midpoints between consecutive distinct
values; a split's gain is ``S_L^2/(n_L+lam) + S_R^2/(n_R+lam) - S^2/(n+lam)``
(plain variance reduction at ``lam = 0``) and leaves predict
``sum(residual) / (count + lam)``. Near-ties keep the first candidate seen,
i.e. the lowest feature index and then the lowest threshold.

The tree kernels are compiled with numba; nested leave-one-participant-out
search over the default grid trains a few thousand models.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numba import njit

from . import tableio
from .adm import StudyDataset
from .errors import ConfigError, InsufficientData, InvalidInput, PupilkitError, TrainingError
from .metrics import Aggregate, EvalReport, aggregate, evaluate, r2_score

SIGNAL_NAMES = ("measured", "luminosity", "arousal")
MOMENTS = ("mean", "var", "skew", "kurt")
FEATURE_NAMES = tuple(f"{s}_d{o}_{m}" for s in SIGNAL_NAMES for o in range(3) for m in MOMENTS)
FEATURE_SETS = {
    "corrected": tuple(range(36)),
    "strict": tuple(range(12)),
    "lenient": tuple(range(24)),
}
VAR_EPS = 1e-12
MIN_WINDOW = 5


# --- features -----------------------------------------------------------------

def moments(x) -> np.ndarray:
    """Mean, population variance, Fisher skewness and excess kurtosis.

    Skewness and kurtosis are 0 when the variance is below 1e-12.
    """
    x = np.asarray(x, dtype=float)
    if np.ptp(x) == 0:
        return np.array([x[0], 0.0, 0.0, 0.0])
    mu = x.mean()
    d = x - mu
    m2 = (d * d).mean()
    if m2 < VAR_EPS:
        return np.array([mu, m2, 0.0, 0.0])
    m3 = (d ** 3).mean()
    m4 = (d ** 4).mean()
    return np.array([mu, m2, m3 / m2 ** 1.5, m4 / (m2 * m2) - 3.0])


def extract_features(ps_measured, ps_luminosity, ps_arousal, salient_mask=None) -> np.ndarray:
    """36 features: moments of each signal and of its first two derivatives.

    Each series is restricted to the salient frames first; derivatives are
    central differences on the frame grid (one-sided at the ends).
    """
    series = [np.asarray(s, dtype=float) for s in (ps_measured, ps_luminosity, ps_arousal)]
    if salient_mask is not None:
        mask = np.asarray(salient_mask, dtype=bool)
        series = [s[mask] for s in series]
    if len(series[0]) < MIN_WINDOW:
        raise InsufficientData(f"salient window has {len(series[0])} frames, need >= {MIN_WINDOW}")
    out = []
    for s in series:
        d1 = np.gradient(s)
        d2 = np.gradient(d1)
        for v in (s, d1, d2):
            out.append(moments(v))
    feats = np.concatenate(out)
    if not np.all(np.isfinite(feats)):
        raise InvalidInput("non-finite feature values")
    return feats


# --- tree kernels -------------------------------------------------------------

@njit(cache=True)
def _grow_tree(X, order, r, max_depth, min_leaf, lam, feat, thr, left, right, value):
    n = r.shape[0]
    n_feat = X.shape[1]
    max_nodes = feat.shape[0]
    node_of = np.zeros(n, np.int64)
    cnt = np.zeros(max_nodes)
    tot = np.zeros(max_nodes)
    ssq = np.zeros(max_nodes)
    for k in range(max_nodes):
        feat[k] = -1
        left[k] = -1
        right[k] = -1
        thr[k] = 0.0
        value[k] = 0.0
    for i in range(n):
        cnt[0] += 1.0
        tot[0] += r[i]
        ssq[0] += r[i] * r[i]
    n_nodes = 1
    level_start = 0
    level_end = 1
    for _depth in range(max_depth):
        m = level_end - level_start
        best = np.empty(m)
        best_f = np.full(m, -1, np.int64)
        best_t = np.zeros(m)
        for k in range(m):
            node = level_start + k
            best[k] = 1e-12 * ssq[node]
        cl = np.zeros(m)
        sl = np.zeros(m)
        last = np.zeros(m)
        seen = np.zeros(m, np.bool_)
        for f in range(n_feat):
            for k in range(m):
                cl[k] = 0.0
                sl[k] = 0.0
                seen[k] = False
            for p in range(n):
                i = order[f, p]
                k = node_of[i] - level_start
                if k < 0 or k >= m:
                    continue
                x = X[i, f]
                if seen[k] and x > last[k]:
                    node = level_start + k
                    nl = cl[k]
                    nr = cnt[node] - nl
                    if nl >= min_leaf and nr >= min_leaf:
                        sr = tot[node] - sl[k]
                        gain = (sl[k] * sl[k] / (nl + lam) + sr * sr / (nr + lam)
                                - tot[node] * tot[node] / (cnt[node] + lam))
                        if gain > best[k] + 1e-12 * abs(best[k]):
                            best[k] = gain
                            best_f[k] = f
                            t = last[k] + 0.5 * (x - last[k])
                            if t >= x:
                                t = last[k]
                            best_t[k] = t
                cl[k] += 1.0
                sl[k] += r[i]
                last[k] = x
                seen[k] = True
        for k in range(m):
            if best_f[k] >= 0:
                node = level_start + k
                feat[node] = best_f[k]
                thr[node] = best_t[k]
                left[node] = n_nodes
                right[node] = n_nodes + 1
                n_nodes += 2
        if n_nodes == level_end:
            break
        for i in range(n):
            node = node_of[i]
            if node >= level_start and feat[node] >= 0:
                if X[i, feat[node]] <= thr[node]:
                    child = left[node]
                else:
                    child = right[node]
                node_of[i] = child
                cnt[child] += 1.0
                tot[child] += r[i]
                ssq[child] += r[i] * r[i]
        level_start = level_end
        level_end = n_nodes
    for k in range(n_nodes):
        if cnt[k] + lam > 0:
            value[k] = tot[k] / (cnt[k] + lam)
    return node_of


@njit(cache=True)
def _boost(X, order, y, n_trees, lr, max_depth, min_leaf, lam, feat, thr, left, right, value,
           losses):
    n = y.shape[0]
    base = 0.0
    for i in range(n):
        base += y[i]
    base /= n
    pred = np.full(n, base)
    r = y - pred
    loss = 0.0
    for i in range(n):
        loss += r[i] * r[i]
    losses[0] = loss
    for t in range(n_trees):
        node_of = _grow_tree(X, order, r, max_depth, min_leaf, lam, feat[t], thr[t], left[t],
                             right[t], value[t])
        loss = 0.0
        for i in range(n):
            pred[i] += lr * value[t, node_of[i]]
            r[i] = y[i] - pred[i]
            loss += r[i] * r[i]
        losses[t + 1] = loss
    return base


@njit(cache=True)
def _tree_outputs(X, feat, thr, left, right, value):
    n_trees = feat.shape[0]
    n = X.shape[0]
    out = np.zeros((n_trees, n))
    for t in range(n_trees):
        for i in range(n):
            node = 0
            while feat[t, node] >= 0:
                if X[i, feat[t, node]] <= thr[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            out[t, i] = value[t, node]
    return out


# --- model --------------------------------------------------------------------

@dataclass(frozen=True)
class GbtParams:
    learning_rate: float = 0.1
    max_depth: int = 3
    n_trees: int = 100
    lambda_l2: float = 1.0
    min_samples_leaf: int = 2


@dataclass(frozen=True)
class HyperGrid:
    learning_rate: tuple = (0.05, 0.1, 0.3)
    max_depth: tuple = (2, 3, 4)
    n_trees: tuple = (50, 100, 200)
    lambda_l2: tuple = (0.0, 1.0)
    min_samples_leaf: tuple = (2, 5)

    def points(self) -> list[GbtParams]:
        """Grid points in enumeration order (field order, first field slowest)."""
        sets = [self.learning_rate, self.max_depth, self.n_trees, self.lambda_l2,
                self.min_samples_leaf]
        if any(len(s) == 0 for s in sets):
            raise ConfigError("hyperparameter grid has an empty candidate set")
        return [GbtParams(float(lr), int(d), int(nt), float(lam), int(msl))
                for lr, d, nt, lam, msl in itertools.product(*sets)]


@dataclass
class GbtModel:
    """Trees stored as padded arrays: ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    base_prediction: float
    learning_rate: float
    lambda_l2: float
    max_depth: int
    n_features: int
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_trees(self) -> int:
        return self.feature.shape[0]

    def depth(self, t: int) -> int:
        def walk(node):
            if self.feature[t, node] < 0:
                return 0
            return 1 + max(walk(self.left[t, node]), walk(self.right[t, node]))
        return walk(0)

    def tree_outputs(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        if self.n_trees == 0:
            return np.zeros((0, len(X)))
        return _tree_outputs(X, self.feature, self.threshold, self.left, self.right, self.value)

    def staged_predict(self, X, stages: Sequence[int]) -> dict[int, np.ndarray]:
        cum = np.cumsum(self.tree_outputs(X), axis=0)
        out = {}
        for s in stages:
            if s > self.n_trees:
                raise InvalidInput(f"model has only {self.n_trees} trees")
            out[s] = self.base_prediction + (self.learning_rate * cum[s - 1] if s else 0.0)
        return out

    def predict(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        if self.n_trees == 0:
            return np.full(len(X), self.base_prediction)
        return self.base_prediction + self.learning_rate * self.tree_outputs(X).sum(axis=0)


def _check_X(X, n_features: Optional[int] = None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2:
        raise InvalidInput("feature matrix must be 2-D")
    if n_features is not None and X.shape[1] != n_features:
        raise InvalidInput(f"feature dimension {X.shape[1]} differs from training ({n_features})")
    if not np.all(np.isfinite(X)):
        raise InvalidInput("feature matrix has non-finite entries")
    return X


def train_gbt(X, y, params: GbtParams = GbtParams()) -> GbtModel:
    """Fit ``params.n_trees`` boosting rounds to squared loss."""
    X = _check_X(X)
    y = np.ascontiguousarray(y, dtype=float)
    if len(y) != len(X):
        raise InvalidInput("X and y differ in length")
    if not np.all(np.isfinite(y)):
        raise InvalidInput("labels must be finite")
    if len(y) < 10:
        raise InsufficientData(f"boosting needs >= 10 rows, got {len(y)}")
    if len(y) < 2 * params.min_samples_leaf:
        raise TrainingError(f"{len(y)} rows cannot fill two leaves of {params.min_samples_leaf}")
    if params.max_depth < 0 or params.n_trees < 0 or params.lambda_l2 < 0:
        raise ConfigError(f"invalid boosting parameters {params}")
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    max_nodes = 2 ** (params.max_depth + 1) - 1
    shape = (params.n_trees, max_nodes)
    feat = np.full(shape, -1, np.int64)
    thr = np.zeros(shape)
    left = np.full(shape, -1, np.int64)
    right = np.full(shape, -1, np.int64)
    value = np.zeros(shape)
    losses = np.zeros(params.n_trees + 1)
    base = _boost(X, order, y, params.n_trees, float(params.learning_rate), params.max_depth,
                  float(params.min_samples_leaf), float(params.lambda_l2), feat, thr, left, right,
                  value, losses)
    scale = max(losses[0], 1e-300)
    assert np.all(np.diff(losses) <= 1e-10 * scale), "training loss increased"
    return GbtModel(feat, thr, left, right, value, float(base), float(params.learning_rate),
                    float(params.lambda_l2), params.max_depth, X.shape[1], losses)


def predict_gbt(model: GbtModel, X) -> np.ndarray:
    return model.predict(X)


# --- nested leave-one-participant-out ----------------------------------------

@dataclass
class NestedResult:
    per_participant: dict[str, EvalReport]
    aggregate: Optional[Aggregate]
    chosen: dict[str, GbtParams]
    predictions: list = field(default_factory=list)
    folds: list = field(default_factory=list)
    flagged: dict[str, str] = field(default_factory=dict)


def feature_columns(signal: str, variant: str = "strict") -> tuple:
    if signal == "corrected":
        return FEATURE_SETS["corrected"]
    if signal == "uncorrected":
        if variant not in ("strict", "lenient"):
            raise ConfigError(f"unknown uncorrected feature set {variant!r}")
        return FEATURE_SETS[variant]
    raise ConfigError(f"signal must be corrected or uncorrected, got {signal!r}")


def inner_folds(participants: Sequence[str], n_folds: int, seed: int) -> list[list[str]]:
    """Participant-grouped folds: a seeded permutation split into ``n_folds`` groups."""
    parts = sorted(participants)
    if len(parts) < n_folds:
        raise InsufficientData(f"{len(parts)} participants cannot form {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(len(parts))
    return [[parts[i] for i in sorted(chunk)] for chunk in np.array_split(perm, n_folds)]


def select_params(X, y, groups, grid: HyperGrid, n_folds: int = 5, seed: int = 0):
    """Grid search by participant-grouped CV; returns (best params, scores, folds)."""
    points = grid.points()
    folds = inner_folds(sorted(set(groups.tolist())), n_folds, seed)
    stages = sorted(set(grid.n_trees))
    scores: dict[GbtParams, list] = {p: [] for p in points}
    for val_parts in folds:
        val = np.isin(groups, val_parts)
        tr = ~val
        if np.ptp(y[val]) == 0:
            continue
        for lr, d, lam, msl in itertools.product(grid.learning_rate, grid.max_depth,
                                                 grid.lambda_l2, grid.min_samples_leaf):
            base = GbtParams(float(lr), int(d), max(stages), float(lam), int(msl))
            try:
                model = train_gbt(X[tr], y[tr], base)
            except (TrainingError, InsufficientData):
                continue
            staged = model.staged_predict(X[val], stages)
            for nt in stages:
                key = GbtParams(float(lr), int(d), int(nt), float(lam), int(msl))
                scores[key].append(r2_score(y[val], staged[nt]))
    mean_scores = {p: (float(np.mean(s)) if s else -np.inf) for p, s in scores.items()}
    best = points[0]
    for p in points:
        if mean_scores[p] > mean_scores[best]:
            best = p
    if not np.isfinite(mean_scores[best]):
        raise TrainingError("no grid point could be scored")
    return best, mean_scores, folds


def _outer_fold(X, y, groups, clips, pid, grid, n_folds, seed):
    test = groups == pid
    train = ~test
    best, _, folds = select_params(X[train], y[train], groups[train], grid, n_folds, seed)
    model = train_gbt(X[train], y[train], best)
    pred = model.predict(X[test])
    manifest = {"held_out": pid, "train": sorted(set(groups[train].tolist())),
                "inner": [{"validation": f, "train": sorted(set(groups[train].tolist()) - set(f))}
                          for f in folds]}
    rows = [(pid, str(c), float(p), float(a)) for c, p, a in zip(clips[test], pred, y[test])]
    return best, pred, manifest, rows


def nested_lopo(dataset: StudyDataset, target: str = "arousal", signal: str = "corrected",
                grid: HyperGrid = HyperGrid(), seed: int = 0, n_folds: int = 5,
                feature_set: str = "strict", n_jobs: int = 1) -> NestedResult:
    """Outer leave-one-participant-out with inner grouped CV model selection."""
    if dataset.features is None:
        raise InvalidInput("dataset has no feature matrix")
    grid.points()
    cols = list(feature_columns(signal, feature_set))
    X = np.ascontiguousarray(dataset.features[:, cols])
    y = dataset.target(target)
    groups = dataset.participant
    parts = dataset.participants
    if len(parts) < n_folds + 1:
        raise InsufficientData(f"nested LOPO needs >= {n_folds + 1} participants")
    jobs = [(pid, seed + k) for k, pid in enumerate(parts)]
    if n_jobs == 1:
        outs = [_safe_fold(X, y, groups, dataset.clip, pid, grid, n_folds, s) for pid, s in jobs]
    else:
        from joblib import Parallel, delayed
        outs = Parallel(n_jobs=n_jobs)(delayed(_safe_fold)(X, y, groups, dataset.clip, pid, grid,
                                                           n_folds, s) for pid, s in jobs)
    per, chosen, preds, manifests, flagged = {}, {}, [], [], {}
    for (pid, _), out in zip(jobs, outs):
        if isinstance(out, str):
            flagged[pid] = out
            warnings.warn(f"fold {pid} excluded: {out}", RuntimeWarning, stacklevel=2)
            continue
        best, pred, manifest, rows = out
        manifests.append(manifest)
        try:
            per[pid] = evaluate(y[groups == pid], pred)
        except PupilkitError as exc:
            flagged[pid] = f"{exc.kind}: {exc}"
            continue
        chosen[pid] = best
        preds.extend(rows)
    agg = aggregate(list(per.values())) if per else None
    return NestedResult(per, agg, chosen, preds, manifests, flagged)


def _safe_fold(*args):
    try:
        return _outer_fold(*args)
    except PupilkitError as exc:
        return f"{exc.kind}: {exc}"


def params_string(p: GbtParams) -> str:
    return ";".join(f"{k}={v}" for k, v in asdict(p).items())


# --- file formats -------------------------------------------------------------

GBT_MAGIC = "pupilkit-gbt"


def write_model(path, model: GbtModel) -> Path:
    lines = [f"{GBT_MAGIC} v1 {model.n_features} {float(model.base_prediction)!r} "
             f"{float(model.learning_rate)!r} {float(model.lambda_l2)!r} {model.max_depth}"]
    for t in range(model.n_trees):
        lines.append(f"tree {t}")
        stack = [0]
        while stack:
            node = stack.pop()
            f = model.feature[t, node]
            if f < 0:
                lines.append(f"leaf {float(model.value[t, node])!r}")
            else:
                lines.append(f"split {int(f)} {float(model.threshold[t, node])!r}")
                stack.extend([model.right[t, node], model.left[t, node]])
    return tableio.write_text(path, "\n".join(lines) + "\n")


def read_model(path) -> GbtModel:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.split() for ln in tableio.strip_comments(fh)]
    head = lines[0]
    if head[:2] != [GBT_MAGIC, "v1"]:
        raise InvalidInput(f"{path}: bad model header")
    n_features, base, lr, lam, depth = int(head[2]), float(head[3]), float(head[4]), \
        float(head[5]), int(head[6])
    trees: list[list] = []
    for parts in lines[1:]:
        if parts[0] == "tree":
            trees.append([])
        else:
            trees[-1].append(parts)
    max_nodes = 2 ** (depth + 1) - 1
    shape = (len(trees), max_nodes)
    feat = np.full(shape, -1, np.int64)
    thr = np.zeros(shape)
    left = np.full(shape, -1, np.int64)
    right = np.full(shape, -1, np.int64)
    value = np.zeros(shape)
    for t, nodes in enumerate(trees):
        it = iter(nodes)
        counter = [0]

        def build():
            node = counter[0]
            counter[0] += 1
            parts = next(it)
            if parts[0] == "leaf":
                value[t, node] = float(parts[1])
            else:
                feat[t, node] = int(parts[1])
                thr[t, node] = float(parts[2])
                left[t, node] = build()
                right[t, node] = build()
            return node

        build()
    return GbtModel(feat, thr, left, right, value, base, lr, lam, depth, n_features)


def write_features(path, dataset: StudyDataset) -> Path:
    rows = ([p, c, *f] for p, c, f in zip(dataset.participant, dataset.clip, dataset.features))
    return tableio.write_csv(path, ["participant_id", "clip_id", *FEATURE_NAMES], rows)


def read_features(path) -> dict[tuple, np.ndarray]:
    rows = tableio.read_csv(path, ["participant_id", "clip_id", *FEATURE_NAMES])
    return {(r["participant_id"], r["clip_id"]): np.array([float(r[k]) for k in FEATURE_NAMES])
            for r in rows}
