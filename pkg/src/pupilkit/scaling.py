"""Valence/arousal ground truth from 12-emotion questionnaires.

Per-participant clip dissimilarities are double-centred into scalar-product
matrices ``B_k`` and decomposed with the individual-differences model
``B_k ~ X diag(w_k) X^T`` (INDSCAL). The fit alternates least squares over
two copies of the configuration (``X`` and ``Y``) and nonnegative weights,
which makes every block update an exact (constrained) least-squares solve, so
the loss can only go down; the copies coincide at convergence and are
averaged into the reported configuration.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from . import tableio
from .errors import (DegenerateConfiguration, InsufficientData, InvalidInput, MissingData,
                     RescaleError)

EMOTIONS = ("positive", "negative", "happy", "calm", "content", "amused", "excited",
            "angry", "sad", "disgusted", "fearful", "bored")


@dataclass(frozen=True)
class RatingTensor:
    """Scores (0-9) indexed ``[participant, clip, emotion]``; NaN marks a missing rating."""

    participants: tuple
    clips: tuple
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.shape != (len(self.participants), len(self.clips), len(EMOTIONS)):
            raise InvalidInput(f"rating tensor shape {s.shape} does not match ids")
        finite = s[np.isfinite(s)]
        if np.any(finite < 0) or np.any(finite > 9):
            raise InvalidInput("ratings must lie in [0, 9]")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "participants", tuple(self.participants))
        object.__setattr__(self, "clips", tuple(self.clips))

    def emotion(self, name: str) -> np.ndarray:
        return self.scores[:, :, EMOTIONS.index(name)]


def dissimilarities(ratings: RatingTensor) -> np.ndarray:
    """Euclidean distances between clip rating vectors, shape ``(P, C, C)``."""
    s = ratings.scores
    if s.shape[1] < 3:
        raise InsufficientData("need at least 3 clips")
    if not np.all(np.isfinite(s)):
        bad = np.argwhere(~np.isfinite(s))[0]
        raise MissingData(f"missing rating for participant {ratings.participants[bad[0]]}, "
                          f"clip {ratings.clips[bad[1]]}, emotion {EMOTIONS[bad[2]]}")
    diff = s[:, :, None, :] - s[:, None, :, :]
    d = np.sqrt((diff ** 2).sum(axis=-1))
    idx = np.arange(s.shape[1])
    d[:, idx, idx] = 0.0
    return d


def double_center(d: np.ndarray) -> np.ndarray:
    n = d.shape[-1]
    j = np.eye(n) - 1.0 / n
    return -0.5 * j @ (d ** 2) @ j


@dataclass
class GroupSpace:
    """Fitted group configuration.

    ``coords`` has one row per clip (column 0 valence, column 1 arousal) with
    unit mean-square columns; ``weights`` has one row per participant.
    """

    coords: np.ndarray
    weights: np.ndarray
    clips: tuple = ()
    participants: tuple = ()
    loss_history: list = field(default_factory=list)
    converged: bool = True
    final_loss: float = float("nan")


def _cp_loss(B, X, Y, W) -> float:
    fit = np.einsum("id,kd,jd->kij", X, W, Y)
    return float(((B - fit) ** 2).sum())


def _update_factor(B, other, W) -> np.ndarray:
    # argmin_F sum_k ||B_k - F diag(w_k) other^T||^2
    num = np.einsum("kij,jd,kd->id", B, other, W)
    gram = other.T @ other
    den = np.einsum("kd,de,ke->de", W, gram, W)
    return num @ np.linalg.pinv(den)


def _update_weights(B, X, Y) -> np.ndarray:
    Z = np.einsum("id,jd->ijd", X, Y).reshape(-1, X.shape[1])
    return np.array([nnls(Z, bk.ravel())[0] for bk in B])


def _normalise(F: np.ndarray) -> np.ndarray:
    F = F - F.mean(axis=0)
    rms = np.sqrt((F ** 2).mean(axis=0))
    return F / np.where(rms > 0, rms, 1.0)


def indscal_fit(distances, dims: int = 2, max_iter: int = 1000, tol: float = 1e-10,
                seed: int = 0, ratings: Optional[RatingTensor] = None) -> GroupSpace:
    """Fit the INDSCAL model to per-participant distance matrices ``(P, C, C)``.

    Axes come out ordered by descending total weight. Signs are fixed so that
    the clip with the highest mean "excited" rating has a positive second
    coordinate and the clip with the highest mean "positive" rating a positive
    first coordinate (without ratings, the largest-magnitude coordinate of each
    axis is made positive).
    """
    D = np.asarray(distances, dtype=float)
    if D.ndim != 3 or D.shape[1] != D.shape[2]:
        raise InvalidInput("distances must have shape (participants, clips, clips)")
    n_part, n = D.shape[:2]
    if n < dims + 1:
        raise DegenerateConfiguration(f"{n} clips cannot support {dims} dimensions")
    if n_part < 2:
        raise InsufficientData("INDSCAL needs at least 2 participants")
    off = D[:, ~np.eye(n, dtype=bool)]
    if np.all(np.ptp(off, axis=1) <= 1e-12 * max(1.0, np.abs(off).max())):
        raise DegenerateConfiguration("all distances are equal; no preferred configuration")

    B = np.stack([double_center(dk) for dk in D])
    evals, evecs = np.linalg.eigh(B.mean(axis=0))
    order = np.argsort(evals)[::-1][:dims]
    X = evecs[:, order] * np.sqrt(np.maximum(evals[order], 1e-12))
    rng = np.random.default_rng(seed)
    X = X + 1e-3 * np.abs(X).max() * rng.standard_normal(X.shape)
    Y = X.copy()
    W = _update_weights(B, X, Y)

    history = [_cp_loss(B, X, Y, W)]
    converged = False
    scale = max(float((B ** 2).sum()), 1e-300)
    for _ in range(max_iter):
        X = _update_factor(B, Y, W)
        Y = _update_factor(B, X, W)
        W = _update_weights(B, X, Y)
        loss = _cp_loss(B, X, Y, W)
        assert loss <= history[-1] + 1e-10 * scale, "ALS loss increased"
        history.append(loss)
        if history[-2] - loss <= tol * max(history[-2], 1e-300 * scale):
            converged = True
            break
    if not converged:
        warnings.warn(f"INDSCAL did not converge in {max_iter} iterations", RuntimeWarning,
                      stacklevel=2)

    Xn, Yn = _normalise(X), _normalise(Y)
    signs = np.sign((Xn * Yn).sum(axis=0))
    signs[signs == 0] = 1.0
    coords = _normalise(0.5 * (Xn + Yn * signs))
    weights = _update_weights(B, coords, coords)
    order = np.argsort(-weights.sum(axis=0), kind="stable")
    coords, weights = coords[:, order], weights[:, order]
    coords = _fix_signs(coords, ratings)
    space = GroupSpace(coords, weights, loss_history=history, converged=converged,
                       final_loss=_cp_loss(B, coords, coords, weights))
    if ratings is not None:
        space.clips, space.participants = ratings.clips, ratings.participants
    return space


def _fix_signs(coords: np.ndarray, ratings: Optional[RatingTensor]) -> np.ndarray:
    coords = coords.copy()
    anchors = {0: "positive", 1: "excited"}
    for d in range(coords.shape[1]):
        if ratings is not None and d in anchors:
            clip = int(np.argmax(ratings.emotion(anchors[d]).mean(axis=0)))
        else:
            clip = int(np.argmax(np.abs(coords[:, d])))
        if coords[clip, d] < 0:
            coords[:, d] *= -1
    return coords


def rescale_axis(values) -> np.ndarray:
    """Affine map sending min to -2 and max to +2."""
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    if not hi > lo:
        raise RescaleError("cannot rescale a zero-variance axis")
    out = -2.0 + 4.0 * (v - lo) / (hi - lo)
    out[v == lo] = -2.0
    out[v == hi] = 2.0
    return out


def labels(space: GroupSpace, per_participant: bool = False):
    """Rescaled (valence, arousal) per clip.

    Returns an array ``(C, 2)``; with ``per_participant`` the individual
    spaces ``X diag(sqrt(w_k))`` are rescaled separately, giving ``(P, C, 2)``.
    """
    if not per_participant:
        return np.column_stack([rescale_axis(space.coords[:, d]) for d in range(2)])
    out = []
    for w in space.weights:
        ind = space.coords[:, :2] * np.sqrt(w[:2])
        out.append(np.column_stack([rescale_axis(ind[:, d]) for d in range(2)]))
    return np.stack(out)


def procrustes_congruence(reference, estimate) -> float:
    """Congruence coefficient after an orthogonal Procrustes fit of ``estimate``
    onto ``reference`` (both column-centred)."""
    A = np.asarray(reference, float) - np.mean(reference, axis=0)
    Bm = np.asarray(estimate, float) - np.mean(estimate, axis=0)
    u, _, vt = np.linalg.svd(Bm.T @ A)
    rotated = Bm @ (u @ vt)
    return float((A * rotated).sum() / np.sqrt((A ** 2).sum() * (rotated ** 2).sum()))


# --- file formats -------------------------------------------------------------

def read_ratings(path) -> RatingTensor:
    rows = tableio.read_csv(path, ["participant_id", "clip_id", "emotion", "score"])
    parts = sorted({r["participant_id"] for r in rows})
    clips = sorted({r["clip_id"] for r in rows})
    pi = {p: i for i, p in enumerate(parts)}
    ci = {c: i for i, c in enumerate(clips)}
    scores = np.full((len(parts), len(clips), len(EMOTIONS)), np.nan)
    for r in rows:
        if r["emotion"] not in EMOTIONS:
            raise InvalidInput(f"unknown emotion {r['emotion']!r}")
        scores[pi[r["participant_id"]], ci[r["clip_id"]], EMOTIONS.index(r["emotion"])] = float(r["score"])
    return RatingTensor(tuple(parts), tuple(clips), scores)


def write_ratings(path, ratings: RatingTensor) -> Path:
    rows = []
    for i, p in enumerate(ratings.participants):
        for j, c in enumerate(ratings.clips):
            for e, name in enumerate(EMOTIONS):
                rows.append([p, c, name, int(ratings.scores[i, j, e])])
    return tableio.write_csv(path, ["participant_id", "clip_id", "emotion", "score"], rows)


def write_labels(path, clips: Sequence[str], lab: np.ndarray) -> Path:
    return tableio.write_csv(path, ["clip_id", "valence", "arousal"],
                             ([c, float(v), float(a)] for c, (v, a) in zip(clips, lab)))


def read_labels(path) -> dict[str, tuple[float, float]]:
    rows = tableio.read_csv(path, ["clip_id", "valence", "arousal"])
    return {r["clip_id"]: (float(r["valence"]), float(r["arousal"])) for r in rows}
