"""Pupillary light response curves.

Each colour channel (red, green, blue, gray) maps luminosity to pupil size
through ``PS(L) = a * exp(-b * L) + c * L + d``. Group curves are fitted by
damped Gauss-Newton, recalibrated per participant from nine monochrome
frames, and combined into a single prediction under a sum-to-one constraint.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import tableio
from .errors import (CalibrationError, DegenerateCalibration, DomainError, FitFailure,
                     InsufficientData, InvalidInput, InvalidModel, InvalidParameter)
from .luminance import LuminanceLUT, RgbPercent, check_rgb, query_luminosity

CHANNELS = ("red", "green", "blue", "gray")
PREDICTOR_ORDER = ("gray", "red", "green", "blue")


@dataclass(frozen=True)
class PlrCoefficients:
    a: float
    b: float
    c: float
    d: float

    def __call__(self, lux):
        lux = np.asarray(lux, dtype=float)
        out = self.a * np.exp(-self.b * lux) + self.c * lux + self.d
        return float(out) if out.ndim == 0 else out

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d], dtype=float)

    def validate(self, max_lux: float | None = None) -> "PlrCoefficients":
        p = self.as_array()
        if not np.all(np.isfinite(p)):
            raise InvalidParameter(f"non-finite PLR coefficients {self}")
        if self.a < 0 or self.b < 0 or self.d <= 0:
            raise InvalidParameter(f"PLR coefficients need a >= 0, b >= 0, d > 0: {self}")
        if max_lux is not None:
            lux = np.linspace(0.0, max_lux, 201)
            if np.any(self(lux) <= 0):
                raise InvalidParameter(f"PLR curve {self} is not positive up to {max_lux} lux")
        return self


@dataclass(frozen=True)
class PlrModelSet:
    red: PlrCoefficients
    green: PlrCoefficients
    blue: PlrCoefficients
    gray: PlrCoefficients
    provenance: str = "group"

    def channel(self, name: str) -> PlrCoefficients:
        if name not in CHANNELS:
            raise KeyError(name)
        return getattr(self, name)


# Group-level coefficients (dark laboratory, reference monitor).
GROUP_MODEL = PlrModelSet(
    red=PlrCoefficients(2.6317, 1.3371, -0.0152, 3.1500),
    green=PlrCoefficients(3.1259, 1.2324, -0.0073, 2.5036),
    blue=PlrCoefficients(3.4430, 1.6167, -0.0193, 2.6271),
    gray=PlrCoefficients(2.4465, 0.5638, -0.0184, 3.4140),
    provenance="group",
)


class CalibrationSample(NamedTuple):
    rgb: RgbPercent
    mean_pupil: float


# --- curve fitting ----------------------------------------------------------

def _as_points(points) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInput("points must be a sequence of (lux, pupil) pairs")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("points contain non-finite values")
    return arr[:, 0], arr[:, 1]


def curve_sse(coeffs: PlrCoefficients, points) -> float:
    lux, ps = _as_points(points)
    return float(((ps - coeffs(lux)) ** 2).sum())


def curve_r2(coeffs: PlrCoefficients, points) -> float:
    lux, ps = _as_points(points)
    ss_tot = ((ps - ps.mean()) ** 2).sum()
    return float(1.0 - ((ps - coeffs(lux)) ** 2).sum() / ss_tot)


def _model_and_jacobian(p: np.ndarray, lux: np.ndarray):
    a, b, c, d = p
    e = np.exp(-b * lux)
    f = a * e + c * lux + d
    jac = np.column_stack([e, -a * lux * e, lux, np.ones_like(lux)])
    return f, jac


def fit_plr_curve(points, init: PlrCoefficients = GROUP_MODEL.gray, max_iter: int = 200,
                  tol: float = 1e-10, damping: float = 1e-3) -> PlrCoefficients:
    """Least-squares fit of the exponential light-response curve.

    Levenberg-Marquardt style damped Gauss-Newton: the damping term is scaled
    by the diagonal of ``J^T J``, multiplied by 10 after a rejected step and
    divided by 10 after an accepted one. Stops when an accepted step changes
    the SSE by less than ``tol`` relative, or after ``max_iter`` iterations.
    Never returns coefficients worse than ``init``.
    """
    lux, ps = _as_points(points)
    if len(lux) < 4 or len(np.unique(lux)) < 3:
        raise InsufficientData("PLR fit needs >= 4 points with >= 3 distinct lux values")
    p = init.as_array()
    if not np.all(np.isfinite(p)):
        raise InvalidInput("non-finite initial coefficients")
    f, jac = _model_and_jacobian(p, lux)
    resid = ps - f
    sse = float(resid @ resid)
    if not np.isfinite(sse):
        raise FitFailure("SSE is not finite at the initial coefficients")
    lam = damping
    for _ in range(max_iter):
        jtj = jac.T @ jac
        grad = jac.T @ resid
        diag = np.diag(jtj).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
        while True:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), grad)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                trial = p + step
                f_t, jac_t = _model_and_jacobian(trial, lux)
                resid_t = ps - f_t
                sse_t = float(resid_t @ resid_t)
                if np.isfinite(sse_t) and sse_t < sse:
                    break
            lam *= 10.0
            if lam > 1e16:
                return PlrCoefficients(*map(float, p))
        rel = (sse - sse_t) / sse if sse > 0 else 0.0
        p, jac, resid, sse = trial, jac_t, resid_t, sse_t
        lam = max(lam / 10.0, 1e-15)
        if rel < tol or sse == 0.0:
            break
    if not np.isfinite(sse):
        raise FitFailure("fit diverged")
    return PlrCoefficients(*map(float, p))


# --- participant calibration -----------------------------------------------

CALIBRATION_POINTS = {
    "black": (0.0, 0.0, 0.0),
    "red 50%": (50.0, 0.0, 0.0),
    "red 100%": (100.0, 0.0, 0.0),
    "green 50%": (0.0, 50.0, 0.0),
    "green 100%": (0.0, 100.0, 0.0),
    "blue 50%": (0.0, 0.0, 50.0),
    "blue 100%": (0.0, 0.0, 100.0),
    "gray 50%": (50.0, 50.0, 50.0),
    "gray 100%": (100.0, 100.0, 100.0),
}


def _match_calibration(samples: Sequence[CalibrationSample]) -> dict[str, float]:
    found: dict[str, float] = {}
    for s in samples:
        rgb = check_rgb(s.rgb)
        if not (0.5 < s.mean_pupil < 12):
            raise CalibrationError(f"implausible mean pupil {s.mean_pupil} mm at "
                                   f"{tuple(float(v) for v in rgb)}")
        for name, target in CALIBRATION_POINTS.items():
            if np.all(np.abs(rgb - target) < 1e-9):
                if name in found:
                    raise CalibrationError(f"duplicate calibration point {name} {target}")
                found[name] = float(s.mean_pupil)
    missing = [n for n in CALIBRATION_POINTS if n not in found]
    if missing:
        detail = ", ".join(f"{n} {CALIBRATION_POINTS[n]}" for n in missing)
        raise CalibrationError(f"missing calibration point(s): {detail}")
    return found


def _solve_fixed_b(b: float, lux: np.ndarray, ps: np.ndarray, label: str) -> PlrCoefficients:
    design = np.column_stack([np.exp(-b * lux), lux, np.ones_like(lux)])
    if np.linalg.cond(design) > 1e12:
        raise DegenerateCalibration(f"{label}: calibration points give a singular system "
                                    f"(lux = {lux.tolist()})")
    a, c, d = np.linalg.solve(design, ps)
    return PlrCoefficients(float(a), float(b), float(c), float(d))


def calibrate_participant(group: PlrModelSet, samples: Sequence[CalibrationSample],
                          lut: LuminanceLUT, participant: str = "participant") -> PlrModelSet:
    """Recalibrate the group curves from a participant's calibration frames.

    ``b`` stays at the group value; ``(a, c, d)`` solve the 3x3 linear system
    through the black, 50% and 100% points of each channel. The single black
    frame is shared: each colour curve passes through the measured black pupil
    size times the group's ratio ``PS_channel(black) / PS_gray(black)``, so the
    group model is a fixed point. Frames other than the nine calibration
    colours are ignored.
    """
    try:
        found = _match_calibration(samples)
    except CalibrationError as exc:
        raise CalibrationError(f"{participant}: {exc}") from None
    black_lux = query_luminosity(lut, CALIBRATION_POINTS["black"])
    out = {}
    for ch in CHANNELS:
        names = ["black", f"{ch} 50%", f"{ch} 100%"]
        lux = np.array([query_luminosity(lut, CALIBRATION_POINTS[n]) for n in names])
        ps = np.array([found[n] for n in names])
        ps[0] *= group.channel(ch)(black_lux) / group.gray(black_lux)
        out[ch] = _solve_fixed_b(group.channel(ch).b, lux, ps, ch)
    return PlrModelSet(provenance=participant, **out)


# --- predictions -------------------------------------------------------------

def predict_gray(model: PlrModelSet, lux):
    lux_arr = np.asarray(lux, dtype=float)
    if np.any(lux_arr < 0) or not np.all(np.isfinite(lux_arr)):
        raise DomainError(f"luminosity must be finite and >= 0, got {lux}")
    return model.gray(lux)


def _channel_lux(rgb: np.ndarray, lut: LuminanceLUT, query) -> tuple[float, float, float]:
    q = query or (lambda c: query_luminosity(lut, c))
    return (q((rgb[0], 0.0, 0.0)), q((0.0, rgb[1], 0.0)), q((0.0, 0.0, rgb[2])))


def predict_color_based(model: PlrModelSet, rgb, lut: LuminanceLUT, query=None) -> float:
    """Colour-weighted sum of the single-primary predictions."""
    x = check_rgb(rgb)
    total = x.sum()
    q = query or (lambda c: query_luminosity(lut, c))
    if total == 0:
        return float(predict_gray(model, q((0.0, 0.0, 0.0))))
    lr, lg, lb = _channel_lux(x, lut, q)
    return float(x[0] / total * model.red(lr) + x[1] / total * model.green(lg)
                 + x[2] / total * model.blue(lb))


def channel_predictors(model: PlrModelSet, rgb, lut: LuminanceLUT, lux: float | None = None,
                       query=None) -> np.ndarray:
    """``(PS_gray, PS_red, PS_green, PS_blue)`` for one frame.

    ``lux`` overrides the frame luminosity used by the gray curve (e.g. the
    gaze-region value); the primaries use the single-channel components.
    """
    x = check_rgb(rgb)
    q = query or (lambda c: query_luminosity(lut, c))
    if lux is None:
        lux = q(tuple(x))
    lr, lg, lb = _channel_lux(x, lut, q)
    return np.array([predict_gray(model, lux), model.red(lr), model.green(lg), model.blue(lb)])


# --- combined model ----------------------------------------------------------

@dataclass(frozen=True)
class CombinedWeights:
    a_gray: float
    a_red: float
    a_green: float
    a_blue: float
    K: float
    C: float
    degenerate: bool = False

    @property
    def mix(self) -> np.ndarray:
        return np.array([self.a_gray, self.a_red, self.a_green, self.a_blue])


def _gray_fallback(predictors: np.ndarray, measured: np.ndarray) -> CombinedWeights:
    g = predictors[:, 0]
    if np.ptp(g) <= 1e-12 * max(1.0, np.abs(g).max()):
        K, C = 1.0, float(np.mean(measured - g))
    else:
        K, C = np.polyfit(g, measured, 1)
    return CombinedWeights(1.0, 0.0, 0.0, 0.0, float(K), float(C), degenerate=True)


def fit_combined(predictors, measured, rcond: float = 1e-10) -> CombinedWeights:
    """Fit ``K * sum_i a_i PS_i + C`` with ``sum_i a_i = 1``.

    The constraint is removed by substitution: ``a_blue = 1 - a_gray - a_red -
    a_green`` turns the model into an ordinary regression of ``measured`` on
    ``[PS_blue, PS_gray - PS_blue, PS_red - PS_blue, PS_green - PS_blue, 1]``
    whose first coefficient is ``K``. Rank-deficient designs fall back to the
    gray curve alone (``a_gray = 1``) with ``K, C`` from a simple regression.
    """
    P = np.asarray(predictors, dtype=float)
    y = np.asarray(measured, dtype=float)
    if P.ndim != 2 or P.shape[1] != 4 or len(y) != len(P):
        raise InvalidInput("predictors must be (n, 4) aligned with measured")
    if len(y) < 6:
        raise InsufficientData(f"combined fit needs >= 6 observations, got {len(y)}")
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(y))):
        raise InvalidInput("non-finite predictors or measurements")
    blue = P[:, 3]
    design = np.column_stack([blue, P[:, 0] - blue, P[:, 1] - blue, P[:, 2] - blue,
                              np.ones_like(blue)])
    norms = np.linalg.norm(design, axis=0)
    sv = np.linalg.svd(design / np.where(norms > 0, norms, 1.0), compute_uv=False)
    if norms.min() == 0 or sv[-1] < rcond * sv[0]:
        warnings.warn("combined fit is rank deficient; falling back to gray-only model",
                      RuntimeWarning, stacklevel=2)
        return _gray_fallback(P, y)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    K = float(coef[0])
    if abs(K) < 1e-10:
        warnings.warn("combined fit has K ~ 0; falling back to gray-only model",
                      RuntimeWarning, stacklevel=2)
        return _gray_fallback(P, y)
    a_gray, a_red, a_green = (float(v) for v in coef[1:4] / K)
    a_blue = 1.0 - (a_gray + a_red + a_green)
    return CombinedWeights(a_gray, a_red, a_green, a_blue, K, float(coef[4]))


def predict_combined(weights: CombinedWeights, predictors):
    if abs(weights.mix.sum() - 1.0) > 1e-6:
        raise InvalidModel(f"combined weights sum to {weights.mix.sum()}, not 1")
    P = np.asarray(predictors, dtype=float)
    out = weights.K * (P @ weights.mix) + weights.C
    return float(out) if np.ndim(out) == 0 else out


# --- file formats -------------------------------------------------------------

PLR_MAGIC = "pupilkit-plr"


def write_model(model: PlrModelSet, path) -> Path:
    lines = [f"{PLR_MAGIC} v1 {model.provenance}"]
    for ch in CHANNELS:
        c = model.channel(ch)
        lines.append(f"{ch} {c.a!r} {c.b!r} {c.c!r} {c.d!r}")
    return tableio.write_text(path, "\n".join(lines) + "\n")


def read_model(path) -> PlrModelSet:
    path = Path(path)
    if not path.exists():
        raise InvalidInput(f"model file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = tableio.strip_comments(fh)
    head = lines[0].split() if lines else []
    if len(head) < 3 or head[0] != PLR_MAGIC or head[1] != "v1":
        raise InvalidInput(f"{path}: bad model header")
    coeffs = {}
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 5 or parts[0] not in CHANNELS:
            raise InvalidInput(f"{path}: bad model line {ln.strip()!r}")
        coeffs[parts[0]] = PlrCoefficients(*(float(v) for v in parts[1:]))
    if set(coeffs) != set(CHANNELS):
        raise InvalidInput(f"{path}: model must list {CHANNELS}")
    return PlrModelSet(provenance=" ".join(head[2:]), **coeffs)


def read_calibration(path) -> list[CalibrationSample]:
    rows = tableio.read_csv(path, ["r", "g", "b", "mean_pupil_mm"])
    return [CalibrationSample(RgbPercent(float(r["r"]), float(r["g"]), float(r["b"])),
                              float(r["mean_pupil_mm"])) for r in rows]


def write_calibration(path, samples: Iterable[CalibrationSample]) -> Path:
    return tableio.write_csv(path, ["r", "g", "b", "mean_pupil_mm"],
                             ([s.rgb[0], s.rgb[1], s.rgb[2], s.mean_pupil] for s in samples))


def with_provenance(model: PlrModelSet, provenance: str) -> PlrModelSet:
    return replace(model, provenance=provenance)
