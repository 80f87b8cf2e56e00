"""Deterministic synthetic study: the end-to-end oracle.

Every participant gets light-response curves perturbed from the group
curves (``b`` kept), a calibration session, and one raw trace per clip whose
pupil size is ``light + arousal + noise`` by construction. Clip brightness is
correlated with the arousal label at a chosen strength (``confound``) so the
uncorrected pupil signal can be made deliberately misleading.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tableio
from .decouple import SalientInterval, write_salient
from .errors import ConfigError
from .luminance import LuminanceLUT, RgbPercent, build_synthetic_lut, cached, write_frame_means, write_lut
from .plr import (CALIBRATION_POINTS, CHANNELS, GROUP_MODEL, CalibrationSample, CombinedWeights,
                  PlrCoefficients, PlrModelSet, channel_predictors, predict_combined,
                  write_calibration)
from .preprocess import RawPupilTrace, write_frame_times, write_raw_trace
from .scaling import EMOTIONS, RatingTensor, rescale_axis, write_ratings

# circumplex angle (degrees) of each questionnaire emotion: x = valence, y = arousal
EMOTION_ANGLES = {
    "positive": 0, "negative": 180, "happy": 30, "calm": -60, "content": -30, "amused": 20,
    "excited": 60, "angry": 120, "sad": -150, "disgusted": 150, "fearful": 110, "bored": -120,
}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_participants: int = 12
    n_clips: int = 16
    frames_per_clip: int = 200
    fps: float = 25.0
    sample_rate_hz: float = 60.0
    # relative perturbation of a, c, d per participant (b is kept at the group value)
    sigma_a: float = 0.10
    sigma_c: float = 0.10
    sigma_d: float = 0.05
    arousal_gain: float = 0.35
    nonlinearity: float = 0.0
    noise_sigma: float = 0.03
    confound: float = -0.8
    blink_rate_hz: float = 0.25
    lux_range: tuple = (5.0, 60.0)
    max_lux: float = 100.0
    gamma: float = 2.2
    lut_levels: int = 11
    rating_noise: float = 0.4
    salient_fraction: tuple = (0.3, 0.5)

    def __post_init__(self):
        if self.n_participants < 1 or self.n_clips < 3 or self.frames_per_clip < 6:
            raise ConfigError("synthetic study needs >= 1 participant, >= 3 clips, >= 6 frames")
        for name in ("sigma_a", "sigma_c", "sigma_d", "noise_sigma", "blink_rate_hz",
                     "rating_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not -1.0 <= self.confound <= 1.0:
            raise ConfigError("confound must lie in [-1, 1]")
        lo, hi = self.lux_range
        if not 0 <= lo < hi <= self.max_lux:
            raise ConfigError("lux_range must satisfy 0 <= lo < hi <= max_lux")
        flo, fhi = self.salient_fraction
        if not 0 < flo <= fhi < 1:
            raise ConfigError("salient_fraction must lie in (0, 1)")

    @property
    def clip_ms(self) -> float:
        return self.frames_per_clip * 1000.0 / self.fps


@dataclass
class ClipTrue:
    """Sample-level ground truth of one (participant, clip) trace."""

    timestamps: np.ndarray
    luminosity: np.ndarray
    arousal: np.ndarray
    noise: np.ndarray
    measured: np.ndarray
    label: float


@dataclass
class SynthStudy:
    config: SynthConfig
    lut: LuminanceLUT
    participants: list
    clips: list
    valence: np.ndarray
    arousal: np.ndarray
    frames: dict
    frame_times: np.ndarray
    salient: dict
    true_models: dict
    true_weights: dict
    calibration: dict
    traces: dict
    truth: dict
    ratings: RatingTensor
    clip_brightness: np.ndarray = field(default_factory=lambda: np.zeros(0))


def arousal_link(label, gain: float, nonlinearity: float = 0.0):
    """Pupil dilation (mm) for an arousal label; convex when ``nonlinearity > 0``."""
    u = np.asarray(label, dtype=float)
    if nonlinearity == 0:
        return gain * u
    return gain * np.expm1(nonlinearity * u) / nonlinearity


def _correlated_latent(labels: np.ndarray, rho: float, rng) -> np.ndarray:
    """Standardised vector whose sample correlation with ``labels`` is exactly ``rho``."""
    s = (labels - labels.mean()) / labels.std()
    e = rng.standard_normal(len(labels))
    basis = np.column_stack([np.ones_like(s), s])
    e = e - basis @ np.linalg.lstsq(basis, e, rcond=None)[0]
    e = e / e.std()
    return rho * s + np.sqrt(max(0.0, 1.0 - rho * rho)) * e


def _clip_labels(n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    # balanced circumplex quadrants, as in a typical affective clip set
    quad = np.array([(1, 1), (-1, 1), (1, -1), (-1, -1)])[np.arange(n) % 4]
    mag = rng.uniform(0.25, 1.0, size=(n, 2))
    v, a = (quad * mag).T
    return rescale_axis(v), rescale_axis(a)


def _smooth_process(n: int, rng, n_waves: int = 3) -> np.ndarray:
    t = np.arange(n) / n
    out = np.zeros(n)
    for _ in range(n_waves):
        freq = rng.uniform(0.5, 4.0)
        out += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (freq * t + rng.uniform()))
    return out / np.abs(out).max()


def _display_lux(rgb: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    w = np.array([0.2126, 0.7152, 0.0722])
    return cfg.max_lux * ((rgb / 100.0) ** cfg.gamma @ w)


def _clip_frames(target_lux: float, cfg: SynthConfig, rng) -> np.ndarray:
    n = cfg.frames_per_clip
    hue = rng.dirichlet([3.0, 3.0, 3.0])
    shape = np.column_stack([hue[c] * (1.0 + 0.6 * _smooth_process(n, rng)) for c in range(3)])
    shape = np.clip(shape, 0.0, None) / hue.max()

    def drive(level):
        # soft saturation: a channel never sits at 100% for a whole clip
        return 100.0 * np.tanh(level * shape / 100.0)

    lo, hi = 0.0, 1000.0 / max(shape.min(), 1e-3)
    if _display_lux(drive(hi), cfg).mean() < target_lux:
        raise ConfigError(f"target {target_lux:.1f} lux is out of reach of the display")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _display_lux(drive(mid), cfg).mean() < target_lux:
            lo = mid
        else:
            hi = mid
    return np.round(drive(0.5 * (lo + hi)), 6)


def _salient(clip_id: str, cfg: SynthConfig, rng) -> SalientInterval:
    dur = cfg.clip_ms / 1000.0
    frac = rng.uniform(*cfg.salient_fraction)
    length = frac * dur
    start = rng.uniform(0.1 * dur, 0.9 * dur - length)
    return SalientInterval(clip_id, ((round(start, 3), round(start + length, 3)),))


def _bump(t_s: np.ndarray, salient: SalientInterval, taper: float = 0.3) -> np.ndarray:
    out = np.zeros_like(t_s)
    for s, e in salient.intervals:
        u = (t_s - s) / (e - s)
        inside = (u >= 0) & (u <= 1)
        w = np.ones_like(u)
        edge = taper / 2
        rise = u < edge
        fall = u > 1 - edge
        w[rise] = 0.5 * (1 - np.cos(np.pi * u[rise] / edge))
        w[fall] = 0.5 * (1 - np.cos(np.pi * (1 - u[fall]) / edge))
        out[inside] = np.maximum(out[inside], w[inside])
    return out


def _participant_model(rng, cfg: SynthConfig, pid: str, lut: LuminanceLUT) -> PlrModelSet:
    # black-frame pupil size; colour curves keep the group's ratio to gray at black
    black = GROUP_MODEL.gray(0.0) * (1.0 + cfg.sigma_d * rng.standard_normal())
    curves = {}
    for ch in CHANNELS:
        g = GROUP_MODEL.channel(ch)
        a = max(g.a * (1.0 + cfg.sigma_a * rng.standard_normal()), 0.1)
        c = g.c * (1.0 + cfg.sigma_c * rng.standard_normal())
        ps0 = black * g(0.0) / GROUP_MODEL.gray(0.0)
        curves[ch] = PlrCoefficients(float(a), g.b, float(c), float(ps0 - a))
    model = PlrModelSet(provenance=pid, **curves)
    # each curve only has to stay positive over the lux its channel can reach
    reach = {"red": (100, 0, 0), "green": (0, 100, 0), "blue": (0, 0, 100), "gray": (100, 100, 100)}
    for ch in CHANNELS:
        model.channel(ch).validate(lut(reach[ch]))
    return model


def _participant_weights(rng) -> CombinedWeights:
    w = rng.dirichlet([4.0, 2.0, 2.0, 2.0])
    return CombinedWeights(float(w[0]), float(w[1]), float(w[2]), float(1.0 - w[:3].sum()), 1.0, 0.0)


def _calibration_session(model: PlrModelSet, weights: CombinedWeights, lut, cfg, rng):
    """27 frames (all {0,50,100}^3 colours), 4 s each, reported as mean pupil size.

    The nine calibration colours report the participant's channel curves; the
    other frames report the combined light response.
    """
    q = cached(lut)
    samples = []
    sem = cfg.noise_sigma / np.sqrt(4.0 * cfg.sample_rate_hz)
    lookup = {v: k for k, v in CALIBRATION_POINTS.items()}
    for r in (0.0, 50.0, 100.0):
        for g in (0.0, 50.0, 100.0):
            for b in (0.0, 50.0, 100.0):
                name = lookup.get((r, g, b))
                if name is None:
                    ps = predict_combined(weights, channel_predictors(model, (r, g, b), lut, query=q))
                else:
                    ch = "gray" if name == "black" else name.split()[0]
                    ps = model.channel(ch)(q((r, g, b)))
                samples.append(CalibrationSample(RgbPercent(r, g, b),
                                                 float(ps + sem * rng.standard_normal())))
    return samples


def _blink_mask(n: int, duration_s: float, cfg: SynthConfig, rng) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    for _ in range(rng.poisson(cfg.blink_rate_hz * duration_s)):
        length = int(rng.integers(4, 10))
        start = int(rng.integers(1, max(2, n - length - 1)))
        mask[start:start + length] = True
    return mask


def generate_study(cfg: SynthConfig = SynthConfig()) -> SynthStudy:
    """Build the whole synthetic study in memory (see :func:`write_study`)."""
    root = np.random.SeedSequence(cfg.seed)
    design_seq, *part_seqs = root.spawn(cfg.n_participants + 1)
    drng = np.random.default_rng(design_seq)

    lut = build_synthetic_lut(cfg.gamma, cfg.max_lux, cfg.lut_levels)
    q = cached(lut)
    clips = [f"C{j + 1:02d}" for j in range(cfg.n_clips)]
    participants = [f"P{k + 1:02d}" for k in range(cfg.n_participants)]
    valence, arousal = _clip_labels(cfg.n_clips, drng)

    # light-driven pupil size falls with brightness: brightness = -latent
    latent = _correlated_latent(arousal, cfg.confound, drng)
    lo, hi = cfg.lux_range
    brightness = lo + (hi - lo) * (latent.max() - latent) / (latent.max() - latent.min())
    frames = {c: _clip_frames(b, cfg, drng) for c, b in zip(clips, brightness)}
    n_frames = cfg.frames_per_clip
    frame_ms = 1000.0 / cfg.fps
    frame_times = np.column_stack([np.arange(n_frames) * frame_ms,
                                   (np.arange(n_frames) + 1) * frame_ms])
    salient = {c: _salient(c, cfg, drng) for c in clips}

    # ratings: circumplex loadings, participant-specific dimension weights
    angles = np.deg2rad([EMOTION_ANGLES[e] for e in EMOTIONS])
    loadings = np.column_stack([np.cos(angles), np.sin(angles)])
    coords = np.column_stack([valence, arousal])

    true_models, true_weights, calibration, traces, truth = {}, {}, {}, {}, {}
    scores = np.zeros((cfg.n_participants, cfg.n_clips, len(EMOTIONS)))
    period = 1000.0 / cfg.sample_rate_hz
    n_samples = int(np.floor(cfg.clip_ms / period))
    for k, (pid, seq) in enumerate(zip(participants, part_seqs)):
        rng = np.random.default_rng(seq)
        model = _participant_model(rng, cfg, pid, lut)
        weights = _participant_weights(rng)
        true_models[pid], true_weights[pid] = model, weights
        calibration[pid] = _calibration_session(model, weights, lut, cfg, rng)
        dim_w = rng.uniform(0.7, 1.3, size=2)
        raw = 4.5 + 1.5 * (coords * dim_w) @ loadings.T
        raw = raw + cfg.rating_noise * rng.standard_normal(raw.shape)
        scores[k] = np.clip(np.rint(raw), 0, 9)
        eye_offset = 0.05 * rng.standard_normal()
        for j, clip in enumerate(clips):
            t = np.arange(n_samples) * period + rng.uniform(-1.0, 1.0, n_samples)
            t[0] = max(t[0], 0.0)
            t = np.round(np.maximum.accumulate(t) + np.arange(n_samples) * 1e-6, 6)
            frame_idx = np.minimum((t // frame_ms).astype(int), n_frames - 1)
            P = np.array([channel_predictors(model, rgb, lut, query=q) for rgb in frames[clip]])
            light_frame = np.asarray(predict_combined(weights, P))
            light = light_frame[frame_idx]
            dil = arousal_link(arousal[j], cfg.arousal_gain, cfg.nonlinearity)
            arous = dil * _bump(t / 1000.0, salient[clip])
            noise = cfg.noise_sigma * rng.standard_normal(n_samples)
            measured = light + arous + noise
            left = measured + eye_offset
            right = measured - eye_offset
            blink = _blink_mask(n_samples, cfg.clip_ms / 1000.0, cfg, rng)
            left[blink] = -1.0
            right[blink] = -1.0
            gx = 960.0 + 30.0 * rng.standard_normal(n_samples)
            gy = 540.0 + 30.0 * rng.standard_normal(n_samples)
            gx[blink] = np.nan
            gy[blink] = np.nan
            traces[(pid, clip)] = RawPupilTrace(t, left, right, gx, gy)
            truth[(pid, clip)] = ClipTrue(t, light, arous, noise, measured, float(arousal[j]))

    ratings = RatingTensor(tuple(participants), tuple(clips), scores)
    return SynthStudy(cfg, lut, participants, clips, valence, arousal, frames, frame_times,
                      salient, true_models, true_weights, calibration, traces, truth, ratings,
                      brightness)


def clip_mean_luminosity(study: SynthStudy) -> np.ndarray:
    q = cached(study.lut)
    return np.array([np.mean([q(tuple(rgb)) for rgb in study.frames[c]]) for c in study.clips])


def write_study(study: SynthStudy, outdir) -> dict[str, Path]:
    """Write every input file of the pipeline plus ``truth.csv``."""
    out = Path(outdir)
    paths = {
        "lut": write_lut(study.lut, out / "lut.txt"),
        "ratings": write_ratings(out / "ratings.csv", study.ratings),
        "salient": write_salient(out / "salient.csv", study.salient),
    }
    for c in study.clips:
        write_frame_means(out / "frames" / f"{c}.csv", [RgbPercent(*rgb) for rgb in study.frames[c]])
        write_frame_times(out / "frame_times" / f"{c}.csv", study.frame_times)
    for p in study.participants:
        write_calibration(out / "calibration" / f"{p}.csv", study.calibration[p])
        for c in study.clips:
            write_raw_trace(out / "traces" / p / f"{c}.csv", study.traces[(p, c)])
    rows = []
    for (p, c), tr in sorted(study.truth.items()):
        for i in range(len(tr.timestamps)):
            rows.append([p, c, i, float(tr.timestamps[i]), float(tr.luminosity[i]),
                         float(tr.arousal[i]), float(tr.noise[i]), float(tr.measured[i]), tr.label])
    paths["truth"] = tableio.write_csv(
        out / "truth.csv",
        ["participant_id", "clip_id", "sample", "timestamp_ms", "luminosity_mm", "arousal_mm",
         "noise_mm", "measured_mm", "label"], rows)
    paths["truth_labels"] = tableio.write_csv(
        out / "truth_labels.csv", ["clip_id", "valence", "arousal"],
        ([c, float(v), float(a)] for c, v, a in zip(study.clips, study.valence, study.arousal)))
    paths["frames"] = out / "frames"
    paths["frame_times"] = out / "frame_times"
    paths["calibration"] = out / "calibration"
    paths["traces"] = out / "traces"
    return paths


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
