"""Screen luminosity from RGB content.

A :class:`LuminanceLUT` samples the (nonlinear) map from RGB percent triples
to luminosity on a rectilinear grid. Queries between grid points use inverse
distance weighting over the corners of the enclosing cell, or over the two
bracketing axis points when the colour is a pure primary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import tableio
from .errors import DomainError, InvalidInput, InvalidParameter

RGB_TOL = 1e-9
EXACT_TOL = 1e-12


class RgbPercent(NamedTuple):
    r: float
    g: float
    b: float


def check_rgb(rgb) -> np.ndarray:
    """Validate an RGB percent triple and return it as a float array."""
    x = np.asarray(rgb, dtype=float).reshape(-1)
    if x.shape != (3,) or not np.all(np.isfinite(x)):
        raise DomainError(f"rgb must be three finite values, got {rgb!r}")
    if np.any(x < -RGB_TOL) or np.any(x > 100 + RGB_TOL):
        raise DomainError(f"rgb out of [0, 100]: {tuple(x)}")
    return np.clip(x, 0.0, 100.0)


@dataclass(frozen=True)
class LuminanceLUT:
    """Sampled RGB -> luminosity table.

    ``grid`` holds the sorted sample levels of each channel; ``values`` has
    shape ``(len(grid[0]), len(grid[1]), len(grid[2]))``. Queries return the
    interpolated table value times the monitor scale factor ``k``.
    """

    grid: tuple
    values: np.ndarray
    k: float = 1.0
    provenance: str = "synthetic"

    def __post_init__(self):
        grid = tuple(np.asarray(g, dtype=float) for g in self.grid)
        values = np.asarray(self.values, dtype=float)
        if len(grid) != 3:
            raise InvalidParameter("LUT needs one grid per channel")
        for g in grid:
            if g.ndim != 1 or len(g) < 2 or np.any(np.diff(g) <= 0):
                raise InvalidParameter("LUT grid levels must be sorted and distinct")
            if abs(g[0]) > RGB_TOL or abs(g[-1] - 100) > RGB_TOL:
                raise InvalidParameter("LUT grid must cover 0 and 100 on every channel")
        if values.shape != tuple(len(g) for g in grid):
            raise InvalidParameter(f"LUT values shape {values.shape} does not match grid")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise InvalidParameter("LUT values must be finite and nonnegative")
        if values[0, 0, 0] != 0:
            raise InvalidParameter("LUT value at (0,0,0) must be 0")
        for axis in range(3):
            if np.any(np.diff(values, axis=axis) < 0):
                raise InvalidParameter(f"LUT values decrease along channel {'rgb'[axis]}")
        if not (np.isfinite(self.k) and self.k > 0):
            raise InvalidParameter("LUT scale factor k must be positive")
        values.setflags(write=False)
        for g in grid:
            g.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def levels(self) -> int:
        return max(len(g) for g in self.grid)

    def with_scale(self, k: float) -> "LuminanceLUT":
        return LuminanceLUT(self.grid, self.values, k, self.provenance)

    def __call__(self, rgb) -> float:
        return query_luminosity(self, rgb)


def build_synthetic_lut(gamma: float = 2.2, max_lux: float = 100.0,
                        levels_per_channel: int = 11,
                        luma_weights: Sequence[float] = (0.2126, 0.7152, 0.0722),
                        k: float = 1.0) -> LuminanceLUT:
    """Display-model LUT: ``max_lux * sum_c w_c (c/100)**gamma`` on a uniform grid."""
    if not gamma > 0:
        raise InvalidParameter(f"gamma must be positive, got {gamma}")
    if not max_lux > 0:
        raise InvalidParameter(f"max_lux must be positive, got {max_lux}")
    if int(levels_per_channel) != levels_per_channel or levels_per_channel < 2:
        raise InvalidParameter("levels_per_channel must be an integer >= 2")
    w = np.asarray(luma_weights, dtype=float)
    if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
        raise InvalidParameter("luma_weights must be three nonnegative values summing to 1")
    levels = np.linspace(0.0, 100.0, int(levels_per_channel))
    t = (levels / 100.0) ** gamma
    values = max_lux * (w[0] * t[:, None, None] + w[1] * t[None, :, None]
                        + w[2] * t[None, None, :])
    return LuminanceLUT((levels, levels, levels), values, k, "synthetic")


def _bracket(grid: np.ndarray, x: float) -> int:
    i = int(np.searchsorted(grid, x, side="right")) - 1
    return min(max(i, 0), len(grid) - 2)


def _grid_index(grid: np.ndarray, x: float) -> Optional[int]:
    i = int(np.searchsorted(grid, x))
    for j in (i - 1, i):
        if 0 <= j < len(grid) and abs(grid[j] - x) < EXACT_TOL:
            return j
    return None


def _idw(points: np.ndarray, values: np.ndarray, x: np.ndarray) -> float:
    d = np.sqrt(((points - x) ** 2).sum(axis=1))
    hit = np.flatnonzero(d < EXACT_TOL)
    if hit.size:
        return float(values[hit[0]])
    w = 1.0 / d
    return float((w * values).sum() / w.sum())


def query_neighbors(lut: LuminanceLUT, rgb) -> tuple[np.ndarray, np.ndarray]:
    """Grid points and table values that contribute to a query at ``rgb``."""
    x = check_rgb(rgb)
    exact = [_grid_index(g, v) for g, v in zip(lut.grid, x)]
    if all(i is not None for i in exact):
        i, j, l = exact
        return x[None, :], np.array([lut.values[i, j, l]])
    zero = x == 0.0
    if zero.sum() == 2:
        axis = int(np.flatnonzero(~zero)[0])
        g = lut.grid[axis]
        lo = _bracket(g, x[axis])
        points = np.zeros((2, 3))
        points[:, axis] = g[lo:lo + 2]
        idx = [[0, 0], [0, 0], [0, 0]]
        idx[axis] = [lo, lo + 1]
        return points, lut.values[idx[0], idx[1], idx[2]]
    lo = [_bracket(g, v) for g, v in zip(lut.grid, x)]
    corners = np.array([(di, dj, dl) for di in (0, 1) for dj in (0, 1) for dl in (0, 1)])
    ii = lo[0] + corners[:, 0]
    jj = lo[1] + corners[:, 1]
    ll = lo[2] + corners[:, 2]
    points = np.column_stack([lut.grid[0][ii], lut.grid[1][jj], lut.grid[2][ll]])
    return points, lut.values[ii, jj, ll]


def query_luminosity(lut: LuminanceLUT, rgb) -> float:
    """Luminosity (lux) of a monochrome image with colour ``rgb``."""
    x = check_rgb(rgb)
    points, values = query_neighbors(lut, x)
    if len(values) == 1:
        return float(values[0]) * lut.k
    return _idw(points, values, x) * lut.k


def frame_mean_rgb(pixels) -> RgbPercent:
    """Per-channel mean of an ``(..., 3)`` pixel array."""
    px = np.asarray(pixels, dtype=float)
    if px.ndim < 1 or px.shape[-1] != 3:
        raise InvalidInput("pixels must have a trailing channel axis of length 3")
    px = px.reshape(-1, 3)
    if px.shape[0] == 0:
        raise InvalidInput("empty frame")
    return RgbPercent(*(float(v) for v in px.mean(axis=0)))


def _gaze_valid(gaze, shape) -> bool:
    if gaze is None:
        return False
    gx, gy = (float(v) for v in gaze)
    if not (np.isfinite(gx) and np.isfinite(gy)):
        return False
    h, w = shape[:2]
    return 0 <= gx < w and 0 <= gy < h


def region_mask(shape, gaze, radius_px: float) -> np.ndarray:
    """Boolean mask of pixels within ``radius_px`` of ``gaze = (x, y)``."""
    h, w = shape[:2]
    yy, xx = np.ogrid[:h, :w]
    return (xx - gaze[0]) ** 2 + (yy - gaze[1]) ** 2 <= radius_px ** 2


def effective_rgb(frame_pixels, gaze, lut: LuminanceLUT,
                  radius_px: int = 300) -> tuple[RgbPercent, float]:
    """Mean colour and luminosity the viewer is exposed to.

    The gaze region (a disc of ``radius_px`` around ``gaze``) replaces the
    whole-frame mean when its luminosity is larger. Invalid gaze (None, NaN or
    off-frame) falls back to the whole frame.
    """
    px = np.asarray(frame_pixels, dtype=float)
    if px.ndim != 3 or px.shape[2] != 3:
        raise InvalidInput("frame must be an (H, W, 3) array")
    mean_all = frame_mean_rgb(px)
    lum_all = query_luminosity(lut, mean_all)
    if not _gaze_valid(gaze, px.shape):
        return mean_all, lum_all
    mask = region_mask(px.shape, gaze, radius_px)
    mean_region = frame_mean_rgb(px[mask])
    lum_region = query_luminosity(lut, mean_region)
    if lum_region > lum_all:
        return mean_region, lum_region
    return mean_all, lum_all


def effective_luminance(frame_pixels, gaze, lut: LuminanceLUT, radius_px: int = 300) -> float:
    return effective_rgb(frame_pixels, gaze, lut, radius_px)[1]


@dataclass(frozen=True)
class FrameLuma:
    frame_index: int
    mean_rgb: RgbPercent
    luminosity: float


@dataclass
class _LutCache:
    """Memoises queries for a fixed LUT (frame colours repeat across participants)."""

    lut: LuminanceLUT
    memo: dict = field(default_factory=dict)

    def __call__(self, rgb) -> float:
        key = tuple(float(v) for v in rgb)
        if key not in self.memo:
            self.memo[key] = query_luminosity(self.lut, key)
        return self.memo[key]


def cached(lut: LuminanceLUT) -> _LutCache:
    return _LutCache(lut)


# --- file formats -----------------------------------------------------------

LUT_MAGIC = "pupilkit-lut"


def write_lut(lut: LuminanceLUT, path) -> Path:
    lines = [f"{LUT_MAGIC} v1 {lut.levels} {lut.k!r} {lut.provenance}"]
    g0, g1, g2 = lut.grid
    for i, r in enumerate(g0):
        for j, g in enumerate(g1):
            for l, b in enumerate(g2):
                lines.append(f"{float(r)!r} {float(g)!r} {float(b)!r} {float(lut.values[i, j, l])!r}")
    return tableio.write_text(path, "\n".join(lines) + "\n")


def read_lut(path) -> LuminanceLUT:
    """Load a LUT file (synthetic or measured)."""
    path = Path(path)
    if not path.exists():
        raise InvalidInput(f"LUT file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = tableio.strip_comments(fh)
    if not lines:
        raise InvalidInput(f"{path}: empty LUT file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != LUT_MAGIC or head[1] != "v1":
        raise InvalidInput(f"{path}: bad LUT header {lines[0].strip()!r}")
    k = float(head[3])
    provenance = head[4]
    rows = np.array([[float(t) for t in ln.split()] for ln in lines[1:]])
    if rows.ndim != 2 or rows.shape[1] != 4:
        raise InvalidInput(f"{path}: LUT rows must be 'r g b lux'")
    grid = tuple(np.unique(rows[:, c]) for c in range(3))
    shape = tuple(len(g) for g in grid)
    if rows.shape[0] != np.prod(shape):
        raise InvalidInput(f"{path}: LUT is not a complete grid ({rows.shape[0]} rows)")
    values = np.full(shape, np.nan)
    idx = [np.searchsorted(grid[c], rows[:, c]) for c in range(3)]
    values[idx[0], idx[1], idx[2]] = rows[:, 3]
    if np.isnan(values).any():
        raise InvalidInput(f"{path}: duplicate LUT triples")
    return LuminanceLUT(grid, values, k, provenance)


def read_frame_means(path) -> list[FrameLuma]:
    """Read a ``frame_index,r,g,b`` CSV (luminosity left unset as NaN)."""
    rows = tableio.read_csv(path, ["frame_index", "r", "g", "b"])
    out = []
    for row in rows:
        rgb = RgbPercent(*(float(row[c]) for c in "rgb"))
        check_rgb(rgb)
        out.append(FrameLuma(int(row["frame_index"]), rgb, float("nan")))
    return out


def write_frame_means(path, frames: Sequence[RgbPercent]) -> Path:
    return tableio.write_csv(path, ["frame_index", "r", "g", "b"],
                             ([i, float(c.r), float(c.g), float(c.b)] for i, c in enumerate(frames)))


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) or ASCII (P3) PPM image as an (H, W, 3) percent array."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P6":
        pos += 1
        dtype = ">u2" if maxval > 255 else "u1"
        arr = np.frombuffer(data, dtype=dtype, count=w * h * 3, offset=pos)
    elif magic == b"P3":
        body = [ln.split(b"#")[0] for ln in data[pos:].splitlines()]
        arr = np.array(b" ".join(body).split(), dtype=int)[: w * h * 3]
    else:
        raise InvalidInput(f"{path}: not a P3/P6 PPM file")
    if arr.size != w * h * 3:
        raise InvalidInput(f"{path}: truncated PPM data")
    return arr.reshape(h, w, 3).astype(float) * (100.0 / maxval)


def write_ppm(path, pixels_percent, maxval: int = 255, binary: bool = True) -> Path:
    px = np.asarray(pixels_percent, dtype=float)
    q = np.rint(np.clip(px, 0, 100) * maxval / 100.0).astype(int)
    h, w, _ = q.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if binary:
        dtype = ">u2" if maxval > 255 else "u1"
        path.write_bytes(f"P6\n{w} {h}\n{maxval}\n".encode() + q.astype(dtype).tobytes())
    else:
        body = "\n".join(" ".join(str(v) for v in row.reshape(-1)) for row in q)
        path.write_text(f"P3\n{w} {h}\n{maxval}\n{body}\n")
    return path
