"""Command line: one subcommand per pipeline stage.

Every subcommand reads an INI run configuration (``[paths]``, ``[options]``,
``[grid]``, ``[lut]``, ``[synth]``), writes deterministic files under the
output directory and a JSON manifest in ``manifests/``. Errors print one line
``error: kind=<kind> exit=<code> message=<text>`` and exit 2 (config), 3 (data)
or 4 (numerical); files written by the failed subcommand are removed.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import os
import platform
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, tableio
from .adm import StudyDataset, fit_adm, lopo_evaluate, write_dataset
from .decouple import read_salient, write_decomposition
from .errors import ConfigError, MissingData, PupilkitError
from .gbt import (HyperGrid, feature_columns, nested_lopo, params_string,
                  read_features, select_params, train_gbt, write_features)
from .gbt import write_model as write_gbt_model
from .luminance import build_synthetic_lut, read_frame_means, read_lut, read_ppm, write_lut
from .metrics import REPORT_COLUMNS, report_rows, write_report
from .pipeline import Options, build_dataset, calibrate_all, decouple_all, ratings_labels
from .plr import read_calibration, read_model, write_model
from .preprocess import read_frame_times, read_raw_trace
from .scaling import labels as scaled_labels, read_labels, read_ratings, write_labels
from .synth import SynthConfig, generate_study, write_study

OUTPUT_ENV = "PUPILKIT_OUTPUT_DIR"
SIGNALS = ("corrected", "uncorrected")
PATH_KEYS = ("lut", "calibration", "traces", "frames", "frame_times", "ratings", "labels",
             "salient", "output")


@dataclass
class RunConfig:
    base_dir: Path
    paths: dict
    options: Options = Options()
    grid: HyperGrid = HyperGrid()
    n_folds: int = 5
    lut_params: dict = field(default_factory=lambda: {"gamma": 2.2, "max_lux": 100.0,
                                                      "levels": 11, "k": 1.0})
    synth: dict = field(default_factory=dict)
    config_hash: str = ""

    @property
    def seed(self) -> int:
        return self.options.seed

    @property
    def output(self) -> Path:
        return self.paths["output"]

    def path(self, key: str, must_exist: bool = True) -> Path:
        p = self.paths.get(key)
        if p is None:
            raise ConfigError(f"[paths] {key} is not set")
        if must_exist and not p.exists():
            raise MissingData(f"[paths] {key} does not exist: {p}")
        return p


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def load_config(path=None, env=None, overrides: Optional[dict] = None) -> RunConfig:
    """Parse and validate a run configuration file.

    Relative paths resolve against the config file's directory. The output
    directory may be overridden with ``PUPILKIT_OUTPUT_DIR``.
    """
    env = os.environ if env is None else env
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
        base = path.resolve().parent
    for section, values in (overrides or {}).items():
        if not cp.has_section(section):
            cp.add_section(section)
        for k, v in values.items():
            cp.set(section, k, str(v))
    allowed = {"paths": set(PATH_KEYS),
               "options": {f.name for f in dataclasses.fields(Options)} | {"n_folds"},
               "grid": {f.name for f in dataclasses.fields(HyperGrid)},
               "lut": {"gamma", "max_lux", "levels", "k"},
               "synth": {f.name for f in dataclasses.fields(SynthConfig)}}
    for section in cp.sections():
        if section not in allowed:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(cp[section]) - allowed[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")

    canon = {s: dict(sorted(cp[s].items())) for s in sorted(cp.sections())}
    canon.get("paths", {}).pop("output", None)
    digest = hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()[:16]

    paths = {k: None for k in PATH_KEYS}
    if cp.has_section("paths"):
        for k, v in cp["paths"].items():
            paths[k] = (base / v.strip()) if v.strip() else None
    out = env.get(OUTPUT_ENV)
    if out:
        paths["output"] = Path(out)
    if paths["output"] is None:
        paths["output"] = base / "out"

    try:
        o = cp["options"] if cp.has_section("options") else {}
        opts = Options(
            pad_ms=float(o.get("pad_ms", Options.pad_ms)),
            gaze_radius=int(o.get("gaze_radius", Options.gaze_radius)),
            fit_scope=o.get("fit_scope", Options.fit_scope).strip(),
            label_source=o.get("label_source", Options.label_source).strip(),
            label_scope=o.get("label_scope", Options.label_scope).strip(),
            feature_set=o.get("feature_set", Options.feature_set).strip(),
            seed=int(o.get("seed", Options.seed)))
        n_folds = int(o.get("n_folds", 5))
        g = cp["grid"] if cp.has_section("grid") else {}
        d = HyperGrid()
        grid = HyperGrid(
            _floats(g["learning_rate"]) if "learning_rate" in g else d.learning_rate,
            _ints(g["max_depth"]) if "max_depth" in g else d.max_depth,
            _ints(g["n_trees"]) if "n_trees" in g else d.n_trees,
            _floats(g["lambda_l2"]) if "lambda_l2" in g else d.lambda_l2,
            _ints(g["min_samples_leaf"]) if "min_samples_leaf" in g else d.min_samples_leaf)
        lp = {"gamma": 2.2, "max_lux": 100.0, "levels": 11, "k": 1.0}
        if cp.has_section("lut"):
            for k, v in cp["lut"].items():
                lp[k] = int(v) if k == "levels" else float(v)
        synth = dict(cp["synth"]) if cp.has_section("synth") else {}
    except ValueError as exc:
        raise ConfigError(f"bad option value: {exc}") from None
    if opts.fit_scope not in ("clip", "participant"):
        raise ConfigError(f"fit_scope must be clip or participant, got {opts.fit_scope!r}")
    if opts.label_source not in ("indscal", "file"):
        raise ConfigError(f"label_source must be indscal or file, got {opts.label_source!r}")
    if opts.label_scope not in ("shared", "participant"):
        raise ConfigError(f"label_scope must be shared or participant, got {opts.label_scope!r}")
    if opts.label_scope == "participant" and opts.label_source != "indscal":
        raise ConfigError("per-participant labels need label_source = indscal")
    if opts.feature_set not in ("strict", "lenient"):
        raise ConfigError(f"feature_set must be strict or lenient, got {opts.feature_set!r}")
    if opts.pad_ms < 0 or opts.gaze_radius <= 0 or n_folds < 2:
        raise ConfigError("pad_ms >= 0, gaze_radius > 0 and n_folds >= 2 are required")
    grid.points()
    return RunConfig(base, paths, opts, grid, n_folds, lp, synth, digest)


# --- input discovery ------------------------------------------------------------

def _csv_stems(directory: Path) -> dict[str, Path]:
    if directory.is_file():
        return {directory.stem: directory}
    return {p.stem: p for p in sorted(directory.glob("*.csv"))}


def _load_frames(directory: Path) -> dict:
    """Frame-mean CSVs (``<clip>.csv``) or PPM folders (``<clip>/*.ppm``)."""
    frames = {c: read_frame_means(p) for c, p in _csv_stems(directory).items()}
    for sub in sorted(p for p in directory.iterdir() if p.is_dir()):
        ppms = sorted(sub.glob("*.ppm"))
        if ppms and sub.name not in frames:
            frames[sub.name] = [read_ppm(p) for p in ppms]
    if not frames:
        raise MissingData(f"no frame files under {directory}")
    return frames


def _load_traces(directory: Path) -> dict:
    traces = {}
    for pdir in sorted(p for p in directory.iterdir() if p.is_dir()):
        for clip, path in _csv_stems(pdir).items():
            traces[(pdir.name, clip)] = read_raw_trace(path)
    if not traces:
        raise MissingData(f"no traces under {directory}")
    return traces


def _load_models(directory: Path) -> dict:
    models = {p.stem: read_model(p) for p in sorted(directory.glob("*.txt"))}
    if not models:
        raise MissingData(f"no calibrated models in {directory}; run calibrate first")
    return models


LABEL_COLUMNS = ["participant_id", "clip_id", "valence", "arousal"]


def _clip_labels(cfg: RunConfig) -> dict:
    """``(participant, clip) -> (valence, arousal)``; participant ``None`` for shared labels."""
    if cfg.options.label_source == "file":
        return {(None, c): v for c, v in read_labels(cfg.path("labels")).items()}
    if cfg.options.label_scope == "participant":
        path = cfg.output / "labels_by_participant.csv"
        if not path.exists():
            raise MissingData(f"{path} not found; run the labels subcommand first")
        return {(r["participant_id"], r["clip_id"]): (float(r["valence"]), float(r["arousal"]))
                for r in tableio.read_csv(path, LABEL_COLUMNS)}
    path = cfg.output / "labels.csv"
    if not path.exists():
        raise MissingData(f"{path} not found; run the labels subcommand first")
    return {(None, c): v for c, v in read_labels(path).items()}


def _read_summaries(path: Path):
    rows = tableio.read_csv(path, ["participant_id", "clip_id", "ps_arousal_mm", "ps_measured_mm"])
    return {(r["participant_id"], r["clip_id"]): (float(r["ps_arousal_mm"]),
                                                  float(r["ps_measured_mm"])) for r in rows}


def _dataset(cfg: RunConfig, with_features: bool) -> StudyDataset:
    summ_path = cfg.output / "summaries.csv"
    if not summ_path.exists():
        raise MissingData(f"{summ_path} not found; run decouple first")
    summaries = _read_summaries(summ_path)
    labels = _clip_labels(cfg)
    feats = read_features(cfg.output / "features.csv") if with_features else None
    keys = sorted(summaries)
    per_part = cfg.options.label_scope == "participant"
    lab = {k: labels.get(k if per_part else (None, k[1])) for k in keys}
    missing = sorted({k if per_part else k[1] for k, v in lab.items() if v is None})
    if missing:
        raise MissingData(f"no labels for {missing[:5]}")
    cols = [[k[0] for k in keys], [k[1] for k in keys],
            [summaries[k][0] for k in keys], [summaries[k][1] for k in keys],
            [lab[k][1] for k in keys], [lab[k][0] for k in keys]]
    F = None
    if with_features:
        absent = [k for k in keys if k not in feats]
        if absent:
            raise MissingData(f"no features for {absent[:3]}")
        F = np.array([feats[k] for k in keys])
    return StudyDataset(*cols, label_source=cfg.options.label_source, features=F)


# --- subcommands ------------------------------------------------------------------

def cmd_build_lut(cfg: RunConfig, jobs: int) -> list:
    lp = cfg.lut_params
    lut = build_synthetic_lut(lp["gamma"], lp["max_lux"], int(lp["levels"]), k=lp["k"])
    write_lut(lut, cfg.output / "lut.txt")
    return []


def cmd_calibrate(cfg: RunConfig, jobs: int) -> list:
    lut = read_lut(cfg.path("lut"))
    files = _csv_stems(cfg.path("calibration"))
    if not files:
        raise MissingData(f"no calibration CSVs in {cfg.path('calibration')}")
    models = calibrate_all({pid: read_calibration(p) for pid, p in files.items()}, lut)
    rows = []
    for pid, m in models.items():
        write_model(m, cfg.output / "models" / f"{pid}.txt")
        for ch in ("gray", "red", "green", "blue"):
            c = m.channel(ch)
            rows.append([pid, ch, c.a, c.b, c.c, c.d])
    tableio.write_csv(cfg.output / "calibration_coefficients.csv",
                      ["participant_id", "channel", "a", "b", "c", "d"], rows)
    return ["lut", "calibration"]


def cmd_decouple(cfg: RunConfig, jobs: int) -> list:
    lut = read_lut(cfg.path("lut"))
    models = _load_models(cfg.output / "models")
    traces = _load_traces(cfg.path("traces"))
    frames = _load_frames(cfg.path("frames"))
    times = {c: read_frame_times(p) for c, p in _csv_stems(cfg.path("frame_times")).items()}
    salient = read_salient(cfg.path("salient"))
    decomps = decouple_all(models, lut, traces, frames, times, cfg.options, jobs)
    rows = []
    for (pid, clip), dec in sorted(decomps.items()):
        write_decomposition(cfg.output / "decomposition" / pid / f"{clip}.csv", dec)
        w = dec.weights
        rows.append([pid, clip, w.a_gray, w.a_red, w.a_green, w.a_blue, w.K, w.C,
                     int(w.degenerate)])
    tableio.write_csv(cfg.output / "combined_weights.csv",
                      ["participant_id", "clip_id", "a_gray", "a_red", "a_green", "a_blue",
                       "K", "C", "degenerate"], rows)
    # labels are not needed for summaries; fill with zeros and drop them on write
    dummy = {c: (0.0, 0.0) for _, c in decomps}
    ds = build_dataset(decomps, salient, times, dummy)
    tableio.write_csv(cfg.output / "summaries.csv",
                      ["participant_id", "clip_id", "ps_arousal_mm", "ps_measured_mm"],
                      zip(ds.participant, ds.clip, ds.ps_arousal, ds.ps_measured))
    write_features(cfg.output / "features.csv", ds)
    return ["lut", "traces", "frames", "frame_times", "salient"]


def cmd_labels(cfg: RunConfig, jobs: int) -> list:
    ratings = read_ratings(cfg.path("ratings"))
    space, lab = ratings_labels(ratings, cfg.seed)
    write_labels(cfg.output / "labels.csv", ratings.clips, lab)
    individual = scaled_labels(space, per_participant=True)
    tableio.write_csv(cfg.output / "labels_by_participant.csv", LABEL_COLUMNS,
                      ([p, c, float(v), float(a)] for p, ind in zip(ratings.participants, individual)
                       for c, (v, a) in zip(ratings.clips, ind)))
    tableio.write_csv(cfg.output / "indscal_weights.csv", ["participant_id", "w_valence", "w_arousal"],
                      ([p, float(w[0]), float(w[1])] for p, w in zip(ratings.participants, space.weights)))
    tableio.write_csv(cfg.output / "indscal_loss.csv", ["iteration", "loss"],
                      enumerate(float(v) for v in space.loss_history))
    return ["ratings"]


def _strip_rows(rows):
    return [{k: (v.tolist() if hasattr(v, "tolist") else v) for k, v in f.items()} for f in rows]


def cmd_fit_adm(cfg: RunConfig, jobs: int) -> list:
    ds = _dataset(cfg, with_features=False)
    write_dataset(cfg.output / "dataset.csv", ds)
    report, preds, coef, folds, final = [], [], [], {}, []
    for signal in SIGNALS:
        res = lopo_evaluate(ds, signal)
        report += report_rows(signal, res.per_participant, res.aggregate)
        preds += [[signal, *row] for row in res.predictions]
        coef += [[signal, pid, c.a, c.b, c.fit_r2] for pid, c in res.coefficients.items()]
        folds[signal] = {"folds": _strip_rows(res.folds), "flagged": res.flagged}
        c = fit_adm(ds.signal(signal), ds.arousal)
        final.append([signal, c.a, c.b, c.fit_r2])
    write_report(cfg.output / "adm_report.csv", report)
    tableio.write_csv(cfg.output / "adm_predictions.csv",
                      ["signal", "participant_id", "clip_id", "predicted", "actual"], preds)
    tableio.write_csv(cfg.output / "adm_fold_coefficients.csv",
                      ["signal", "held_out", "a", "b", "fit_r2"], coef)
    tableio.write_csv(cfg.output / "adm_model.csv", ["signal", "a", "b", "fit_r2"], final)
    _write_folds(cfg, "adm_folds.json", folds)
    return _stage_inputs(cfg, "summaries.csv")


def cmd_fit_gbt(cfg: RunConfig, jobs: int) -> list:
    ds = _dataset(cfg, with_features=True)
    report, preds, chosen, folds = [], [], [], {}
    for signal in SIGNALS:
        res = nested_lopo(ds, "arousal", signal, cfg.grid, cfg.seed, cfg.n_folds,
                          cfg.options.feature_set, jobs)
        report += report_rows(signal, res.per_participant, res.aggregate)
        preds += [[signal, *row] for row in res.predictions]
        chosen += [[signal, pid, params_string(p)] for pid, p in res.chosen.items()]
        folds[signal] = {"folds": res.folds, "flagged": res.flagged}
        cols = list(feature_columns(signal, cfg.options.feature_set))
        X = ds.features[:, cols]
        best, _, _ = select_params(X, ds.arousal, ds.participant, cfg.grid, cfg.n_folds, cfg.seed)
        write_gbt_model(cfg.output / "models" / f"gbt_{signal}.txt", train_gbt(X, ds.arousal, best))
        chosen.append([signal, "all", params_string(best)])
    write_report(cfg.output / "gbt_report.csv", report)
    tableio.write_csv(cfg.output / "gbt_predictions.csv",
                      ["signal", "participant_id", "clip_id", "predicted", "actual"], preds)
    tableio.write_csv(cfg.output / "gbt_params.csv", ["signal", "held_out", "params"], chosen)
    _write_folds(cfg, "gbt_folds.json", folds)
    return _stage_inputs(cfg, "summaries.csv", "features.csv")


def _stage_inputs(cfg: RunConfig, *names) -> list:
    keys = [cfg.output / n for n in names]
    if cfg.options.label_source == "file":
        keys.append("labels")
    elif cfg.options.label_scope == "participant":
        keys.append(cfg.output / "labels_by_participant.csv")
    else:
        keys.append(cfg.output / "labels.csv")
    return keys


def _read_report(path: Path) -> dict:
    rows = tableio.read_csv(path, REPORT_COLUMNS)
    return {(r["scope"], r["participant_id"]): r for r in rows}


# Directional checks on the synthetic study.
MIN_CORRECTED_R = 0.85
MIN_GAP = 0.25


def cmd_evaluate(cfg: RunConfig, jobs: int) -> list:
    adm_path = cfg.output / "adm_report.csv"
    if not adm_path.exists():
        raise MissingData(f"{adm_path} not found; run fit-adm first")
    adm = _read_report(adm_path)
    rc = float(adm[("corrected", "mean")]["r"])
    ru = float(adm[("uncorrected", "mean")]["r"])
    r2c = float(adm[("corrected", "mean")]["r2"])
    rows = [["adm_corrected_r", rc, MIN_CORRECTED_R, int(rc >= MIN_CORRECTED_R)],
            ["adm_uncorrected_r", ru, rc - MIN_GAP, int(ru <= rc - MIN_GAP)]]
    gbt_path = cfg.output / "gbt_report.csv"
    if gbt_path.exists():
        g2 = float(_read_report(gbt_path)[("corrected", "mean")]["r2"])
        rows.append(["gbt_corrected_r2", g2, r2c, int(g2 >= r2c)])
    tableio.write_csv(cfg.output / "acceptance_metrics.csv", ["metric", "value", "threshold", "passed"],
                      rows)
    return []


def cmd_report(cfg: RunConfig, jobs: int) -> list:
    pva, fold = [], []
    found = False
    for model in ("adm", "gbt"):
        p = cfg.output / f"{model}_predictions.csv"
        if p.exists():
            found = True
            for r in tableio.read_csv(p, ["signal", "participant_id", "clip_id", "predicted", "actual"]):
                pva.append([model, r["signal"], r["participant_id"], r["clip_id"],
                            float(r["predicted"]), float(r["actual"])])
        rp = cfg.output / f"{model}_report.csv"
        if rp.exists():
            for (scope, pid), r in _read_report(rp).items():
                for metric in ("r", "p", "r2", "nrmse"):
                    fold.append([model, scope, pid, metric, float(r[metric])])
    if not found:
        raise MissingData("no prediction files found; run fit-adm or fit-gbt first")
    tableio.write_csv(cfg.output / "report" / "predicted_vs_actual.csv",
                      ["model", "signal", "participant_id", "clip_id", "predicted", "actual"], pva)
    tableio.write_csv(cfg.output / "report" / "fold_metrics.csv",
                      ["model", "signal", "participant_id", "metric", "value"], fold)
    return []


def _synth_config(cfg: RunConfig, args) -> SynthConfig:
    kw = {}
    fields = {f.name: f for f in dataclasses.fields(SynthConfig)}
    for k, v in cfg.synth.items():
        default = getattr(SynthConfig, k)
        try:
            if isinstance(default, tuple):
                kw[k] = _floats(v)
            elif isinstance(default, int):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        except ValueError:
            raise ConfigError(f"[synth] {k}: bad value {v!r}") from None
    for name, attr in (("seed", "seed"), ("confound", "confound"), ("gain", "arousal_gain"),
                       ("noise", "noise_sigma"), ("nonlinearity", "nonlinearity"),
                       ("participants", "n_participants"), ("clips", "n_clips"),
                       ("frames", "frames_per_clip")):
        v = getattr(args, name, None)
        if v is not None and attr in fields:
            kw[attr] = v
    try:
        return SynthConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


PIPELINE_INI = """[paths]
lut = lut.txt
calibration = calibration
traces = traces
frames = frames
frame_times = frame_times
ratings = ratings.csv
salient = salient.csv
output = out

[options]
seed = {seed}
"""


def cmd_synth(cfg: RunConfig, jobs: int, args=None) -> list:
    sc = _synth_config(cfg, args)
    study = generate_study(sc)
    write_study(study, cfg.output)
    tableio.write_text(cfg.output / "pipeline.ini", PIPELINE_INI.format(seed=sc.seed))
    tableio.write_json(cfg.output / "synth_config.json", dataclasses.asdict(sc))
    return []


COMMANDS = {
    "build-lut": cmd_build_lut,
    "calibrate": cmd_calibrate,
    "decouple": cmd_decouple,
    "labels": cmd_labels,
    "fit-adm": cmd_fit_adm,
    "fit-gbt": cmd_fit_gbt,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "synth": cmd_synth,
}


# --- manifests ----------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(path: Path) -> dict:
    if path.is_file():
        return {path.name: _sha256(path)}
    return {str(p.relative_to(path)): _sha256(p) for p in sorted(path.rglob("*")) if p.is_file()}


def _rel(path: Path, root: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(path)


def _write_folds(cfg: RunConfig, name: str, folds: dict) -> None:
    tableio.write_json(cfg.output / name, {"config_hash": cfg.config_hash, "seed": cfg.seed,
                                           "signals": folds})


def _versions() -> dict:
    import numba
    import scipy
    return {"pupilkit": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def write_manifest(cfg: RunConfig, name: str, input_keys: list, outputs: list) -> Path:
    inputs = {}
    for key in input_keys:
        if isinstance(key, Path):
            if key.exists():
                inputs[_rel(key, cfg.output)] = _hash_tree(key)
        elif key and cfg.paths.get(key) is not None and cfg.paths[key].exists():
            inputs[key] = _hash_tree(cfg.paths[key])
    out = {_rel(p, cfg.output): _sha256(p) for p in sorted(set(outputs))}
    return tableio.write_json(cfg.output / "manifests" / f"{name}.json", {
        "subcommand": name, "config_hash": cfg.config_hash, "seed": cfg.seed,
        "versions": _versions(), "inputs": inputs, "outputs": out})


# --- entry point ----------------------------------------------------------------------

def _cleanup(paths: list, root: Path) -> None:
    dirs = set()
    for p in paths:
        try:
            p.unlink()
        except FileNotFoundError:
            pass
        dirs.update(q for q in p.parents if root.resolve() in q.resolve().parents)
    for d in sorted(dirs, key=lambda q: len(q.parts), reverse=True):
        try:
            d.rmdir()
        except OSError:
            pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pupilkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pupilkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="run configuration (INI)")
        p.add_argument("--out", help="output directory (overrides [paths] output)")
        p.add_argument("--jobs", "-j", type=int, default=None,
                       help="parallel workers (default: all cores)")
        if name == "synth":
            p.add_argument("--seed", type=int)
            p.add_argument("--confound", type=float)
            p.add_argument("--gain", type=float)
            p.add_argument("--noise", type=float)
            p.add_argument("--nonlinearity", type=float)
            p.add_argument("--participants", type=int)
            p.add_argument("--clips", type=int)
            p.add_argument("--frames", type=int)
    return parser


def run_subcommand(name: str, cfg: RunConfig, jobs: int = 1, args=None) -> int:
    """Run one subcommand; returns the exit status (0 on success)."""
    seed = cfg.seed
    if name == "synth":
        sc = _synth_config(cfg, args)
        seed = sc.seed
        cfg = dataclasses.replace(cfg, config_hash=hashlib.sha256(
            json.dumps(dataclasses.asdict(sc), sort_keys=True).encode()).hexdigest()[:16])
    tableio.set_output_header([f"pupilkit {__version__} {name}",
                               f"config_hash={cfg.config_hash} seed={seed}"])
    tableio.reset_written()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if name == "synth":
                inputs = cmd_synth(cfg, jobs, args)
            else:
                inputs = COMMANDS[name](cfg, jobs)
        written = tableio.written_paths()
        if name == "synth":
            cfg = dataclasses.replace(cfg, options=dataclasses.replace(cfg.options, seed=seed))
        write_manifest(cfg, name, inputs, written)
    except PupilkitError as exc:
        _cleanup(tableio.written_paths(), cfg.output)
        msg = " ".join(str(exc).split())
        print(f"error: kind={exc.kind} exit={exc.exit_code} message={msg}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, KeyError) as exc:
        # malformed files surface as plain parsing errors
        _cleanup(tableio.written_paths(), cfg.output)
        kind = "io-error" if isinstance(exc, OSError) else "invalid-input"
        msg = " ".join(str(exc).split())
        print(f"error: kind={kind} exit=3 message={msg}", file=sys.stderr)
        return 3
    finally:
        tableio.set_output_header([])
        tableio.reset_written()
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg.paths["output"] = Path(args.out)
    except PupilkitError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: kind={exc.kind} exit={exc.exit_code} message={msg}", file=sys.stderr)
        return exc.exit_code
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    if jobs < 1:
        print("error: kind=config-error exit=2 message=--jobs must be >= 1", file=sys.stderr)
        return 2
    return run_subcommand(args.command, cfg, jobs, args)


if __name__ == "__main__":
    sys.exit(main())
