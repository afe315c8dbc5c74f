"""Experiment configuration and the pipelines behind the CLI subcommands."""

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .acoustics import (
    CABIN_T60, Geometry, default_geometry, load_ir_wav, model_loudspeaker_irs, save_wav,
)
from .ctf import ctf_error_db, identify_ctf
from .estimator import FeedbackEstimator, build_model, cross_term_lead
from .loop import (
    IccConfig, Scene, build_scene, calibrate_forward_gain, calibrate_mismatch, simulate,
    stability_limit_db,
)
from .signals import speech_shaped_noise
from .stft import StftConfig, analyze
from .zones import (
    ZoneDetector, cross_term_diagnostic, speech_activity, speech_bands, zone_detection_rate,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

VARIANTS = ("unprocessed", "processed")
SWEEP_COLUMNS = ("alpha_db", "variant", "zone", "rate", "stable")
TRACE_COLUMNS = ("frame_time", "zone", "spr_db", "processing_enabled")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


class CalibrationError(RuntimeError):
    pass


@dataclass
class SceneSettings:
    kind: str = "image"                 # image | free | wav
    t60: float = CABIN_T60
    zone: int = 0
    mics: list = None
    loudspeakers: list = None
    zones: list = None
    direct_wavs: list = None            # one per mic, for kind = "wav"
    loudspeaker_wavs: list = None


@dataclass
class StftSettings:
    frame_size: int = 256
    hop: int = 128
    sample_rate: float = 24000.0


@dataclass
class IccSettings:
    alpha_db: list = field(default_factory=lambda: [float(a) for a in range(-10, 5)])
    tau_icc: float = 0.015
    unstable_above_db: float = 4.0
    unstable_below_db: float = 4.5
    forward_gain: float = None          # None: calibrate
    mismatch_sigma: float = None        # None: calibrate
    mismatch_seed: int = 4711
    canceller: str = "true"             # true: h_L,0 + mismatch; model: (1 - lam) * free-field h_L,0
    calibration: str = None             # path to a calibration.json


@dataclass
class EstimatorSettings:
    lam: float = 0.0
    delta: float = 0.2
    n_taps: int = None
    smoothing: float = 0.8
    energy_preserving: bool = True
    activity_gate_db: float = None      # None: count every frame


@dataclass
class SourceSettings:
    wav: str = None
    seed: int = 0
    duration: float = 8.0


@dataclass
class ExperimentConfig:
    scene: SceneSettings = field(default_factory=SceneSettings)
    stft: StftSettings = field(default_factory=StftSettings)
    icc: IccSettings = field(default_factory=IccSettings)
    estimator: EstimatorSettings = field(default_factory=EstimatorSettings)
    source: SourceSettings = field(default_factory=SourceSettings)
    snr_db: float = 20.0
    seed: int = 0
    out: str = "results"
    n_jobs: int = 1
    processing: bool = True             # False: skip the direct-PSD (feedback-corrected) path

    @property
    def stft_config(self):
        return StftConfig(self.stft.frame_size, self.stft.hop, self.stft.sample_rate)


def _parse_alpha(value, where):
    if isinstance(value, str):
        if value.strip().lower() in ("off", "-inf"):
            return -math.inf
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{where}: cannot read ICC gain {value!r}") from None
    if isinstance(value, (int, float)):
        return float(value)
    raise ConfigError(f"{where}: ICC gain must be a number or 'off'")


def _fill(obj, data, prefix):
    known = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        where = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"unknown field {where}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a table")
            _fill(current, value, where)
        else:
            setattr(obj, key, value)


def load_config(path=None, **overrides):
    """Defaults, then the TOML file, then non-None keyword overrides.

    Overrides use dotted names with ``__`` (``icc__alpha_db=[0.0]``) or plain
    top-level names (``seed=3``).
    """
    cfg = ExperimentConfig()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        _fill(cfg, data, "")
    for key, value in overrides.items():
        if value is None:
            continue
        *parents, name = key.split("__")
        target = cfg
        for p in parents:
            target = getattr(target, p)
        if not hasattr(target, name):
            raise ConfigError(f"unknown field {key.replace('__', '.')}")
        setattr(target, name, value)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    cfg.icc.alpha_db = [_parse_alpha(a, "icc.alpha_db")
                        for a in np.atleast_1d(np.asarray(cfg.icc.alpha_db, dtype=object))]
    if not cfg.icc.alpha_db:
        raise ConfigError("icc.alpha_db: empty gain grid")
    if any(math.isnan(a) or a == math.inf for a in cfg.icc.alpha_db):
        raise ConfigError("icc.alpha_db: gains must be finite or 'off'")
    if cfg.scene.kind not in ("image", "free", "wav"):
        raise ConfigError(f"scene.kind: expected image, free or wav, got {cfg.scene.kind!r}")
    if cfg.icc.canceller not in ("true", "model"):
        raise ConfigError("icc.canceller: expected 'true' or 'model'")
    if not 0.0 <= cfg.estimator.lam <= 1.0:
        raise ConfigError("estimator.lam must lie in [0, 1]")
    if cfg.estimator.delta <= 0:
        raise ConfigError("estimator.delta must be positive")
    if not 0.0 <= cfg.estimator.smoothing < 1.0:
        raise ConfigError("estimator.smoothing must lie in [0, 1)")
    try:
        cfg.stft_config
    except ValueError as exc:
        raise ConfigError(f"stft: {exc}") from None
    for name in ("wav", ):
        p = getattr(cfg.source, name)
        if p is not None and not os.path.exists(p):
            raise ConfigError(f"source.{name}: file {p!r} does not exist")
    if cfg.scene.kind == "wav":
        for name in ("direct_wavs", "loudspeaker_wavs"):
            paths = getattr(cfg.scene, name)
            if not paths:
                raise ConfigError(f"scene.{name}: required for scene.kind = 'wav'")
            for p in paths:
                if not os.path.exists(p):
                    raise ConfigError(f"scene.{name}: file {p!r} does not exist")
    if cfg.icc.calibration is not None and not os.path.exists(cfg.icc.calibration):
        raise ConfigError(f"icc.calibration: file {cfg.icc.calibration!r} does not exist")
    return cfg


def make_geometry(cfg):
    g = default_geometry()
    s = cfg.scene
    try:
        return Geometry(
            s.mics if s.mics is not None else g.mic_positions,
            s.loudspeakers if s.loudspeakers is not None else g.loudspeaker_positions,
            s.zones if s.zones is not None else g.zone_source_positions,
        )
    except ValueError as exc:
        raise ConfigError(f"scene: {exc}") from None


def make_scene(cfg, geometry=None):
    geometry = geometry if geometry is not None else make_geometry(cfg)
    fs = cfg.stft.sample_rate
    if cfg.scene.kind == "wav":
        direct = [load_ir_wav(p, fs) for p in cfg.scene.direct_wavs]
        loud = [load_ir_wav(p, fs) for p in cfg.scene.loudspeaker_wavs]
        if len(direct) != geometry.n_mics or len(loud) != geometry.n_mics:
            raise ConfigError("scene: need one direct and one loudspeaker WAV per microphone")
        return Scene(geometry, direct, loud, fs, cfg.scene.zone, "wav")
    return build_scene(geometry, cfg.scene.kind, cfg.scene.zone, fs, cfg.scene.t60)


def make_source(cfg):
    fs = cfg.stft.sample_rate
    if cfg.source.wav is not None:
        return load_ir_wav(cfg.source.wav, fs).taps
    return speech_shaped_noise(cfg.source.duration, fs, cfg.source.seed)


@dataclass
class Calibration:
    forward_gain: float
    mismatch_sigma: float
    stability_limit_db: float
    alpha_r_max: list = None            # per band; None entries are unbounded

    def to_json(self):
        return {
            "forward_gain": self.forward_gain,
            "mismatch_sigma": self.mismatch_sigma,
            "stability_limit_db": _json_float(self.stability_limit_db),
            "alpha_r_max": self.alpha_r_max,
        }


def _json_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


def icc_config(cfg, cal, alpha_db, geometry=None):
    canceller = None
    if cfg.icc.canceller == "model":
        geometry = geometry if geometry is not None else make_geometry(cfg)
        h_l0 = model_loudspeaker_irs(geometry, cfg.stft.sample_rate)[0]
        canceller = h_l0.scaled(1.0 - cfg.estimator.lam)
    return IccConfig(alpha_db=alpha_db, tau_icc=cfg.icc.tau_icc,
                     forward_gain=cal.forward_gain, canceller=canceller,
                     mismatch_sigma=cal.mismatch_sigma, mismatch_seed=cfg.icc.mismatch_seed)


def calibrate(cfg, scene=None, source=None):
    """Forward gain, mismatch level and the estimator's recursive stability table."""
    if cfg.icc.calibration is not None:
        with open(cfg.icc.calibration) as fh:
            data = json.load(fh)
        return Calibration(data["forward_gain"], data["mismatch_sigma"],
                           data.get("stability_limit_db") or math.inf, data.get("alpha_r_max"))
    scene = scene if scene is not None else make_scene(cfg)
    source = source if source is not None else make_source(cfg)
    base = IccConfig(tau_icc=cfg.icc.tau_icc, mismatch_seed=cfg.icc.mismatch_seed)
    try:
        gain = cfg.icc.forward_gain
        if gain is None:
            gain = calibrate_forward_gain(scene, base, source)
        base.forward_gain = gain
        sigma = cfg.icc.mismatch_sigma
        if sigma is None:
            sigma = 0.0 if cfg.icc.canceller == "model" else calibrate_mismatch(
                scene, base, cfg.icc.unstable_above_db, cfg.icc.unstable_below_db)
    except ValueError as exc:
        raise CalibrationError(str(exc)) from exc
    cal = Calibration(gain, sigma, math.inf)
    cal.stability_limit_db = stability_limit_db(scene, icc_config(cfg, cal, 0.0, scene.geometry))
    model = build_model(scene.geometry, cfg.stft_config, cfg.icc.tau_icc, 0.0,
                        cfg.estimator.lam, cfg.estimator.n_taps, cfg.estimator.delta,
                        gain, cfg.estimator.energy_preserving)
    table = [_json_float(a) for a in model.profile.alpha_max]
    cal.alpha_r_max = None if all(a is None for a in table) else table
    return cal


def estimator_for(cfg, cal, geometry, alpha_db):
    e = cfg.estimator
    est = FeedbackEstimator(geometry, alpha_db, cfg.icc.tau_icc, cal.forward_gain, e.lam,
                            e.delta, e.n_taps, cfg.stft.frame_size, cfg.stft.hop,
                            cfg.stft.sample_rate, e.energy_preserving)
    return est


def detector_for(cfg, processed):
    return ZoneDetector(cfg.estimator.smoothing, use_direct_psd=processed,
                        frame_size=cfg.stft.frame_size, hop=cfg.stft.hop,
                        sample_rate=cfg.stft.sample_rate).fit()


@dataclass
class PointResult:
    alpha_db: float
    stable: bool
    rates: dict                  # variant -> per-zone rates
    mean_spr: dict               # variant -> per-zone mean broadband SPR (dB)
    spr: dict                    # variant -> (M, frames) broadband SPR
    active: np.ndarray           # frames counted
    metadata: dict


def spectrograms(signals, stft):
    return np.stack([analyze(x, stft) for x in signals])


def variants(cfg):
    return VARIANTS if cfg.processing else VARIANTS[:1]


def run_point(cfg, scene, cal, source, alpha_db):
    """Simulate at one ICC gain and run detection on raw and feedback-corrected PSDs."""
    stft = cfg.stft_config
    icc = icc_config(cfg, cal, alpha_db, scene.geometry)
    sim = simulate(scene, icc, source, cfg.snr_db, cfg.seed)
    Y = spectrograms(sim.y, stft)
    Y_fb = None
    if cfg.processing:
        Y_fb = estimator_for(cfg, cal, scene.geometry, alpha_db).fit().transform(Y[0])
    if cfg.estimator.activity_gate_db is None:
        active = np.ones(Y.shape[-1], dtype=bool)
    else:
        active = reference_activity(sim, stft, cfg.estimator.activity_gate_db)
    rates, mean_spr, spr_maps = {}, {}, {}
    for variant in variants(cfg):
        det = detector_for(cfg, variant == "processed")
        bb = det.decision_function(Y, Y_fb if variant == "processed" else None)
        zones = np.argmax(bb, axis=0)
        rates[variant] = [zone_detection_rate(zones, z, active) for z in range(Y.shape[0])]
        mean_spr[variant] = bb[:, active].mean(axis=1).tolist()
        spr_maps[variant] = bb
    return PointResult(alpha_db, bool(sim.metadata["stable"]), rates, mean_spr, spr_maps,
                       active, sim.metadata)


def reference_activity(sim, stft, threshold_db=40.0):
    """Frames where the reference direct-signal power is within ``threshold_db`` of its peak."""
    Yd0 = analyze(sim.y_d[0], stft)
    bands = speech_bands(stft)
    return speech_activity(np.sum(np.abs(Yd0[bands]) ** 2, axis=0), threshold_db)


@dataclass
class SweepResult:
    points: list

    def rows(self):
        for p in sorted(self.points, key=lambda p: p.alpha_db):
            for variant in VARIANTS:
                for zone, rate in enumerate(p.rates.get(variant, ())):
                    yield (p.alpha_db, variant, zone, rate, p.stable)

    def rate(self, variant, zone=0):
        """``(alpha_db, rate)`` pairs sorted by gain."""
        pts = sorted(self.points, key=lambda p: p.alpha_db)
        return [(p.alpha_db, p.rates[variant][zone]) for p in pts]


def alpha_at_rate(pairs, threshold=0.9):
    """Largest gain whose rate still reaches ``threshold`` (``None`` if none does)."""
    ok = [a for a, r in pairs if r >= threshold]
    return max(ok) if ok else None


def _fmt(x):
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        if x == -math.inf:
            return "off"
        return repr(round(x, 12))
    return str(x)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float):
        if obj == -math.inf:
            return "off"
        return _json_float(obj)
    return obj


# ---------------------------------------------------------------- commands

def cmd_calibrate(cfg):
    cal = calibrate(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    _write_json(os.path.join(cfg.out, "calibration.json"), _clean(cal.to_json()))
    return cal


def cmd_simulate(cfg, alpha_db=None):
    alpha_db = cfg.icc.alpha_db[0] if alpha_db is None else alpha_db
    scene = make_scene(cfg)
    source = make_source(cfg)
    cal = calibrate(cfg, scene, source)
    sim = simulate(scene, icc_config(cfg, cal, alpha_db, scene.geometry), source,
                   cfg.snr_db, cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    fs = sim.sample_rate
    for name in ("y", "y_d", "y_fb", "v"):
        save_wav(os.path.join(cfg.out, f"{name}.wav"), getattr(sim, name), fs)
    save_wav(os.path.join(cfg.out, "u.wav"), sim.u, fs)
    meta = dict(sim.metadata)
    meta["calibration"] = cal.to_json()
    _write_json(os.path.join(cfg.out, "metadata.json"), _clean(meta))
    return sim


def cmd_sweep(cfg):
    scene = make_scene(cfg)
    source = make_source(cfg)
    cal = calibrate(cfg, scene, source)

    def one(alpha):
        try:
            return run_point(cfg, scene, cal, source, alpha)
        except (ValueError, FloatingPointError) as exc:
            log.warning("sweep point alpha=%s dB failed: %s", alpha, exc)
            m = scene.n_mics
            nan = [math.nan] * m
            return PointResult(alpha, False, {v: nan for v in variants(cfg)},
                               {v: nan for v in variants(cfg)}, {}, None, {"error": str(exc)})

    if cfg.n_jobs == 1:
        points = [one(a) for a in cfg.icc.alpha_db]
    else:
        from joblib import Parallel, delayed
        points = Parallel(n_jobs=cfg.n_jobs)(delayed(one)(a) for a in cfg.icc.alpha_db)
    result = SweepResult(points)
    os.makedirs(cfg.out, exist_ok=True)
    write_csv(os.path.join(cfg.out, "sweep.csv"), SWEEP_COLUMNS, result.rows())
    summary = {
        "calibration": cal.to_json(),
        "points": [
            {"alpha_db": p.alpha_db, "stable": p.stable, "rates": p.rates, "mean_spr_db": p.mean_spr}
            for p in sorted(points, key=lambda p: p.alpha_db)
        ],
    }
    _write_json(os.path.join(cfg.out, "sweep_summary.json"), _clean(summary))
    return result


@dataclass
class SprTrace:
    frame_time: np.ndarray
    spr: np.ndarray              # (M, frames), switched at the midpoint
    processing: np.ndarray       # bool per frame
    active: np.ndarray
    point: PointResult


def cmd_spr_trace(cfg, alpha_db=None, min_duration=8.0):
    alpha_db = cfg.icc.alpha_db[0] if alpha_db is None else alpha_db
    scene = make_scene(cfg)
    source = make_source(cfg)
    if source.size < min_duration * cfg.stft.sample_rate:
        raise ValueError(f"source too short: spr-trace needs at least {min_duration:g} s")
    cal = calibrate(cfg, scene, source)
    point = run_point(cfg, scene, cal, source, alpha_db)
    raw = point.spr["unprocessed"]
    proc = point.spr.get("processed", raw)
    n_frames = raw.shape[1]
    processing = (np.arange(n_frames) >= n_frames // 2) & cfg.processing
    spr = np.where(processing, proc, raw)
    # frame l ends at sample (l + 1) * R
    t = (np.arange(n_frames) + 1) * cfg.stft.hop / cfg.stft.sample_rate
    sim_active = point.active
    if cfg.estimator.activity_gate_db is None:
        sim_active = reference_activity(simulate_reference(cfg, scene, source), cfg.stft_config)
    os.makedirs(cfg.out, exist_ok=True)
    rows = ((t[l], z, spr[z, l], bool(processing[l]))
            for l in range(n_frames) for z in range(spr.shape[0]))
    write_csv(os.path.join(cfg.out, "spr_trace.csv"), TRACE_COLUMNS, rows)
    return SprTrace(t, spr, processing, sim_active, point)


def simulate_reference(cfg, scene, source):
    """ICC-off run; only its direct components are used (for activity gating)."""
    return simulate(scene, IccConfig(alpha_db=-math.inf, tau_icc=cfg.icc.tau_icc), source,
                    None, cfg.seed)


def cmd_ctf_check(cfg, n_filters=20, max_taps_frames=12, seed=None, duration=2.0):
    """CTF filtering vs time-domain filtering for random white filters."""
    stft = cfg.stft_config
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    rows = []
    for i in range(n_filters):
        length = int(rng.integers(stft.hop, max_taps_frames * stft.hop + 1))
        h = rng.standard_normal(length)
        ctf = identify_ctf(h, stft)
        err = ctf_error_db(h, stft, n_samples=int(duration * stft.sample_rate),
                           seed=int(rng.integers(2 ** 31)), ctf=ctf)
        rows.append((i, length, err))
    os.makedirs(cfg.out, exist_ok=True)
    write_csv(os.path.join(cfg.out, "ctf_check.csv"), ("filter", "length", "error_db"), rows)
    return rows


def cross_term_check(cfg, alpha_db=0.0, source=None, scene=None):
    """Cross-term report for the configured scene, driven by white noise by default."""
    scene = scene if scene is not None else make_scene(cfg)
    if source is None:
        source = np.random.default_rng(cfg.source.seed).standard_normal(
            int(cfg.source.duration * cfg.stft.sample_rate))
    cal = calibrate(cfg, scene, source)
    sim = simulate(scene, icc_config(cfg, cal, alpha_db, scene.geometry), source,
                   cfg.snr_db, cfg.seed)
    lead = cross_term_lead(scene.geometry, cfg.icc.tau_icc, cfg.stft.sample_rate)
    return cross_term_diagnostic(sim, cfg.stft_config, lead), sim
