"""Time-domain simulation of the closed ICC loop.

The talker signal reaches every microphone through ``h_d,m``; the ICC
amplifies the reference microphone ``y_0`` after subtracting its feedback
canceller output, delays it by ``tau_icc`` and plays it over all
loudspeakers, which feed back into every microphone through ``h_L,m``::

    u(n)    = a * [y_0 - g * u](n - d),    a = forward_gain * 10^(alpha_db / 20)
    y_fb,m  = h_L,m * u
    y_m     = y_d,m + y_fb,m + v_m

Since ``y_0 - g * u = y_d,0 + v_0 + (h_L,0 - g) * u`` only the canceller
mismatch ``h_L,0 - g`` closes a loop, which is evaluated block-recursively
with blocks no longer than the loop delay.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.signal import fftconvolve

from .acoustics import (
    CABIN_T60, ImpulseResponse, free_field_ir, image_source_ir, sum_loudspeaker_ir,
)
from ._validation import check_signal

MISMATCH_SEED = 4711
DIVERGENCE_FACTOR = 1e6


@dataclass
class Scene:
    """True acoustic paths for one active talker zone.

    ``h_direct[m]`` runs from the talker to microphone ``m``;
    ``h_loudspeaker[m]`` is the sum over loudspeakers into microphone ``m``.
    """

    geometry: object
    h_direct: list
    h_loudspeaker: list
    sample_rate: float
    zone: int = 0
    kind: str = "image"

    def __post_init__(self):
        rates = {ir.sample_rate for ir in self.h_direct + self.h_loudspeaker}
        if rates != {self.sample_rate}:
            raise ValueError("all impulse responses must share the scene sample rate")
        if len(self.h_direct) != len(self.h_loudspeaker):
            raise ValueError("need one direct and one loudspeaker response per microphone")

    @property
    def n_mics(self):
        return len(self.h_direct)


def build_scene(geometry, kind="image", zone=0, sample_rate=24000.0, t60=CABIN_T60):
    """Scene from geometry with free-field (``"free"``) or image-source paths."""
    c = geometry.speed_of_sound
    src = geometry.zone_source_positions[zone]
    if kind == "free":
        direct = [free_field_ir(d, 1.0, sample_rate, c) for d in geometry.source_distances(zone)]
        dist = geometry.distances()
        loud = [
            sum_loudspeaker_ir(
                free_field_ir(dist[i, m], geometry.beta[i, m], sample_rate, c)
                for i in range(geometry.n_loudspeakers))
            for m in range(geometry.n_mics)
        ]
    elif kind == "image":
        direct = [image_source_ir(geometry.room_dims, src, mic, t60, sample_rate, c=c)
                  for mic in geometry.mic_positions]
        loud = [
            sum_loudspeaker_ir(
                image_source_ir(geometry.room_dims, spk, mic, t60, sample_rate, c=c)
                .scaled(geometry.beta[i, m])
                for i, spk in enumerate(geometry.loudspeaker_positions))
            for m, mic in enumerate(geometry.mic_positions)
        ]
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    return Scene(geometry, direct, loud, sample_rate, zone, kind)


@dataclass
class IccConfig:
    """ICC forward path and feedback canceller.

    ``canceller`` defaults to the true ``h_L,0`` (perfect cancellation). A
    white mismatch ``Delta h = h_L,0 - g`` of standard deviation
    ``mismatch_sigma`` is subtracted from it on the support of ``h_L,0``
    (from its first non-zero tap to its end).
    ``alpha_db = -inf`` switches the ICC off.
    """

    alpha_db: float = 0.0
    tau_icc: float = 0.015
    forward_gain: float = 1.0
    canceller: ImpulseResponse = None
    mismatch_sigma: float = 0.0
    mismatch_seed: int = MISMATCH_SEED

    @property
    def alpha_lin(self):
        return 0.0 if self.alpha_db == -math.inf else 10.0 ** (self.alpha_db / 20.0)

    def delay_samples(self, sample_rate):
        return int(round(self.tau_icc * sample_rate))


def mismatch_pattern(h_l0, seed=MISMATCH_SEED):
    """Unit-variance white noise on the support of ``h_l0``."""
    taps = np.asarray(getattr(h_l0, "taps", h_l0))
    first = int(np.flatnonzero(taps)[0]) if np.any(taps) else 0
    pattern = np.zeros(taps.size)
    pattern[first:] = np.random.default_rng(seed).standard_normal(taps.size - first)
    return pattern


def canceller_taps(scene, icc):
    h_l0 = scene.h_loudspeaker[0].taps
    base = h_l0 if icc.canceller is None else icc.canceller.taps
    n = max(base.size, h_l0.size)
    g = np.zeros(n)
    g[:base.size] += base
    if icc.mismatch_sigma:
        g[:h_l0.size] -= icc.mismatch_sigma * mismatch_pattern(h_l0, icc.mismatch_seed)
    return g


def loop_mismatch(scene, icc):
    """``h_L,0 - g``: the only path that recirculates the loudspeaker signal."""
    g = canceller_taps(scene, icc)
    h_l0 = scene.h_loudspeaker[0].taps
    delta = -g
    delta[:h_l0.size] += h_l0
    delta[np.abs(delta) < 1e-15 * max(1.0, np.max(np.abs(h_l0)))] = 0.0
    return delta


def loop_stability_border(delta, delay, n_fft=None):
    """Largest loop amplitude ``a`` keeping ``1 - a * Delta(z) z^-delay`` stable.

    Poles start at the origin for ``a = 0`` and can only leave the unit disc
    where ``a * Delta(e^jw) e^-jwd = 1``, i.e. at frequencies where the loop
    response is real and positive. The first such crossing gives the border.
    Returns ``inf`` without a recirculating path.
    """
    delta = np.asarray(delta, dtype=float)
    if not np.any(delta):
        return math.inf
    if n_fft is None:
        n_fft = 2 ** int(math.ceil(math.log2(16 * (delta.size + delay))))
    resp = np.fft.rfft(delta, n_fft) * np.exp(-2j * np.pi * np.arange(n_fft // 2 + 1) * delay / n_fft)
    re, im = resp.real, resp.imag
    crossings = []
    # exact real points at DC and Nyquist
    for idx in (0, resp.size - 1):
        if re[idx] > 0:
            crossings.append(re[idx])
    s = np.flatnonzero(np.sign(im[:-1]) != np.sign(im[1:]))
    if s.size:
        t = im[s] / (im[s] - im[s + 1])
        re_x = re[s] + t * (re[s + 1] - re[s])
        keep = re_x > 0
        s, re_x = s[keep], re_x[keep]
    if s.size:
        crossings.extend(re_x)
        # grid interpolation is only approximate; refine the candidates near the top
        lags = np.arange(delta.size) + delay
        nz = delta != 0
        lags, coef = lags[nz], delta[nz]

        def response(w):
            return np.sum(coef * np.exp(-1j * w * lags))

        step = 2 * np.pi / n_fft
        top = re_x >= 0.9 * max(crossings)
        crossings = crossings[:len(crossings) - re_x.size] + list(re_x[~top])
        for i in s[top]:
            w = brentq(lambda w: response(w).imag, i * step, (i + 1) * step, xtol=1e-14)
            crossings.append(response(w).real)
    if not crossings:
        return math.inf
    return 1.0 / max(crossings)


@dataclass
class SimOutput:
    y: np.ndarray
    y_d: np.ndarray
    y_fb: np.ndarray
    v: np.ndarray
    u: np.ndarray
    source: np.ndarray
    sample_rate: float
    metadata: dict = field(default_factory=dict)


def _run_loop(drive, delta, gain, delay, blow_up):
    """Evaluate ``u(n) = gain * (drive + delta * u)(n - delay)``."""
    n = drive.size
    u = np.zeros(n)
    if gain == 0.0:
        return u, n
    nz = np.flatnonzero(delta)
    if nz.size == 0:
        u[delay:] = gain * drive[:n - delay]
        return u, n
    j0, j1 = int(nz[0]), int(nz[-1])
    taps = delta[j0:j1 + 1]
    block = delay + j0
    if block < 1:
        raise ValueError("zero loop delay: the ICC loop cannot be evaluated sample-recursively")
    # e(m) = drive(m) + sum_j delta(j) u(m - j), needed for m in [n0 - delay, n0 - delay + block)
    for n0 in range(delay, n, block):
        n1 = min(n0 + block, n)
        m0, m1 = n0 - delay, n1 - delay
        lo = m0 - j1
        seg = u[max(lo, 0):m1 - j0]
        if lo < 0:
            seg = np.concatenate([np.zeros(-lo), seg])
        fb = np.convolve(seg, taps, mode="valid")
        u[n0:n1] = gain * (drive[m0:m1] + fb[:m1 - m0])
        if np.max(np.abs(u[n0:n1])) > blow_up:
            return u, n1
    return u, n


def simulate(scene, icc, source, snr_db=20.0, seed=0):
    """Simulate all microphone components for a talker in ``scene.zone``.

    ``snr_db`` sets white-noise power relative to the direct component at the
    reference microphone; ``None`` disables noise. Divergence is reported in
    ``metadata`` and never raised.
    """
    s = check_signal(source, "source")
    fs = scene.sample_rate
    n = s.size
    m_count = scene.n_mics
    y_d = np.stack([fftconvolve(s, h.taps)[:n] for h in scene.h_direct])
    rng = np.random.default_rng(seed)
    if snr_db is None:
        v = np.zeros_like(y_d)
    else:
        p_ref = np.mean(y_d[0] ** 2)
        sigma = math.sqrt(p_ref / 10.0 ** (snr_db / 10.0))
        v = sigma * rng.standard_normal(y_d.shape)

    delay = icc.delay_samples(fs)
    delta = loop_mismatch(scene, icc)
    nz = np.flatnonzero(delta)
    if nz.size and delay + nz[0] < 1:
        raise ValueError("zero loop delay: the ICC loop cannot be evaluated sample-recursively")
    gain = icc.forward_gain * icc.alpha_lin
    peak = float(np.max(np.abs(s))) or 1.0
    u, n_done = _run_loop(y_d[0] + v[0], delta, gain, delay, 1e150 * peak)
    diverged = bool(np.max(np.abs(u)) > DIVERGENCE_FACTOR * peak)
    y_fb = np.stack([fftconvolve(u, h.taps)[:n] for h in scene.h_loudspeaker])
    y = y_d + y_fb + v

    border = loop_stability_border(delta, delay)
    margin_db = math.inf if gain == 0 or math.isinf(border) else 20 * math.log10(border / gain)
    metadata = {
        "alpha_db": icc.alpha_db,
        "forward_gain": icc.forward_gain,
        "mismatch_sigma": icc.mismatch_sigma,
        "tau_icc": icc.tau_icc,
        "snr_db": snr_db,
        "seed": seed,
        "diverged": diverged,
        "samples_evaluated": int(n_done),
        "loop_gain_margin_db": margin_db,
        "stable": (not diverged) and margin_db > 0,
        "rms": {
            "y_d": [float(np.sqrt(np.mean(c ** 2))) for c in y_d],
            "y_fb": [float(np.sqrt(np.mean(c ** 2))) for c in y_fb],
            "u": float(np.sqrt(np.mean(u ** 2))),
        },
        "n_mics": m_count,
    }
    return SimOutput(y, y_d, y_fb, v, u, s, fs, metadata)


def _rms(x):
    return float(np.sqrt(np.mean(np.asarray(x) ** 2)))


def calibrate_forward_gain(scene, icc, probe, rear=(2, 3), co_driver=1):
    """Fixed ICC gain giving equal feedback RMS at the rear mics and direct RMS at the co-driver.

    One open-loop pass at ``alpha = 0 dB`` with a perfect canceller: the
    feedback then scales linearly with the forward gain.
    """
    probe = check_signal(probe, "probe")
    if not np.any(probe):
        raise ValueError("calibration probe is silent")
    unit = IccConfig(alpha_db=0.0, tau_icc=icc.tau_icc, forward_gain=1.0)
    out = simulate(scene, unit, probe, snr_db=None)
    fb = np.mean([_rms(out.y_fb[m]) for m in rear])
    if fb == 0:
        raise ValueError("no feedback reaches the rear microphones")
    return _rms(out.y_d[co_driver]) / fb


def calibrate_mismatch(scene, icc, unstable_above_db=4.0, unstable_below_db=4.5):
    """Mismatch level placing the loop's stability limit inside ``(above, below]`` dB.

    The border scales as ``1 / sigma`` for a fixed mismatch pattern, so sigma
    follows in closed form from the border of the unit pattern, aimed at the
    middle of the bracket.
    """
    h_l0 = scene.h_loudspeaker[0].taps
    pattern = mismatch_pattern(h_l0, icc.mismatch_seed)
    delay = icc.delay_samples(scene.sample_rate)
    unit_border = loop_stability_border(pattern, delay)
    target_db = 0.5 * (unstable_above_db + unstable_below_db)
    sigma = unit_border / (icc.forward_gain * 10.0 ** (target_db / 20.0))
    if icc.canceller is not None:
        raise ValueError("mismatch calibration expects the true h_L,0 as canceller baseline")
    if not 0 < sigma <= np.linalg.norm(h_l0):
        raise ValueError(f"unreachable instability target: sigma={sigma:.3g}")
    return sigma


def stability_limit_db(scene, icc):
    """ICC gain in dB at which the simulated loop becomes unstable."""
    border = loop_stability_border(loop_mismatch(scene, icc), icc.delay_samples(scene.sample_rate))
    if math.isinf(border):
        return math.inf
    return 20 * math.log10(border / icc.forward_gain)
