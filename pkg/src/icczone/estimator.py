"""Model-based estimation of ICC feedback from the reference microphone.

Per band ``k`` and microphone ``m`` the estimator runs

    Yfb_m(k, l) = alpha(k) * (Hf_m * Y_0)(k, l) - alpha_r(k) * (Hr * Yfb_m)(k, l)

where ``*`` is convolution over frames, ``Hf_m`` is the strictly causal CTF
of ``h_icc * h_L,m`` and ``Hr`` that of ``h_icc * g_L,0``. ``h_L,m`` comes from
a free-field model of the loudspeaker-microphone distances and
``g_L,0 = (1 - lam) * h_L,0``. The recursive gain is clipped below the
stability border of ``Hr`` so the recursion cannot blow up.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_spectrogram
from .acoustics import ImpulseResponse, model_loudspeaker_irs
from .ctf import (
    Ctf, StabilityProfile, convolve_time, default_n_taps, identify_ctf, max_stable_gain,
)
from .stft import StftConfig


def limit_gain(alpha, alpha_max, delta=0.2):
    """``min(alpha, alpha_max - delta)`` per band, floored at zero."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    alpha = np.asarray(alpha, dtype=float)
    alpha_max = getattr(alpha_max, "alpha_max", alpha_max)
    return np.maximum(np.minimum(alpha, np.asarray(alpha_max, dtype=float) - delta), 0.0)


def icc_path(tau_icc, forward_gain, sample_rate):
    """``h_icc``: the ICC processing delay with its fixed gain."""
    d = int(round(tau_icc * sample_rate))
    taps = np.zeros(d + 1)
    taps[d] = forward_gain
    return ImpulseResponse(taps, sample_rate)


def cross_term_lead(geometry, tau_icc, sample_rate):
    """Per microphone, the shortest loudspeaker-to-mic delay plus the ICC delay (samples)."""
    return int(round(tau_icc * sample_rate)) + geometry.propagation_delays(sample_rate).min(axis=0)


@dataclass(frozen=True)
class EstimatorModel:
    ctf_f: Ctf                 # stacked feed-forward CTFs, coeffs (M, bands, taps)
    ctf_r: Ctf
    alpha: np.ndarray
    alpha_r: np.ndarray
    profile: StabilityProfile
    delta: float
    lam: float
    h_f: list
    h_r: ImpulseResponse

    @property
    def n_mics(self):
        return self.ctf_f.coeffs.shape[0]

    @property
    def n_bands(self):
        return self.ctf_r.n_bands


def build_model(geometry, stft=StftConfig(), tau_icc=0.015, alpha_db=0.0, lam=0.0,
                n_taps=None, delta=0.2, forward_gain=1.0, energy_preserving=True):
    """Assemble the feed-forward/recursive CTFs and the limited recursive gain."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    fs = stft.sample_rate
    lead = cross_term_lead(geometry, tau_icc, fs)
    if np.any(stft.frame_size >= lead):
        warnings.warn(
            f"cross-term condition violated: frame size {stft.frame_size} >= "
            f"ICC + propagation delay {int(lead.min())} samples",
            stacklevel=2,
        )
    h_icc = icc_path(tau_icc, forward_gain, fs)
    h_l = model_loudspeaker_irs(geometry, fs)
    g_l0 = h_l[0].scaled(1.0 - lam)
    h_f = [convolve_time(h_icc, h) for h in h_l]
    h_r = convolve_time(h_icc, g_l0)
    if n_taps is None:
        n_taps = default_n_taps(max(len(h) for h in h_f), stft)
    ctfs = [identify_ctf(h, stft, n_taps, strictly_causal=True,
                         energy_preserving=energy_preserving) for h in h_f]
    ctf_f = _StackedCtf(np.stack([c.coeffs for c in ctfs]), 1)
    if np.any(h_r.taps):
        ctf_r = identify_ctf(h_r, stft, n_taps, strictly_causal=True,
                             energy_preserving=energy_preserving)
    else:
        ctf_r = Ctf(np.zeros((stft.n_bands, n_taps)), 1)
    profile = max_stable_gain(ctf_r)
    alpha = np.broadcast_to(_db_to_lin(alpha_db), (stft.n_bands,)).astype(float)
    alpha_r = limit_gain(alpha, profile.alpha_max, delta)
    return EstimatorModel(ctf_f, ctf_r, alpha, alpha_r, profile, delta, lam, h_f, h_r)


def _db_to_lin(alpha_db):
    a = np.asarray(alpha_db, dtype=float)
    return np.where(np.isneginf(a), 0.0, 10.0 ** (a / 20.0))


class _StackedCtf:
    """Feed-forward CTFs of all microphones sharing one lag range."""

    def __init__(self, coeffs, lag_start):
        self.coeffs = np.asarray(coeffs, dtype=np.complex128)
        self.lag_start = lag_start

    @property
    def n_taps(self):
        return self.coeffs.shape[-1]

    @property
    def max_lag(self):
        return self.lag_start + self.n_taps - 1

    def channel(self, m):
        return Ctf(self.coeffs[m], self.lag_start)


class EstimatorState:
    """Streaming memory: past reference frames and past feedback estimates.

    Row ``j`` of each buffer holds the frame ``j + 1`` steps in the past.
    """

    def __init__(self, model):
        n_bands = model.n_bands
        self.y0_past = np.zeros((model.ctf_f.max_lag, n_bands), dtype=np.complex128)
        self.fb_past = np.zeros((model.ctf_r.max_lag, model.n_mics, n_bands),
                                dtype=np.complex128)


def estimate_feedback(model, state, y0_frame):
    """Feedback estimate of every microphone for one new reference frame.

    Only frames strictly before ``y0_frame`` enter either convolution; the
    new frame is pushed into ``state`` afterwards.
    """
    y0_frame = np.asarray(y0_frame, dtype=np.complex128)
    if y0_frame.shape != (model.n_bands,):
        raise ValueError(f"band mismatch: frame has {y0_frame.shape} bands, expected {model.n_bands}")
    f = model.ctf_f
    hist = state.y0_past[f.lag_start - 1:f.max_lag]                 # (taps, bands)
    ff = np.einsum("mkt,tk->mk", f.coeffs, hist)
    r = model.ctf_r
    fb_hist = state.fb_past[r.lag_start - 1:r.max_lag]              # (taps, M, bands)
    rec = np.einsum("kt,tmk->mk", r.coeffs, fb_hist)
    out = model.alpha * ff - model.alpha_r * rec
    if state.y0_past.shape[0]:
        state.y0_past = np.roll(state.y0_past, 1, axis=0)
        state.y0_past[0] = y0_frame
    if state.fb_past.shape[0]:
        state.fb_past = np.roll(state.fb_past, 1, axis=0)
        state.fb_past[0] = out
    return out


class FeedbackEstimator(BaseEstimator, TransformerMixin):
    """Estimate per-microphone feedback spectra from the reference spectrogram.

    ``fit`` builds the CTF model from the geometry and ICC parameters (no data
    needed); ``transform`` maps a reference spectrogram ``Y_0`` of shape
    ``(bands, frames)`` to feedback estimates of shape ``(M, bands, frames)``.

    Parameters
    ----------
    geometry : Geometry
        Loudspeaker and microphone positions for the free-field model.
    alpha_db : float or array of shape (bands,), default=0.0
        ICC gain in dB as reported by the ICC system.
    tau_icc : float, default=0.015
        ICC processing delay in seconds.
    forward_gain : float, default=1.0
        Fixed linear gain of the ICC forward path.
    lam : float, default=0.0
        Mismatch factor; 0 models perfect, 1 no feedback cancellation.
    delta : float, default=0.2
        Safety margin below the recursion's stability border.
    n_taps : int, optional
        CTF length; derived from the longest modelled path when omitted.
    frame_size, hop, sample_rate
        STFT settings, must match the spectrograms passed to ``transform``.
    energy_preserving : bool, default=True
        Rescale CTF bands to preserve output power (see ``identify_ctf``).
    """

    def __init__(self, geometry=None, alpha_db=0.0, tau_icc=0.015, forward_gain=1.0,
                 lam=0.0, delta=0.2, n_taps=None, frame_size=256, hop=128,
                 sample_rate=24000.0, energy_preserving=True):
        self.geometry = geometry
        self.alpha_db = alpha_db
        self.tau_icc = tau_icc
        self.forward_gain = forward_gain
        self.lam = lam
        self.delta = delta
        self.n_taps = n_taps
        self.frame_size = frame_size
        self.hop = hop
        self.sample_rate = sample_rate
        self.energy_preserving = energy_preserving

    def fit(self, X=None, y=None):
        if self.geometry is None:
            raise ValueError("FeedbackEstimator needs a geometry")
        self.stft_ = StftConfig(self.frame_size, self.hop, self.sample_rate)
        self.model_ = build_model(self.geometry, self.stft_, self.tau_icc, self.alpha_db,
                                  self.lam, self.n_taps, self.delta, self.forward_gain,
                                  self.energy_preserving)
        self.alpha_r_ = self.model_.alpha_r
        self.alpha_r_max_ = self.model_.profile.alpha_max
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        Y0 = check_spectrogram(X, n_bands=self.stft_.n_bands, name="reference spectrogram")
        if Y0.ndim != 2:
            raise ValueError("expected the reference spectrogram as (bands, frames)")
        state = EstimatorState(self.model_)
        out = np.empty((self.model_.n_mics,) + Y0.shape, dtype=np.complex128)
        for l in range(Y0.shape[1]):
            out[:, :, l] = estimate_feedback(self.model_, state, Y0[:, l])
        return out

    def first_feedforward_lag(self):
        """Smallest frame lag with a non-negligible feed-forward coefficient."""
        check_is_fitted(self, "model_")
        mag = np.abs(self.model_.ctf_f.coeffs).max(axis=(0, 1))
        return self.model_.ctf_f.lag_start + int(np.flatnonzero(mag > 1e-6 * mag.max())[0])


def stability_table(model):
    """Per-band recursive gain border as plain floats (``inf`` when unbounded)."""
    return [float(a) if math.isfinite(a) else math.inf for a in model.profile.alpha_max]
