"""PSD tracking, direct-signal PSD estimation and energy-based zone detection."""

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_nonnegative, check_spectrogram
from .stft import StftConfig, analyze, band_frequencies

EPSILON = 1e-12


def update_psd(psd, power, smoothing=0.8):
    """One exponential-smoothing step ``b * psd + (1 - b) * power``."""
    power = check_nonnegative(power, "power")
    return smoothing * np.asarray(psd) + (1.0 - smoothing) * power


def smooth_psd(power, smoothing=0.8):
    """Exponentially smoothed PSD along the last (frame) axis, starting from zero."""
    power = check_nonnegative(power, "power")
    return lfilter([1.0 - smoothing], [1.0, -smoothing], power, axis=-1)


class PsdTracker:
    """Streaming PSD estimates for a fixed set of channels and bands."""

    def __init__(self, shape, smoothing=0.8):
        if not 0.0 <= smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")
        self.smoothing = smoothing
        self.psd = np.zeros(shape)

    def update(self, power):
        self.psd = update_psd(self.psd, power, self.smoothing)
        return self.psd


def direct_psd(phi_y, phi_fb):
    """Feedback-free PSD by power subtraction, floored at zero."""
    return np.maximum(np.asarray(phi_y) - np.asarray(phi_fb), 0.0)


def speech_bands(cfg=StftConfig(), f_lo=100.0, f_hi=8000.0):
    """Indices of bands whose centre frequency lies strictly inside ``(f_lo, f_hi)``."""
    f = band_frequencies(cfg)
    bands = np.flatnonzero((f > f_lo) & (f < f_hi))
    if bands.size == 0:
        raise ValueError("speech band contains no STFT band")
    return bands


def spr(psds, epsilon=EPSILON):
    """Signal power ratio (dB) of each channel against the strongest other channel.

    ``psds`` has the channel axis first; the result has the same shape.
    """
    psds = np.asarray(psds, dtype=float)
    if psds.shape[0] < 2:
        raise ValueError("SPR needs at least two channels")
    # largest and second largest over channels give "max over the others" for every m
    order = np.sort(psds, axis=0)
    top, second = order[-1], order[-2]
    is_top = psds == top
    # with ties every tied channel's strongest competitor equals top
    n_top = np.sum(is_top, axis=0)
    others = np.where(is_top & (n_top == 1), second, top)
    # a difference of logs keeps SPR_0 = -SPR_1 exact for two channels
    return 10.0 * (np.log10(np.maximum(psds, epsilon)) - np.log10(np.maximum(others, epsilon)))


def broadband_spr(spr_maps, bands):
    """Mean SPR over the given band indices (band axis is second to last or last)."""
    spr_maps = np.asarray(spr_maps)
    axis = -2 if spr_maps.ndim >= 3 else -1
    return np.take(spr_maps, bands, axis=axis).mean(axis=axis)


def detect_zone(broadband):
    """Index of the largest broadband SPR along the first axis; ties go to the lowest index."""
    broadband = np.asarray(broadband, dtype=float)
    if not np.all(np.isfinite(broadband)):
        raise ValueError("broadband SPR values must be finite")
    return np.argmax(broadband, axis=0)


def zone_detection_rate(decisions, zone, active=None):
    """Share of (active) frames on which ``zone`` was detected."""
    decisions = np.asarray(decisions)
    if active is not None:
        decisions = decisions[np.asarray(active, dtype=bool)]
    if decisions.size == 0:
        raise ValueError("no frames to count")
    return float(np.mean(decisions == zone))


def speech_activity(direct_power, threshold_db=40.0):
    """Frames whose broadband power is within ``threshold_db`` of the loudest frame."""
    p = np.asarray(direct_power, dtype=float)
    return p > p.max() * 10.0 ** (-threshold_db / 10.0)


@dataclass
class CrossTermReport:
    ratio: np.ndarray          # (M, bands)
    condition_holds: bool
    lead_samples: np.ndarray   # ICC + shortest propagation delay per microphone


def cross_term_ratio(Yd, Yfb):
    """``|<Yd conj(Yfb)>| / sqrt(<|Yd|^2><|Yfb|^2>)`` per band, averaged over frames."""
    cross = np.abs(np.mean(Yd * np.conj(Yfb), axis=-1))
    norm = np.sqrt(np.mean(np.abs(Yd) ** 2, axis=-1) * np.mean(np.abs(Yfb) ** 2, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norm > 0, cross / np.where(norm > 0, norm, 1.0), 0.0)


def cross_term_diagnostic(sim, cfg=StftConfig(), lead_samples=None):
    """Normalized direct/feedback cross-correlation of every microphone, per band.

    ``lead_samples`` (ICC delay plus shortest loudspeaker delay per mic)
    decides whether the frame-size condition ``N < lead`` holds; it is
    reported alongside and does not affect the ratio.
    """
    Yd = np.stack([analyze(c, cfg) for c in sim.y_d])
    Yfb = np.stack([analyze(c, cfg) for c in sim.y_fb])
    ratio = cross_term_ratio(Yd, Yfb)
    if lead_samples is None:
        holds = None
        lead = None
    else:
        lead = np.atleast_1d(np.asarray(lead_samples))
        holds = bool(np.all(cfg.frame_size < lead))
    return CrossTermReport(ratio, holds, lead)


class ZoneDetector(BaseEstimator):
    """Energy-based speech zone detector on smoothed microphone PSDs.

    ``predict(Y, Y_fb)`` returns the detected zone per frame. With
    ``use_direct_psd`` and feedback estimates supplied, the smoothed feedback
    PSD is subtracted from each microphone PSD before the SPR is formed.

    Parameters
    ----------
    smoothing : float, default=0.8
        Exponential smoothing factor per frame.
    f_lo, f_hi : float
        Speech band edges in Hz (exclusive).
    epsilon : float, default=1e-12
    use_direct_psd : bool, default=True
    frame_size, hop, sample_rate
        STFT settings of the spectrograms passed in.
    """

    def __init__(self, smoothing=0.8, f_lo=100.0, f_hi=8000.0, epsilon=EPSILON,
                 use_direct_psd=True, frame_size=256, hop=128, sample_rate=24000.0):
        self.smoothing = smoothing
        self.f_lo = f_lo
        self.f_hi = f_hi
        self.epsilon = epsilon
        self.use_direct_psd = use_direct_psd
        self.frame_size = frame_size
        self.hop = hop
        self.sample_rate = sample_rate

    def fit(self, X=None, y=None):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.stft_ = StftConfig(self.frame_size, self.hop, self.sample_rate)
        self.bands_ = speech_bands(self.stft_, self.f_lo, self.f_hi)
        return self

    def psd(self, Y, Y_fb=None):
        """Smoothed PSDs used for the SPR, shape ``(M, bands, frames)``."""
        check_is_fitted(self, "bands_")
        Y = check_spectrogram(Y, n_bands=self.stft_.n_bands)
        phi = smooth_psd(np.abs(Y) ** 2, self.smoothing)
        if self.use_direct_psd and Y_fb is not None:
            Y_fb = check_spectrogram(Y_fb, n_bands=self.stft_.n_bands, name="feedback estimate")
            phi = direct_psd(phi, smooth_psd(np.abs(Y_fb) ** 2, self.smoothing))
        return phi

    def decision_function(self, Y, Y_fb=None):
        """Broadband SPR per microphone and frame, shape ``(M, frames)``."""
        return broadband_spr(spr(self.psd(Y, Y_fb), self.epsilon), self.bands_)

    def predict(self, Y, Y_fb=None):
        return detect_zone(self.decision_function(Y, Y_fb))
