"""STFT analysis and overlap-add synthesis.

Frames are periodic-Hann windowed and transformed with an unscaled one-sided
DFT (``numpy.fft.rfft``), so for every frame

    (|X[0]|^2 + 2 * sum(|X[1:N/2]|^2) + |X[N/2]|^2) / N == sum((w * x_frame)^2)

Synthesis applies the same window again and divides by the per-sample sum of
squared shifted windows, which gives perfect reconstruction for any hop that
divides the frame size.

Padding policy: ``N - R`` zeros are prepended, so frame ``l`` covers the
original samples ``[l*R - (N - R), l*R + R)``; the tail is zero-padded until
the last original sample lies in a full overlap region. A delay of ``d``
samples therefore maps to a frame lag of about ``d / R``.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_signal, check_spectrogram


@dataclass(frozen=True)
class StftConfig:
    frame_size: int = 256
    hop: int = 128
    sample_rate: float = 24000.0
    window: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.frame_size < 2 or self.frame_size % 2:
            raise ValueError("frame_size must be an even integer >= 2")
        if self.hop < 1 or self.frame_size % self.hop:
            raise ValueError("hop must divide frame_size")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.window is None:
            object.__setattr__(self, "window", hann(self.frame_size))
        else:
            w = np.asarray(self.window, dtype=np.float64)
            if w.shape != (self.frame_size,):
                raise ValueError("window length must equal frame_size")
            object.__setattr__(self, "window", w)

    @property
    def n_bands(self):
        return self.frame_size // 2 + 1

    @property
    def pad(self):
        return self.frame_size - self.hop

    def n_frames(self, n_samples):
        """Number of frames ``analyze`` produces for ``n_samples`` input samples."""
        tail = -n_samples % self.hop
        return (n_samples + tail) // self.hop + self.pad // self.hop


def hann(n):
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def band_frequencies(cfg):
    """Centre frequency in Hz of every one-sided band."""
    return np.arange(cfg.n_bands) * cfg.sample_rate / cfg.frame_size


def analyze(signal, cfg=StftConfig()):
    """Complex spectrogram of shape ``(n_bands, n_frames)``.

    Raises ``ValueError("signal too short ...")`` when the signal is shorter
    than one frame.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1 and x.size < cfg.frame_size:
        raise ValueError(f"signal too short: {x.size} < {cfg.frame_size} samples")
    x = check_signal(x, min_length=cfg.frame_size)
    n_frames = cfg.n_frames(x.size)
    padded = np.zeros((n_frames - 1) * cfg.hop + cfg.frame_size)
    padded[cfg.pad:cfg.pad + x.size] = x
    idx = np.arange(cfg.frame_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * cfg.window
    return np.fft.rfft(frames, axis=1).T


def synthesize(spec, cfg=StftConfig(), length=None):
    """Weighted overlap-add inverse of :func:`analyze`.

    ``length`` trims the result to the original signal length; without it all
    samples spanned by the frames (minus the leading pad) are returned.
    """
    spec = check_spectrogram(spec, n_bands=cfg.n_bands)
    if spec.ndim != 2:
        raise ValueError("synthesize expects a single-channel (bands, frames) array")
    n_frames = spec.shape[1]
    frames = np.fft.irfft(spec.T, n=cfg.frame_size, axis=1) * cfg.window
    total = (n_frames - 1) * cfg.hop + cfg.frame_size
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = cfg.window ** 2
    for l in range(n_frames):
        sl = slice(l * cfg.hop, l * cfg.hop + cfg.frame_size)
        out[sl] += frames[l]
        norm[sl] += w2
    # Only the edges of the padded buffer can see a vanishing window sum.
    nz = norm > 1e-12
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    out = out[cfg.pad:]
    if length is not None:
        out = out[:length]
    return out


class STFT(BaseEstimator, TransformerMixin):
    """Transformer wrapper: ``transform`` analyzes, ``inverse_transform`` resynthesizes.

    Parameters
    ----------
    frame_size : int, default=256
    hop : int, default=128
    sample_rate : float, default=24000
    """

    def __init__(self, frame_size=256, hop=128, sample_rate=24000.0):
        self.frame_size = frame_size
        self.hop = hop
        self.sample_rate = sample_rate

    def fit(self, X=None, y=None):
        self.config_ = StftConfig(self.frame_size, self.hop, self.sample_rate)
        self.n_bands_ = self.config_.n_bands
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            return analyze(X, self.config_)
        return np.stack([analyze(x, self.config_) for x in X])

    def inverse_transform(self, X, length=None):
        check_is_fitted(self, "config_")
        X = np.asarray(X)
        if X.ndim == 2:
            return synthesize(X, self.config_, length)
        return np.stack([synthesize(x, self.config_, length) for x in X])
