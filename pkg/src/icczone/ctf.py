"""Band-to-band convolutive transfer functions (CTFs).

A CTF holds, per STFT band ``k``, complex coefficients for frame lags
``lag_start, lag_start + 1, ..., lag_start + n_taps - 1`` and filters a
spectrogram by convolution over frames within each band. Crossband terms are
not modelled.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from ._validation import check_spectrogram
from .acoustics import ImpulseResponse
from .stft import StftConfig, analyze

#: alpha_r,max reported for bands without any recursive path.
UNBOUNDED = math.inf

PROBE_SEED = 20220523
PROBE_FRAMES = 200


@dataclass(frozen=True)
class Ctf:
    coeffs: np.ndarray
    lag_start: int = 0

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coeffs, dtype=np.complex128))
        if c.shape[1] < 1:
            raise ValueError("a CTF needs at least one tap")
        if not np.all(np.isfinite(c)):
            raise ValueError("CTF coefficients must be finite")
        if self.lag_start < 0:
            raise ValueError("lag_start must be >= 0")
        object.__setattr__(self, "coeffs", c)

    @property
    def n_bands(self):
        return self.coeffs.shape[0]

    @property
    def n_taps(self):
        return self.coeffs.shape[1]

    @property
    def max_lag(self):
        return self.lag_start + self.n_taps - 1

    @property
    def strictly_causal(self):
        return self.lag_start >= 1

    def scaled(self, gain):
        """Copy with coefficients multiplied by ``gain`` (scalar or per band)."""
        gain = np.asarray(gain)
        if gain.ndim == 1:
            gain = gain[:, None]
        return Ctf(self.coeffs * gain, self.lag_start)

    @classmethod
    def identity(cls, n_bands):
        return cls(np.ones((n_bands, 1)), 0)


def convolve_time(h1, h2):
    """Full discrete convolution of two impulse responses."""
    fs = getattr(h1, "sample_rate", None) or getattr(h2, "sample_rate", None)
    a = np.asarray(getattr(h1, "taps", h1), dtype=np.float64)
    b = np.asarray(getattr(h2, "taps", h2), dtype=np.float64)
    taps = np.convolve(a, b)
    if fs is None:
        return taps
    return ImpulseResponse(taps, fs)


def default_n_taps(ir_length, cfg):
    return math.ceil((ir_length + cfg.frame_size) / cfg.hop)


def _lagged(spec, lag_start, n_taps):
    """Stack of frame-delayed copies, shape ``(n_taps, ..., bands, frames)``."""
    n_frames = spec.shape[-1]
    out = np.zeros((n_taps,) + spec.shape, dtype=np.complex128)
    for t in range(n_taps):
        lag = lag_start + t
        if lag < n_frames:
            out[t, ..., lag:] = spec[..., :n_frames - lag]
    return out


def support_lags(taps, cfg):
    """Frame lags whose input frame can overlap the filter's non-zero support.

    Output frame ``l`` sees input samples shifted by ``[d_min, d_max]``, which
    overlap input frame ``l - q`` only for ``(d_min - N) / R < q < (N + d_max) / R``.
    """
    nz = np.flatnonzero(taps)
    if nz.size == 0:
        return 0, -1
    lo = math.floor((nz[0] - cfg.frame_size) / cfg.hop) + 1
    hi = math.ceil((cfg.frame_size + nz[-1]) / cfg.hop) - 1
    return lo, hi


def identify_ctf(h, cfg=StftConfig(), n_taps=None, strictly_causal=False,
                 probe_length=None, seed=PROBE_SEED, energy_preserving=False):
    """Least-squares band-to-band CTF of a time-domain filter.

    A white-noise probe ``x`` is filtered by ``h`` and, independently in every
    band, the taps minimising ``|analyze(h * x) - ctf_convolve(ctf, analyze(x))|^2``
    are solved for. With ``strictly_causal`` the lag-0 tap is excluded.

    Parameters
    ----------
    h : ImpulseResponse or array_like
    cfg : StftConfig
    n_taps : int, optional
        Defaults to ``ceil((len(h) + N) / R)``.
    strictly_causal : bool
    probe_length : int, optional
        Probe length in samples, at least ``200 * N`` by default.
    seed : int
        Seed of the probe noise; fixed so identification is deterministic.
    energy_preserving : bool
        Rescale each band so the CTF output power on the probe equals the
        true output power. Least squares alone under-estimates the power by
        the crossband residual, which biases power-domain uses.

    Taps at lags that cannot overlap the filter support (see
    :func:`support_lags`) are held at zero instead of being fitted to probe
    noise.
    """
    taps = np.asarray(getattr(h, "taps", h), dtype=np.float64)
    if n_taps is None:
        n_taps = default_n_taps(taps.size, cfg)
    if n_taps < 1:
        raise ValueError("n_taps must be >= 1")
    if taps.size > n_taps * cfg.hop + cfg.frame_size:
        warnings.warn(
            f"filter of {taps.size} samples is longer than {n_taps} CTF taps cover; "
            "the tail will be truncated",
            stacklevel=2,
        )
    lag_start = 1 if strictly_causal else 0
    if probe_length is None:
        probe_length = max(PROBE_FRAMES * cfg.frame_size, 4 * (taps.size + cfg.frame_size))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(probe_length)
    y = fftconvolve(x, taps)[:probe_length]
    X = analyze(x, cfg)
    Y = analyze(y, cfg)
    lo, hi = support_lags(taps, cfg)
    lags = np.arange(lag_start, lag_start + n_taps)
    free = (lags >= lo) & (lags <= hi)
    coeffs = np.zeros((cfg.n_bands, n_taps), dtype=np.complex128)
    if not np.any(free):
        return Ctf(coeffs, lag_start)
    A = _lagged(X, lag_start, n_taps)[free]    # (free taps, bands, frames)
    A = np.moveaxis(A, 0, -1)                  # (bands, frames, free taps)
    gram = np.einsum("kft,kfs->kts", A.conj(), A)
    rhs = np.einsum("kft,kf->kt", A.conj(), Y)
    if A.shape[1] < A.shape[2] or np.max(np.linalg.cond(gram)) > 1e10:
        raise ValueError("probe too short: rank-deficient normal equations")
    sol = np.linalg.solve(gram, rhs[..., None])[..., 0]
    if energy_preserving:
        fit = np.einsum("kft,kt->kf", A, sol)
        p_fit = np.sum(np.abs(fit) ** 2, axis=1)
        p_true = np.sum(np.abs(Y) ** 2, axis=1)
        sol *= np.sqrt(np.where(p_fit > 0, p_true / np.where(p_fit > 0, p_fit, 1.0), 0.0))[:, None]
    coeffs[:, free] = sol
    return Ctf(coeffs, lag_start)


def ctf_convolve(ctf, spec):
    """Filter a spectrogram with a CTF by convolution over frames.

    ``out[k, l] = sum_t spec[k, l - lag_start - t] * coeffs[k, t]``; frames
    before the start of the input count as zero. ``spec`` may carry leading
    channel axes.
    """
    spec = check_spectrogram(spec, n_bands=ctf.n_bands)
    out = np.zeros_like(spec)
    n_frames = spec.shape[-1]
    for t in range(ctf.n_taps):
        lag = ctf.lag_start + t
        if lag >= n_frames:
            break
        out[..., lag:] += spec[..., :n_frames - lag] * ctf.coeffs[:, t, None]
    return out


@dataclass(frozen=True)
class StabilityProfile:
    """Per-band stability border of ``1 / (1 + alpha * sum_l c_l z^-l)``.

    ``alpha_max[k]`` is ``UNBOUNDED`` (``math.inf``) for bands without a
    recursive path or whose border exceeds ``cap``.
    """

    alpha_max: np.ndarray
    tolerance: float
    iterations: int
    cap: float


def _companion(coeffs, lag_start, gain):
    """Companion matrices of ``z^L + sum_l gain*c_l z^(L-l)``, one per band."""
    n_bands, n_taps = coeffs.shape
    order = lag_start + n_taps - 1
    poly = np.zeros((n_bands, order), dtype=np.complex128)
    poly[:, lag_start - 1:] = np.asarray(gain)[..., None] * coeffs
    comp = np.zeros((n_bands, order, order), dtype=np.complex128)
    comp[:, 0, :] = -poly
    if order > 1:
        idx = np.arange(order - 1)
        comp[:, idx + 1, idx] = 1.0
    return comp


def recursion_pole_radius(ctf_r, gain):
    """Largest pole magnitude of the recursion per band at the given gain(s)."""
    if not ctf_r.strictly_causal:
        raise ValueError("recursive CTF must be strictly causal")
    gain = np.broadcast_to(np.asarray(gain, dtype=np.float64), (ctf_r.n_bands,))
    comp = _companion(ctf_r.coeffs, ctf_r.lag_start, gain)
    return np.max(np.abs(np.linalg.eigvals(comp)), axis=-1)


def max_stable_gain(ctf_r, tol=1e-4, cap=1e6):
    """Per-band largest gain keeping the CTF recursion stable.

    The bracket starts at ``[0, 1]`` and doubles its upper end until the
    recursion becomes unstable (or ``cap`` is passed, giving ``UNBOUNDED``);
    it is then bisected until its width is below ``tol`` relative to the
    upper end. The reported border is the bracket midpoint, so the recursion
    is stable at ``border * (1 - tol)`` and unstable at ``border * (1 + tol)``.
    """
    if not ctf_r.strictly_causal:
        raise ValueError("recursive CTF must be strictly causal")
    n_bands = ctf_r.n_bands
    silent = ~np.any(ctf_r.coeffs != 0, axis=1)
    lo = np.zeros(n_bands)
    hi = np.ones(n_bands)
    unbounded = silent.copy()
    searching = ~silent
    while np.any(searching):
        stable = recursion_pole_radius(ctf_r, np.where(searching, hi, 0.0)) < 1.0
        grow = searching & stable
        lo[grow] = hi[grow]
        hi[grow] *= 2.0
        over = grow & (hi > cap)
        unbounded |= over
        searching = grow & ~over
    active = ~unbounded
    iterations = 0
    while True:
        open_ = active & (hi - lo > tol * hi)
        if not np.any(open_):
            break
        mid = 0.5 * (lo + hi)
        stable = recursion_pole_radius(ctf_r, np.where(open_, mid, 0.0)) < 1.0
        lo = np.where(open_ & stable, mid, lo)
        hi = np.where(open_ & ~stable, mid, hi)
        iterations += 1
    border = np.where(unbounded, UNBOUNDED, 0.5 * (lo + hi))
    return StabilityProfile(border, tol, iterations, cap)


def certify(ctf_r, profile):
    """Check the stable-below / unstable-above property of every finite border."""
    finite = np.isfinite(profile.alpha_max)
    if not np.any(finite):
        return True
    a = np.where(finite, profile.alpha_max, 0.0)
    below = recursion_pole_radius(ctf_r, a * (1 - profile.tolerance))
    above = recursion_pole_radius(ctf_r, a * (1 + profile.tolerance))
    return bool(np.all(below[finite] < 1.0) and np.all(above[finite] >= 1.0))


def ctf_error_db(h, cfg=StftConfig(), n_taps=None, n_samples=48000, seed=1,
                 ctf=None):
    """Relative error energy (dB) of CTF filtering against time-domain filtering.

    White noise of ``n_samples`` is filtered both ways; the error is
    ``sum|CTF(X) - analyze(h * x)|^2 / sum|analyze(h * x)|^2``.
    """
    taps = np.asarray(getattr(h, "taps", h), dtype=np.float64)
    if ctf is None:
        ctf = identify_ctf(taps, cfg, n_taps)
    x = np.random.default_rng(seed).standard_normal(n_samples)
    ref = analyze(fftconvolve(x, taps)[:n_samples], cfg)
    est = ctf_convolve(ctf, analyze(x, cfg))
    return 10 * np.log10(np.sum(np.abs(est - ref) ** 2) / np.sum(np.abs(ref) ** 2))
