"""Input validation helpers shared by the estimators and the functional API."""

import numpy as np


def check_signal(x, name="signal", min_length=1):
    """Return ``x`` as a finite 1-D float64 array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {x.shape}")
    if x.size < min_length:
        raise ValueError(f"{name} too short: {x.size} < {min_length} samples")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_spectrogram(spec, n_bands=None, name="spectrogram"):
    """Return ``spec`` as a complex array whose second-to-last axis is bands.

    Accepts ``(bands, frames)`` or ``(channels, bands, frames)``.
    """
    spec = np.asarray(spec)
    if spec.ndim not in (2, 3):
        raise ValueError(f"{name} must be 2-D or 3-D, got {spec.ndim}-D")
    spec = spec.astype(np.complex128, copy=False)
    if n_bands is not None and spec.shape[-2] != n_bands:
        raise ValueError(
            f"band mismatch: {name} has {spec.shape[-2]} bands, expected {n_bands}"
        )
    return spec


def check_nonnegative(a, name="array"):
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError(f"{name} must be non-negative")
    return a
