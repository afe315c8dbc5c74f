"""Deterministic test sources."""

import numpy as np
from scipy.signal import butter, lfilter, sosfilt


def speech_shaped_noise(duration=8.0, sample_rate=24000.0, seed=0, modulate=True):
    """Noise with a speech-like long-term spectrum and syllabic envelope.

    The spectrum is band-limited to about 100 Hz - 8 kHz with a -6 dB/octave
    tilt above 500 Hz. With ``modulate`` a random syllable envelope (roughly
    4 syllables per second, levels spread over 20 dB) is applied; the source
    never falls completely silent. Output is scaled to unit peak.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    x = rng.standard_normal(n)
    sos = butter(4, [100.0, 8000.0], btype="bandpass", fs=sample_rate, output="sos")
    x = sosfilt(sos, x)
    pole = np.exp(-2 * np.pi * 500.0 / sample_rate)
    x = lfilter([1.0 - pole], [1.0, -pole], x)
    if modulate:
        x *= syllable_envelope(n, sample_rate, rng)
    return x / np.max(np.abs(x))


def syllable_envelope(n, sample_rate, rng, rate=4.0, spread_db=20.0):
    env = np.empty(0)
    while env.size < n:
        length = int(sample_rate * rng.uniform(0.6, 1.4) / rate)
        level = 10.0 ** (-rng.uniform(0.0, spread_db) / 20.0)
        env = np.concatenate([env, level * np.sin(np.pi * np.arange(length) / length) ** 2])
    floor = 10.0 ** (-spread_db / 20.0)
    env = np.maximum(env[:n], floor)
    # smooth syllable boundaries a little
    b, a = butter(1, 30.0, fs=sample_rate)
    return lfilter(b, a, env)
