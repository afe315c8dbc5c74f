"""Impulse responses: free-field model, image-source cabin stand-in, WAV IO."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

SPEED_OF_SOUND = 343.0

#: Shoebox stand-in for the passenger cabin (length, width, height) in metres.
CABIN_DIMS = (2.5, 1.5, 1.3)
CABIN_T60 = 0.08


@dataclass(frozen=True)
class ImpulseResponse:
    taps: np.ndarray
    sample_rate: float

    def __post_init__(self):
        taps = np.atleast_1d(np.asarray(self.taps, dtype=np.float64))
        if taps.ndim != 1 or taps.size == 0:
            raise ValueError("impulse response must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(taps)):
            raise ValueError("impulse response contains non-finite values")
        object.__setattr__(self, "taps", taps)

    def __len__(self):
        return self.taps.size

    def scaled(self, gain):
        return ImpulseResponse(self.taps * gain, self.sample_rate)

    def padded(self, length):
        if length < self.taps.size:
            raise ValueError("cannot pad to a shorter length")
        return ImpulseResponse(np.pad(self.taps, (0, length - self.taps.size)), self.sample_rate)


@dataclass
class Geometry:
    """Microphone, loudspeaker and talker positions in metres.

    ``beta`` optionally overrides the free-field gain of each
    (loudspeaker, microphone) pair; it defaults to ones.
    """

    mic_positions: np.ndarray
    loudspeaker_positions: np.ndarray
    zone_source_positions: np.ndarray
    speed_of_sound: float = SPEED_OF_SOUND
    room_dims: tuple = CABIN_DIMS
    beta: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mic_positions = np.atleast_2d(np.asarray(self.mic_positions, dtype=float))
        self.loudspeaker_positions = np.atleast_2d(
            np.asarray(self.loudspeaker_positions, dtype=float))
        self.zone_source_positions = np.atleast_2d(
            np.asarray(self.zone_source_positions, dtype=float))
        if self.n_mics < 2:
            raise ValueError("at least two microphones are required")
        if self.n_loudspeakers < 1:
            raise ValueError("at least one loudspeaker is required")
        if np.any(self.distances() <= 0):
            raise ValueError("loudspeaker and microphone positions must not coincide")
        if self.beta is None:
            self.beta = np.ones((self.n_loudspeakers, self.n_mics))
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.shape != (self.n_loudspeakers, self.n_mics):
            raise ValueError("beta must have shape (n_loudspeakers, n_mics)")

    @property
    def n_mics(self):
        return self.mic_positions.shape[0]

    @property
    def n_loudspeakers(self):
        return self.loudspeaker_positions.shape[0]

    def distances(self):
        """Loudspeaker-to-microphone distances, shape ``(L, M)``."""
        diff = self.loudspeaker_positions[:, None, :] - self.mic_positions[None, :, :]
        return np.linalg.norm(diff, axis=-1)

    def source_distances(self, zone=0):
        diff = self.mic_positions - self.zone_source_positions[zone]
        return np.linalg.norm(diff, axis=-1)

    def propagation_delays(self, sample_rate):
        """Integer free-field delays ``floor(fs * D / c)``, shape ``(L, M)``."""
        return np.floor(sample_rate * self.distances() / self.speed_of_sound).astype(int)


def default_geometry():
    """Four-seat cabin: front mics in the overhead console, rear mics in the headliner.

    Coordinates are ``(x, y, z)`` with ``x`` running front to rear, ``y``
    left to right and ``z`` up. Mic/zone order: driver, co-driver, rear left,
    rear right. Loudspeakers sit low in the rear doors. These positions are a
    made-up but plausible layout, not measured data.
    """
    mics = [
        [0.70, 0.60, 1.22],
        [0.70, 0.90, 1.22],
        [1.65, 0.55, 1.22],
        [1.65, 0.95, 1.22],
    ]
    speakers = [
        [1.88, 0.06, 0.62],
        [1.93, 1.44, 0.58],
    ]
    zones = [
        [0.95, 0.40, 0.95],
        [0.95, 1.10, 0.95],
        [1.90, 0.40, 0.95],
        [1.90, 1.10, 0.95],
    ]
    return Geometry(mics, speakers, zones)


def free_field_ir(distance, beta=1.0, sample_rate=24000.0, c=SPEED_OF_SOUND):
    """Single tap ``beta / D`` at delay ``floor(fs * D / c)``."""
    if distance <= 0 or sample_rate <= 0 or c <= 0:
        raise ValueError("distance, sample_rate and c must be positive")
    delay = int(math.floor(sample_rate * distance / c))
    taps = np.zeros(delay + 1)
    taps[delay] = beta / distance
    return ImpulseResponse(taps, sample_rate)


def sum_loudspeaker_ir(irs):
    """Tap-wise sum of the responses of all loudspeakers to one microphone."""
    irs = list(irs)
    if not irs:
        raise ValueError("need at least one impulse response")
    fs = irs[0].sample_rate
    if any(ir.sample_rate != fs for ir in irs):
        raise ValueError("sample-rate mismatch between impulse responses")
    taps = np.zeros(max(len(ir) for ir in irs))
    for ir in irs:
        taps[:len(ir)] += ir.taps
    return ImpulseResponse(taps, fs)


def model_loudspeaker_irs(geometry, sample_rate):
    """Free-field ``h_L,m`` for every microphone (summed over loudspeakers)."""
    dist = geometry.distances()
    return [
        sum_loudspeaker_ir(
            free_field_ir(dist[i, m], geometry.beta[i, m], sample_rate, geometry.speed_of_sound)
            for i in range(geometry.n_loudspeakers)
        )
        for m in range(geometry.n_mics)
    ]


def _inside(point, dims):
    return all(0.0 < p < d for p, d in zip(point, dims))


def _image_taps(room_dims, src, mic, reflection, fs, c, n_samples, max_order):
    n_max = max_order
    n = np.arange(-n_max, n_max + 1)
    axes = []
    for d in range(3):
        # image coordinate and wall-hit count for (n, q) in {-n_max..n_max} x {0, 1}
        q = np.array([0, 1])
        coord = 2 * n[:, None] * room_dims[d] + (1 - 2 * q[None, :]) * src[d] - mic[d]
        hits = np.abs(n[:, None] - q[None, :]) + np.abs(n[:, None])
        axes.append((coord.ravel(), hits.ravel()))
    (x, hx), (y, hy), (z, hz) = axes
    dist = np.sqrt(x[:, None, None] ** 2 + y[None, :, None] ** 2 + z[None, None, :] ** 2)
    order = hx[:, None, None] + hy[None, :, None] + hz[None, None, :]
    delay = np.floor(fs * dist / c).astype(np.int64)
    keep = (order <= max_order) & (delay < n_samples)
    taps = np.zeros(n_samples)
    np.add.at(taps, delay[keep], reflection ** order[keep] / dist[keep])
    return taps


def image_source_ir(room_dims, src, mic, t60, sample_rate=24000.0, max_order=None,
                    c=SPEED_OF_SOUND, n_samples=None):
    """Shoebox image-source response with frequency-independent wall reflection.

    The direct path has amplitude ``1 / D`` at delay ``floor(fs * D / c)``, the
    same convention as :func:`free_field_ir`, and every image is likewise
    rounded down to an integer delay. The wall reflection coefficient starts
    from Eyring's formula and is refined so the Schroeder decay of the result
    matches ``t60``.
    """
    room_dims = tuple(float(d) for d in room_dims)
    src = np.asarray(src, dtype=float)
    mic = np.asarray(mic, dtype=float)
    if not (_inside(src, room_dims) and _inside(mic, room_dims)):
        raise ValueError("source and microphone must lie strictly inside the room")
    if t60 <= 0:
        raise ValueError("t60 must be positive")
    direct = int(math.floor(sample_rate * np.linalg.norm(src - mic) / c))
    if n_samples is None:
        n_samples = max(int(math.ceil(1.25 * t60 * sample_rate)), 2 * direct) + direct + 1
    if max_order is None:
        max_order = int(math.ceil(c * n_samples / sample_rate / min(room_dims))) + 1

    lx, ly, lz = room_dims
    volume = lx * ly * lz
    surface = 2 * (lx * ly + lx * lz + ly * lz)
    absorption = 1.0 - math.exp(-0.161 * volume / (surface * t60))
    reflection = math.sqrt(max(1.0 - absorption, 0.0))
    taps = _image_taps(room_dims, src, mic, reflection, sample_rate, c, n_samples, max_order)
    if reflection > 1e-6:
        for _ in range(6):
            measured = estimate_t60(taps, sample_rate)
            if not np.isfinite(measured) or abs(measured / t60 - 1) < 0.02:
                break
            reflection = min(reflection ** (measured / t60), 0.999)
            taps = _image_taps(room_dims, src, mic, reflection, sample_rate, c,
                               n_samples, max_order)
    return ImpulseResponse(taps, sample_rate)


def schroeder_curve(taps):
    """Energy decay curve in dB, normalized to 0 dB at the start."""
    energy = np.cumsum(np.asarray(taps, dtype=float)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10 * np.log10(energy / energy[0])


def estimate_t60(taps, sample_rate, upper_db=-5.0, lower_db=-25.0):
    """T60 from a line fit to the Schroeder curve between two levels."""
    edc = schroeder_curve(taps)
    sel = np.flatnonzero((edc <= upper_db) & (edc >= lower_db))
    if sel.size < 2:
        return math.nan
    t = sel / sample_rate
    slope, _ = np.polyfit(t, edc[sel], 1)
    if slope >= 0:
        return math.nan
    return -60.0 / slope


def load_ir_wav(path, expected_rate=None):
    """Read a mono PCM16 or float32 WAV file as an :class:`ImpulseResponse`.

    PCM16 samples are scaled by ``1 / 32768``. A sample-rate mismatch against
    ``expected_rate`` raises; nothing is resampled.
    """
    fs, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected a mono file, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        taps = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        taps = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if expected_rate is not None and fs != expected_rate:
        raise ValueError(f"{path}: sample rate {fs} Hz does not match scene rate {expected_rate} Hz")
    return ImpulseResponse(taps, float(fs))


def save_wav(path, samples, sample_rate, pcm16=False):
    """Write mono (1-D) or multichannel (channels first) audio."""
    samples = np.asarray(samples, dtype=np.float64)
    data = samples.T if samples.ndim == 2 else samples
    if pcm16:
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = data.astype(np.float32)
    wavfile.write(path, int(round(sample_rate)), data)


def save_ir_wav(path, ir, pcm16=False):
    save_wav(path, ir.taps, ir.sample_rate, pcm16)
