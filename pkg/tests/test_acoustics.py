import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from icczone.acoustics import (
    CABIN_DIMS, Geometry, ImpulseResponse, default_geometry, estimate_t60, free_field_ir,
    image_source_ir, load_ir_wav, save_ir_wav, sum_loudspeaker_ir,
)


def test_free_field_one_metre():
    ir = free_field_ir(1.0, 1.0, 24000.0, 343.0)
    assert np.flatnonzero(ir.taps).tolist() == [69]
    assert ir.taps[69] == 1.0


def test_free_field_inverse_distance():
    ir = free_field_ir(2.0)
    assert ir.taps[np.flatnonzero(ir.taps)[0]] == 0.5


def test_free_field_one_sample():
    ir = free_field_ir(343.0 / 24000.0, 1.0, 24000.0, 343.0)
    assert np.flatnonzero(ir.taps).tolist() == [1]


@settings(max_examples=50)
@given(d1=st.floats(0.05, 5.0), d2=st.floats(0.05, 5.0))
def test_free_field_monotone(d1, d2):
    d1, d2 = sorted((d1, d2))
    if d1 == d2:
        return
    a, b = free_field_ir(d1), free_field_ir(d2)
    assert len(a) <= len(b)
    assert a.taps[-1] > b.taps[-1]


def test_sum_single_and_doubled():
    ir = free_field_ir(1.0)
    np.testing.assert_array_equal(sum_loudspeaker_ir([ir]).taps, ir.taps)
    np.testing.assert_array_equal(sum_loudspeaker_ir([ir, ir]).taps, 2 * ir.taps)


def test_sum_two_delays():
    a = np.zeros(70); a[69] = 1.0
    b = np.zeros(84); b[83] = 0.5
    s = sum_loudspeaker_ir([ImpulseResponse(a, 24000.0), ImpulseResponse(b, 24000.0)])
    assert np.flatnonzero(s.taps).tolist() == [69, 83]
    assert s.taps[69] == 1.0 and s.taps[83] == 0.5


def test_sum_rate_mismatch():
    with pytest.raises(ValueError, match="sample-rate mismatch"):
        sum_loudspeaker_ir([ImpulseResponse([1.0], 24000.0), ImpulseResponse([1.0], 48000.0)])


@settings(max_examples=30)
@given(st.lists(st.lists(st.floats(-1, 1), min_size=1, max_size=8), min_size=3, max_size=3))
def test_sum_commutative_associative(taps):
    a, b, c = (ImpulseResponse(t, 1000.0) for t in taps)
    ab_c = sum_loudspeaker_ir([sum_loudspeaker_ir([a, b]), c]).taps
    a_bc = sum_loudspeaker_ir([a, sum_loudspeaker_ir([b, c])]).taps
    cba = sum_loudspeaker_ir([c, b, a]).taps
    np.testing.assert_allclose(ab_c, a_bc, atol=1e-12)
    np.testing.assert_allclose(ab_c, cba, atol=1e-12)


def test_image_source_anechoic_limit():
    src, mic = [0.5, 0.5, 0.5], [1.5, 0.7, 0.6]
    ir = image_source_ir(CABIN_DIMS, src, mic, t60=1e-4)
    d = np.linalg.norm(np.subtract(src, mic))
    ff = free_field_ir(d)
    assert abs(int(np.argmax(np.abs(ir.taps))) - (len(ff) - 1)) <= 1
    direct = ir.taps[len(ff) - 1]
    assert np.sum(ir.taps ** 2) == pytest.approx(direct ** 2, rel=1e-6)


def test_image_source_direct_tap_at_69():
    src = np.array([0.6, 0.7, 0.6])
    ir = image_source_ir(CABIN_DIMS, src, src + [1.0, 0.0, 0.0], 0.08)
    assert np.flatnonzero(ir.taps)[0] == 69


def test_image_source_t60_schroeder():
    g = default_geometry()
    ir = image_source_ir(CABIN_DIMS, g.loudspeaker_positions[0], g.mic_positions[0], 0.08)
    assert estimate_t60(ir.taps, 24000.0) == pytest.approx(0.08, abs=0.016)


def test_image_source_outside_room():
    with pytest.raises(ValueError, match="inside"):
        image_source_ir(CABIN_DIMS, [3.0, 0.5, 0.5], [1.0, 0.5, 0.5], 0.08)


def test_estimate_t60_exact_exponential():
    fs = 24000.0
    t = np.arange(int(0.3 * fs)) / fs
    taps = np.exp(-3 * np.log(10) * t / 0.12)  # energy decays 60 dB in 0.12 s
    assert estimate_t60(taps, fs) == pytest.approx(0.12, rel=0.01)


@settings(max_examples=20, deadline=None)
@given(x=st.floats(0.2, 2.3), y=st.floats(0.2, 1.3), z=st.floats(0.2, 1.1))
def test_image_source_direct_arrival(x, y, z):
    src = np.array([1.2, 0.75, 0.65])
    mic = np.array([x, y, z])
    d = np.linalg.norm(src - mic)
    if d < 0.05:
        return
    ir = image_source_ir(CABIN_DIMS, src, mic, 0.08)
    assert abs(np.flatnonzero(ir.taps)[0] - math.floor(24000 * d / 343.0)) <= 1


def test_wav_round_trip(tmp_path, rng):
    taps = rng.uniform(-0.9, 0.9, 500)
    ir = ImpulseResponse(taps, 24000.0)
    save_ir_wav(tmp_path / "f.wav", ir)
    np.testing.assert_allclose(load_ir_wav(tmp_path / "f.wav").taps, taps, atol=1e-7)
    save_ir_wav(tmp_path / "p.wav", ir, pcm16=True)
    np.testing.assert_allclose(load_ir_wav(tmp_path / "p.wav").taps, taps, atol=1 / 32768)


def test_pcm16_full_scale(tmp_path):
    wavfile.write(tmp_path / "fs.wav", 24000, np.array([32767, -32768], dtype=np.int16))
    taps = load_ir_wav(tmp_path / "fs.wav").taps
    assert taps[0] == 32767 / 32768 and taps[1] == -1.0


def test_wav_rate_mismatch_reported(tmp_path):
    wavfile.write(tmp_path / "r.wav", 48000, np.zeros(10, np.float32))
    with pytest.raises(ValueError, match="does not match"):
        load_ir_wav(tmp_path / "r.wav", 24000.0)
    assert load_ir_wav(tmp_path / "r.wav").sample_rate == 48000.0


def test_wav_rejects_multichannel_and_formats(tmp_path):
    wavfile.write(tmp_path / "st.wav", 24000, np.zeros((10, 2), np.float32))
    with pytest.raises(ValueError, match="mono"):
        load_ir_wav(tmp_path / "st.wav")
    wavfile.write(tmp_path / "i32.wav", 24000, np.zeros(10, np.int32))
    with pytest.raises(ValueError, match="unsupported"):
        load_ir_wav(tmp_path / "i32.wav")


def test_default_geometry_invariants():
    g = default_geometry()
    assert g.n_mics == 4 and g.n_loudspeakers == 2
    assert np.all(g.distances() > 0)
    np.testing.assert_array_equal(g.beta, np.ones((2, 4)))
    assert g.propagation_delays(24000.0).shape == (2, 4)


def test_geometry_validation():
    with pytest.raises(ValueError):
        Geometry([[0.5, 0.5, 0.5]], [[1.0, 1.0, 1.0]], [[0.2, 0.2, 0.2]])
    with pytest.raises(ValueError):
        Geometry([[0.5, 0.5, 0.5], [0.6, 0.5, 0.5]], [[0.5, 0.5, 0.5]], [[0.2, 0.2, 0.2]])
