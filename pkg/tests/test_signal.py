import wave as wave_mod

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semask.errors import (DegenerateSignal, InputTooShort, IoError,
                           MaskRangeError, ShapeError)
from semask.signal import (DEFAULT_SAMPLE_RATE, Spectrogram, StftConfig,
                           Waveform, apply_mask, export_spectrogram_csv,
                           export_spectrogram_pgm, istft, measured_snr_db,
                           mix_at_snr, read_wav, stft, write_wav)

RNG = np.random.default_rng(11)


def rand_wave(seconds=1.0, seed=0):
    rng = np.random.default_rng(seed)
    return Waveform(0.3 * rng.normal(size=int(seconds * DEFAULT_SAMPLE_RATE)))


# -- stft ---------------------------------------------------------------------

def test_framing_one_second_gives_157_frames_201_bins():
    spec = stft(rand_wave(1.0))
    assert spec.log_amp.shape == (157, 201)


def test_zero_waveform_hits_log_floor_everywhere():
    cfg = StftConfig()
    spec = stft(Waveform(np.zeros(16000)), cfg)
    assert np.allclose(spec.log_amp, np.log(cfg.log_floor))


def test_pure_sine_peaks_at_its_bin():
    cfg = StftConfig()
    k = 40
    f0 = k * DEFAULT_SAMPLE_RATE / cfg.n_fft
    t = np.arange(16000) / DEFAULT_SAMPLE_RATE
    spec = stft(Waveform(0.5 * np.sin(2 * np.pi * f0 * t)), cfg)
    assert np.all(np.argmax(spec.log_amp, axis=1) == k)
    # oracle: brute-force DFT of one windowed frame
    frame = 0.5 * np.sin(2 * np.pi * f0 * t[:cfg.win_len]) * cfg.window
    n = np.arange(cfg.win_len)
    brute = np.array([np.abs(np.sum(frame * np.exp(-2j * np.pi * f * n / cfg.n_fft)))
                      for f in range(cfg.n_bins)])
    assert np.argmax(brute) == k
    assert np.allclose(np.exp(spec.log_amp[0]), np.maximum(brute, cfg.log_floor),
                       rtol=1e-9, atol=1e-12)


def test_short_input_rejected():
    with pytest.raises(InputTooShort):
        stft(Waveform(np.zeros(399)))


def test_log_floor_invariant():
    cfg = StftConfig()
    spec = stft(rand_wave(0.5, seed=3), cfg)
    assert spec.log_amp.min() >= np.log(cfg.log_floor)


# -- istft --------------------------------------------------------------------

def test_round_trip_interior_snr_above_50db():
    cfg = StftConfig()
    x = rand_wave(1.0, seed=5)
    spec = stft(x, cfg)
    y = istft(np.exp(spec.log_amp), spec.phase, cfg)
    n = len(y)
    lo, hi = cfg.win_len, n - cfg.win_len
    err = y.samples[lo:hi] - x.samples[lo:hi]
    snr = 10 * np.log10(np.sum(x.samples[lo:hi] ** 2) / np.sum(err ** 2))
    assert snr > 50.0


def test_zero_magnitude_gives_zero_waveform():
    y = istft(np.zeros((10, 201)), np.zeros((10, 201)))
    assert np.allclose(y.samples, 0.0)
    assert len(y) == 9 * 100 + 400


def test_single_frame_istft():
    cfg = StftConfig()
    x = rand_wave(0.025, seed=9)  # exactly one window
    spec = stft(x, cfg)
    y = istft(np.exp(spec.log_amp), spec.phase, cfg)
    assert len(y) == cfg.win_len
    # single frame: OLA normalization reduces to w*frame / w^2 = frame / w
    assert np.allclose(y.samples, x.samples, atol=1e-8)


def test_istft_shape_mismatch():
    with pytest.raises(ShapeError):
        istft(np.zeros((4, 201)), np.zeros((5, 201)))


# -- apply_mask ---------------------------------------------------------------

def test_near_unit_mask_is_identity():
    spec = stft(rand_wave(0.5, seed=1))
    out = apply_mask(spec, np.full(spec.log_amp.shape, 1.0 - 1e-12))
    assert np.allclose(out.log_amp, spec.log_amp, atol=1e-9)
    assert np.array_equal(out.phase, spec.phase)


def test_near_zero_mask_collapses_to_floor():
    spec = stft(rand_wave(0.5, seed=2))
    out = apply_mask(spec, np.full(spec.log_amp.shape, 1e-300))
    assert np.allclose(out.log_amp, np.log(spec.config.log_floor))


def test_half_mask_halves_magnitude():
    cfg = StftConfig()
    log_amp = np.full((3, cfg.n_bins), np.log(2.0))
    spec = Spectrogram(log_amp, np.zeros_like(log_amp), cfg)
    out = apply_mask(spec, np.full_like(log_amp, 0.5))
    assert np.allclose(np.exp(out.log_amp), 1.0)


def test_log_domain_mask():
    spec = stft(rand_wave(0.3, seed=4))
    mask = np.full(spec.log_amp.shape, 0.5)
    out = apply_mask(spec, mask, domain="log")
    assert np.allclose(out.log_amp, 0.5 * spec.log_amp)


def test_mask_out_of_range_rejected():
    spec = stft(rand_wave(0.3, seed=4))
    for bad in (0.0, 1.0, -0.1, 1.1):
        with pytest.raises(MaskRangeError):
            apply_mask(spec, np.full(spec.log_amp.shape, bad))


@given(st.floats(min_value=0.05, max_value=0.45))
@settings(max_examples=20, deadline=None)
def test_mask_monotone(delta):
    spec = stft(rand_wave(0.2, seed=6))
    low = np.full(spec.log_amp.shape, 0.5 - delta)
    high = np.full(spec.log_amp.shape, 0.5 + delta)
    out_low = apply_mask(spec, low)
    out_high = apply_mask(spec, high)
    assert np.all(out_high.log_amp >= out_low.log_amp)


# -- mix_at_snr ---------------------------------------------------------------

def test_equal_rms_zero_snr_gain_one():
    rng = np.random.default_rng(0)
    clean = Waveform(rng.normal(size=8000))
    noise = Waveform(clean.samples[::-1].copy())
    mixed = mix_at_snr(clean, noise, 0.0)
    assert np.allclose(mixed.samples, clean.samples + noise.samples)


def test_equal_rms_20db_gain_tenth():
    rng = np.random.default_rng(1)
    clean = Waveform(rng.normal(size=8000))
    noise = Waveform(np.roll(clean.samples, 100))
    mixed = mix_at_snr(clean, noise, 20.0)
    assert np.allclose(mixed.samples, clean.samples + 0.1 * noise.samples)


@pytest.mark.parametrize("snr", [-15.0, 0.0, 15.0])
def test_measured_snr_exact(snr):
    rng = np.random.default_rng(2)
    clean = Waveform(0.2 * rng.normal(size=16000))
    noise = Waveform(0.7 * rng.standard_t(5, size=20000))
    mixed = mix_at_snr(clean, noise, snr, rng)
    scaled = mixed.samples - clean.samples
    measured = 10 * np.log10(np.mean(clean.samples ** 2) / np.mean(scaled ** 2))
    assert abs(measured - snr) < 1e-6


def test_short_noise_is_tiled():
    rng = np.random.default_rng(3)
    clean = Waveform(rng.normal(size=8000))
    noise = Waveform(rng.normal(size=1000))
    mixed = mix_at_snr(clean, noise, 5.0)
    assert len(mixed) == len(clean)
    assert abs(measured_snr_db(clean, mixed) - 5.0) < 1e-6


def test_silent_inputs_rejected():
    clean = Waveform(np.zeros(8000))
    noise = Waveform(np.ones(8000))
    with pytest.raises(DegenerateSignal):
        mix_at_snr(clean, noise, 0.0)
    with pytest.raises(DegenerateSignal):
        mix_at_snr(noise, clean, 0.0)


def test_noise_crop_deterministic_per_rng():
    rng_a = np.random.default_rng(10)
    rng_b = np.random.default_rng(10)
    clean = Waveform(np.random.default_rng(4).normal(size=4000))
    noise = Waveform(np.random.default_rng(5).normal(size=9000))
    m1 = mix_at_snr(clean, noise, 3.0, rng_a)
    m2 = mix_at_snr(clean, noise, 3.0, rng_b)
    assert np.array_equal(m1.samples, m2.samples)


# -- wav i/o ------------------------------------------------------------------

def test_wav_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    x = Waveform(0.9 * np.clip(0.2 * rng.normal(size=4800), -1, 1))
    path = tmp_path / "x.wav"
    write_wav(path, x)
    y = read_wav(path)
    assert y.sample_rate == DEFAULT_SAMPLE_RATE
    assert np.max(np.abs(y.samples - x.samples)) < 1.0 / 32768


def test_stereo_wav_rejected(tmp_path):
    path = tmp_path / "stereo.wav"
    with wave_mod.open(str(path), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(b"\x00\x00" * 200)
    with pytest.raises(IoError):
        read_wav(path)


# -- exports ------------------------------------------------------------------

def test_spectrogram_exports(tmp_path):
    spec = stft(rand_wave(0.2, seed=12))
    csv_path = tmp_path / "spec.csv"
    pgm_path = tmp_path / "spec.pgm"
    export_spectrogram_csv(csv_path, spec)
    export_spectrogram_pgm(pgm_path, spec)
    loaded = np.loadtxt(csv_path, delimiter=",")
    assert loaded.shape == spec.log_amp.shape
    raw = pgm_path.read_bytes()
    assert raw.startswith(b"P5\n201 ")
    body = raw.split(b"255\n", 1)[1]
    img = np.frombuffer(body, dtype=np.uint8)
    assert img.min() == 0 and img.max() == 255
