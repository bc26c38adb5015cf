"""Waveform I/O and spectrogram processing.

Analysis uses a Hamming window, 25 ms frames and 6.25 ms hop at 16 kHz,
giving 201 frequency bins. All functions are pure.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateSignal, InputTooShort, IoError, MaskRangeError,
                     ShapeError)

DEFAULT_SAMPLE_RATE = 16000


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError("waveform must be mono (1-D)")
        if not np.all(np.isfinite(self.samples)):
            raise ShapeError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ShapeError("sample_rate must be positive")

    def __len__(self):
        return len(self.samples)


@dataclass
class StftConfig:
    win_len: int = 400          # 25 ms @ 16 kHz
    hop: int = 100              # 6.25 ms
    n_fft: int = 400
    log_floor: float = 1e-5
    window: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.hop > self.win_len:
            raise ShapeError("hop must not exceed win_len")
        if self.n_fft < self.win_len:
            raise ShapeError("n_fft must cover win_len")
        if self.log_floor <= 0:
            raise ShapeError("log_floor must be positive")
        if self.window is None:
            self.window = np.hamming(self.win_len)

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class Spectrogram:
    log_amp: np.ndarray   # [T_a, F], natural log of amplitude
    phase: np.ndarray     # [T_a, F], radians
    config: StftConfig

    def __post_init__(self):
        if self.log_amp.shape != self.phase.shape:
            raise ShapeError("log_amp and phase must share shape")

    @property
    def n_frames(self) -> int:
        return self.log_amp.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.exp(self.log_amp)


def _frame(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = 1 + (len(samples) - cfg.win_len) // cfg.hop
    idx = np.arange(cfg.win_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return samples[idx]


def stft(wave_in: Waveform, cfg: StftConfig | None = None) -> Spectrogram:
    """Framed DFT with log-amplitude compression; no padding, phase retained."""
    cfg = cfg or StftConfig()
    if len(wave_in) < cfg.win_len:
        raise InputTooShort(f"need at least {cfg.win_len} samples, got {len(wave_in)}")
    frames = _frame(wave_in.samples, cfg) * cfg.window
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    log_amp = np.log(np.maximum(np.abs(spec), cfg.log_floor))
    return Spectrogram(log_amp=log_amp, phase=np.angle(spec), config=cfg)


def istft(mag: np.ndarray, phase: np.ndarray, cfg: StftConfig | None = None) -> Waveform:
    """Overlap-add inverse with squared-window normalization."""
    cfg = cfg or StftConfig()
    if mag.shape != phase.shape:
        raise ShapeError(f"mag {mag.shape} vs phase {phase.shape}")
    if np.any(mag < 0):
        raise ShapeError("magnitude must be nonnegative")
    n_frames = mag.shape[0]
    frames = np.fft.irfft(mag * np.exp(1j * phase), n=cfg.n_fft, axis=1)[:, :cfg.win_len]
    out_len = (n_frames - 1) * cfg.hop + cfg.win_len
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    wsq = cfg.window ** 2
    for t in range(n_frames):
        start = t * cfg.hop
        out[start:start + cfg.win_len] += frames[t] * cfg.window
        norm[start:start + cfg.win_len] += wsq
    out /= np.maximum(norm, 1e-12)
    return Waveform(out)


def apply_mask(spec: Spectrogram, mask: np.ndarray, domain: str = "magnitude") -> Spectrogram:
    """Apply a (0,1) gain per TF bin; phase passes through unchanged."""
    if mask.shape != spec.log_amp.shape:
        raise ShapeError(f"mask {mask.shape} vs spectrogram {spec.log_amp.shape}")
    if np.any(mask <= 0) or np.any(mask >= 1):
        raise MaskRangeError("mask entries must lie strictly in (0, 1)")
    floor = spec.config.log_floor
    if domain == "magnitude":
        enhanced = np.log(np.maximum(mask * np.exp(spec.log_amp), floor))
    elif domain == "log":
        enhanced = mask * spec.log_amp
    else:
        raise ShapeError(f"unknown mask domain {domain!r}")
    return Spectrogram(log_amp=enhanced, phase=spec.phase.copy(), config=spec.config)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float,
               rng: np.random.Generator | None = None) -> Waveform:
    """Add a scaled noise segment so the mixture hits snr_db exactly.

    Noise longer than the clean signal is cropped from a random offset
    (seeded rng, offset 0 when rng is None); shorter noise is tiled first.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ShapeError("sample rates differ")
    n = len(clean)
    seg = noise.samples
    if len(seg) < n:
        seg = np.tile(seg, int(np.ceil(n / len(seg))))
    if len(seg) > n:
        offset = 0 if rng is None else int(rng.integers(0, len(seg) - n + 1))
        seg = seg[offset:offset + n]
    rms_clean = np.sqrt(np.mean(clean.samples ** 2))
    rms_noise = np.sqrt(np.mean(seg ** 2))
    if rms_clean == 0 or rms_noise == 0:
        raise DegenerateSignal("clean or noise segment has zero RMS")
    gain = (rms_clean / rms_noise) * 10.0 ** (-snr_db / 20.0)
    return Waveform(clean.samples + gain * seg, clean.sample_rate)


# -- WAV I/O (RIFF PCM16 LE mono) -------------------------------------------

def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise IoError(f"{path}: only mono supported")
            if fh.getsampwidth() != 2:
                raise IoError(f"{path}: only 16-bit PCM supported")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise IoError(f"{path}: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples, rate)


def write_wav(path, wave_out: Waveform) -> None:
    clipped = np.clip(wave_out.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    try:
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(wave_out.sample_rate)
            fh.writeframes(pcm.tobytes())
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


# -- figure-data export ------------------------------------------------------

def export_spectrogram_csv(path, spec: Spectrogram) -> None:
    np.savetxt(str(path), spec.log_amp, delimiter=",", fmt="%.8g", newline="\n")


def write_pgm(path, matrix: np.ndarray) -> None:
    """Min-max normalized 8-bit binary PGM (P5)."""
    lo, hi = matrix.min(), matrix.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = ((matrix - lo) * scale).round().astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    try:
        with open(str(path), "wb") as fh:
            fh.write(header + img.tobytes())
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


def export_spectrogram_pgm(path, spec: Spectrogram) -> None:
    write_pgm(path, spec.log_amp)


def measured_snr_db(clean: Waveform, noisy: Waveform) -> float:
    diff = noisy.samples - clean.samples
    p_clean = np.mean(clean.samples ** 2)
    p_noise = np.mean(diff ** 2)
    if p_noise == 0:
        return float("inf")
    return 10.0 * np.log10(p_clean / p_noise)
