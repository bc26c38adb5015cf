"""Objective metrics and figure-data export.

STOI follows the standard short-time objective intelligibility procedure:
10 kHz resampling, silent-frame removal over a 40 dB range, 512-point
analysis, 15 one-third-octave bands from 150 Hz, 384 ms segments with
normalization and -15 dB SDR clipping, averaged band correlations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import ConfigError, DegenerateSignal, ShapeError
from .model import ModelConfig, enhance_forward, load_checkpoint
from .signal import (Spectrogram, StftConfig, Waveform, istft, stft,
                     write_pgm)
from .training import load_manifest, resolve_noisy

STOI_FS = 10000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEG = 30          # frames per short-time segment (384 ms)
STOI_BETA = -15.0      # lower SDR bound, dB
STOI_DYN_RANGE = 40.0  # silent-frame energy range, dB

SI_SDR_CAP_DB = 80.0


def _hann(n: int) -> np.ndarray:
    # periodic-style window without zero endpoints, as in the reference
    return np.hanning(n + 2)[1:-1]


def _frame_signal(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    n = 1 + (len(x) - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = _hann(STOI_FRAME)
    xf = _frame_signal(x, STOI_FRAME, STOI_HOP) * w
    yf = _frame_signal(y, STOI_FRAME, STOI_HOP) * w
    energies = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + 1e-30)
    keep = energies > energies.max() - STOI_DYN_RANGE
    if not np.any(keep):
        raise DegenerateSignal("no frames above the silence threshold")
    xf, yf = xf[keep], yf[keep]
    out_len = (len(xf) - 1) * STOI_HOP + STOI_FRAME
    xs, ys = np.zeros(out_len), np.zeros(out_len)
    for i in range(len(xf)):
        s = i * STOI_HOP
        xs[s:s + STOI_FRAME] += xf[i]
        ys[s:s + STOI_FRAME] += yf[i]
    return xs, ys


def third_octave_matrix(fs: int, nfft: int, n_bands: int, min_freq: float) -> np.ndarray:
    f = np.linspace(0, fs, nfft + 1)[:nfft // 2 + 1]
    k = np.arange(n_bands)
    freq_low = min_freq * np.power(2.0, (2.0 * k - 1) / 6.0)
    freq_high = min_freq * np.power(2.0, (2.0 * k + 1) / 6.0)
    obm = np.zeros((n_bands, len(f)))
    for i in range(n_bands):
        lo = int(np.argmin((f - freq_low[i]) ** 2))
        hi = int(np.argmin((f - freq_high[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


def _band_spectra(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    w = _hann(STOI_FRAME)
    frames = _frame_signal(x, STOI_FRAME, STOI_HOP) * w
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    return np.sqrt(np.abs(spec) ** 2 @ obm.T)     # [frames, bands]


def stoi(clean: Waveform, degraded: Waveform) -> float:
    """Short-time objective intelligibility of `degraded` given `clean`."""
    if len(clean) != len(degraded):
        raise ShapeError("inputs must share length")
    # Leading/trailing exact-zero padding is registration delay, not content;
    # trimming it (keyed to the clean signal) keeps the score delay-invariant.
    nz = np.flatnonzero(clean.samples)
    if nz.size == 0:
        raise DegenerateSignal("clean signal is all zero")
    lo, hi = nz[0], nz[-1] + 1
    clean = Waveform(clean.samples[lo:hi], clean.sample_rate)
    degraded = Waveform(degraded.samples[lo:hi], degraded.sample_rate)
    x = resample_poly(clean.samples, STOI_FS, clean.sample_rate)
    y = resample_poly(degraded.samples, STOI_FS, degraded.sample_rate)
    if np.max(np.abs(x)) == 0:
        raise DegenerateSignal("clean signal is all zero")
    x, y = _remove_silent_frames(x, y)
    obm = third_octave_matrix(STOI_FS, STOI_NFFT, STOI_BANDS, STOI_MIN_FREQ)
    xb = _band_spectra(x, obm)
    yb = _band_spectra(y, obm)
    n_frames = xb.shape[0]
    if n_frames < STOI_SEG:
        raise DegenerateSignal("too few frames after silence removal")
    clip = 10.0 ** (-STOI_BETA / 20.0)
    corrs = []
    for m in range(STOI_SEG, n_frames + 1):
        xs = xb[m - STOI_SEG:m].T                 # [bands, 30]
        ys = yb[m - STOI_SEG:m].T
        alpha = np.sqrt(np.sum(xs ** 2, axis=1, keepdims=True)
                        / (np.sum(ys ** 2, axis=1, keepdims=True) + 1e-30))
        ys_clipped = np.minimum(alpha * ys, xs * (1.0 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys_clipped - ys_clipped.mean(axis=1, keepdims=True)
        xc /= np.linalg.norm(xc, axis=1, keepdims=True) + 1e-30
        yc /= np.linalg.norm(yc, axis=1, keepdims=True) + 1e-30
        corrs.append(np.sum(xc * yc, axis=1))
    return float(np.mean(corrs))


def si_sdr(reference: Waveform, estimate: Waveform) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, capped at +80."""
    if len(reference) != len(estimate):
        raise ShapeError("inputs must share length")
    ref = reference.samples
    est = estimate.samples
    denom = np.dot(ref, ref)
    if denom == 0:
        raise DegenerateSignal("reference has zero energy")
    target = (np.dot(est, ref) / denom) * ref
    residual = est - target
    p_res = np.dot(residual, residual)
    if p_res == 0:
        return SI_SDR_CAP_DB
    value = 10.0 * np.log10(np.dot(target, target) / p_res)
    return float(min(value, SI_SDR_CAP_DB))


def export_attention(w_att: np.ndarray, layer: int, out_prefix,
                     reduce: str = "mean-heads") -> list[Path]:
    """Write attention maps for one layer as CSV and min-max PGM images.

    Rows are text tokens (BOS first), columns are speech frames.
    """
    maps = w_att[layer]                           # [heads, N+2, T_a]
    if reduce == "mean-heads":
        selected = {"mean": maps.mean(axis=0)}
    elif reduce == "per-head":
        selected = {f"head{h}": maps[h] for h in range(maps.shape[0])}
    else:
        raise ConfigError(f"unknown reduce mode {reduce!r}")
    out_prefix = Path(out_prefix)
    written = []
    for tag, mat in selected.items():
        csv_path = out_prefix.with_name(f"{out_prefix.name}_{tag}.csv")
        pgm_path = out_prefix.with_name(f"{out_prefix.name}_{tag}.pgm")
        np.savetxt(csv_path, mat, delimiter=",", fmt="%.8g", newline="\n")
        write_pgm(pgm_path, mat)
        written += [csv_path, pgm_path]
    return written


def snr_bucket(snr_db: float) -> str:
    if snr_db > 5.0:
        return "high"
    if snr_db < -5.0:
        return "low"
    return "medium"

KNOWN_METRICS = ("stoi", "si_sdr")
# reserved for externally computed scores merged into reports
RESERVED_METRICS = ("pesq", "vqscore")


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)   # dicts: utt_id, snr_db, bucket, metric, value
    bucket_means: dict = field(default_factory=dict)
    overall_means: dict = field(default_factory=dict)

    def finalize(self):
        by_key, by_metric = {}, {}
        for row in self.rows:
            by_key.setdefault((row["metric"], row["bucket"]), []).append(row["value"])
            by_metric.setdefault(row["metric"], []).append(row["value"])
        self.bucket_means = {k: float(np.mean(v)) for k, v in by_key.items()}
        self.overall_means = {k: float(np.mean(v)) for k, v in by_metric.items()}

    def write_csv(self, path):
        with open(str(path), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["utt_id", "snr_db", "bucket", "metric", "value"])
            for row in self.rows:
                writer.writerow([row["utt_id"], f"{row['snr_db']:.6g}",
                                 row["bucket"], row["metric"], f"{row['value']:.8g}"])
            for (metric, bucket), value in sorted(self.bucket_means.items()):
                writer.writerow(["__bucket_mean__", "", bucket, metric, f"{value:.8g}"])
            for metric, value in sorted(self.overall_means.items()):
                writer.writerow(["__overall_mean__", "", "all", metric, f"{value:.8g}"])


def enhance_waveform(noisy: Waveform, params, model_cfg: ModelConfig,
                     stft_cfg: StftConfig | None = None,
                     mask_domain: str = "magnitude") -> Waveform:
    stft_cfg = stft_cfg or StftConfig()
    spec = stft(noisy, stft_cfg)
    fwd = enhance_forward(spec, params, model_cfg, rng=None, mask_domain=mask_domain)
    out = istft(fwd.enhanced.magnitude(), fwd.enhanced.phase, stft_cfg)
    # the analysis grid drops any sub-hop tail; pad back to the input length
    if len(out) < len(noisy):
        pad = np.zeros(len(noisy) - len(out))
        out = Waveform(np.concatenate([out.samples, pad]), out.sample_rate)
    return out


def evaluate(manifest, params, model_cfg: ModelConfig, metrics=KNOWN_METRICS,
             seed: int = 0, stft_cfg: StftConfig | None = None,
             mask_domain: str = "magnitude", against_noisy: bool = False,
             identity: bool = False, report_path=None) -> MetricReport:
    """Score every manifest item and aggregate by SNR bucket.

    `identity` bypasses the model (unit mask) so the report reproduces the
    noisy scores; `against_noisy` scores noisy-vs-clean instead.
    """
    for m in metrics:
        if m not in KNOWN_METRICS:
            raise ConfigError(f"unknown metric {m!r}")
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    stft_cfg = stft_cfg or StftConfig()
    report = MetricReport()
    fns = {"stoi": stoi, "si_sdr": si_sdr}
    for record in manifest:
        clean, noisy, snr = resolve_noisy(record, seed)
        if identity or against_noisy:
            estimate = noisy
        else:
            estimate = enhance_waveform(noisy, params, model_cfg, stft_cfg, mask_domain)
        n = min(len(clean), len(estimate))
        ref = Waveform(clean.samples[:n], clean.sample_rate)
        est = Waveform(estimate.samples[:n], estimate.sample_rate)
        for name in metrics:
            report.rows.append({"utt_id": record["id"], "snr_db": snr,
                                "bucket": snr_bucket(snr), "metric": name,
                                "value": float(fns[name](ref, est))})
    report.finalize()
    if report_path is not None:
        report.write_csv(report_path)
    return report


def evaluate_checkpoint(manifest, checkpoint_path, model_cfg_path,
                        metrics=KNOWN_METRICS, **kwargs) -> MetricReport:
    params = load_checkpoint(checkpoint_path)
    model_cfg = ModelConfig.from_json(Path(model_cfg_path).read_text())
    return evaluate(manifest, params, model_cfg, metrics, **kwargs)
