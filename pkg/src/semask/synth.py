"""Seeded synthetic corpus for desk-scale experiments.

Clean signals are amplitude-modulated harmonic complexes with distinct
fundamentals, noise is white with a random spectral tilt, and the
pseudo-text archive pairs random token sequences with unit-norm table
rows perturbed by small noise.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import IoError
from .signal import DEFAULT_SAMPLE_RATE, Waveform, write_wav
from .textalign import EmbeddingArchive, UtteranceText, write_archive

SNR_RANGE_DB = (-15.0, 15.0)


def _harmonic_complex(rng: np.random.Generator, n_samples: int, fs: int) -> np.ndarray:
    t = np.arange(n_samples) / fs
    f0 = rng.uniform(100.0, 300.0)
    n_harm = int(rng.integers(3, 7))
    sig = np.zeros(n_samples)
    for h in range(1, n_harm + 1):
        amp = 1.0 / h
        phase = rng.uniform(0, 2 * np.pi)
        sig += amp * np.sin(2 * np.pi * f0 * h * t + phase)
    am_rate = rng.uniform(2.0, 8.0)
    am_depth = rng.uniform(0.3, 0.9)
    sig *= 1.0 - am_depth * 0.5 * (1.0 + np.sin(2 * np.pi * am_rate * t))
    return 0.5 * sig / np.max(np.abs(sig))


def _tilted_noise(rng: np.random.Generator, n_samples: int) -> np.ndarray:
    white = rng.normal(0.0, 1.0, n_samples)
    pole = rng.uniform(0.0, 0.9)
    out = np.empty_like(white)
    acc = 0.0
    for i in range(n_samples):
        acc = pole * acc + (1.0 - pole) * white[i]
        out[i] = acc
    return 0.3 * out / np.max(np.abs(out))


def gen_synth(out_dir, n_utts: int, seed: int, d_t: int = 768,
              vocab_size: int = 64, sample_rate: int = DEFAULT_SAMPLE_RATE) -> dict:
    """Generate wavs, a JSONL manifest, and a pseudo-embedding archive.

    Returns a dict of output paths. Fully deterministic per seed.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "clean").mkdir(parents=True, exist_ok=True)
        (out_dir / "noise").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"{out_dir}: {exc}") from exc
    rng = np.random.default_rng(seed)
    table = rng.normal(0.0, 1.0, (vocab_size, d_t))
    table /= np.linalg.norm(table, axis=1, keepdims=True)
    archive = EmbeddingArchive(d_t=d_t, bos_id=0, eos_id=1, target_layer=-1,
                               table=table.astype(np.float32))
    records = []
    for i in range(n_utts):
        utt_id = f"utt{i:04d}"
        n_samples = int(rng.uniform(1.0, 2.0) * sample_rate)
        clean = _harmonic_complex(rng, n_samples, sample_rate)
        noise = _tilted_noise(rng, n_samples + int(0.2 * sample_rate))
        clean_path = out_dir / "clean" / f"{utt_id}.wav"
        noise_path = out_dir / "noise" / f"{utt_id}.wav"
        write_wav(clean_path, Waveform(clean, sample_rate))
        write_wav(noise_path, Waveform(noise, sample_rate))
        n_tok = int(rng.integers(3, 11))
        ids = rng.integers(2, vocab_size, n_tok)
        target = table[ids] + 0.01 * rng.normal(0.0, 1.0, (n_tok, d_t))
        archive.utterances[utt_id] = UtteranceText(
            utt_id, ids, target.astype(np.float32))
        records.append({
            "id": utt_id,
            "clean": f"clean/{utt_id}.wav",
            "noise": f"noise/{utt_id}.wav",
            "snr_db": round(float(rng.uniform(*SNR_RANGE_DB)), 4),
            "transcript": " ".join(str(t) for t in ids),
        })
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    archive_path = out_dir / "archive.cmke"
    write_archive(archive_path, archive)
    return {"manifest": manifest_path, "archive": archive_path,
            "out_dir": out_dir, "n_utts": n_utts}
