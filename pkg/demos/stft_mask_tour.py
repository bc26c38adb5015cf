"""The signal path in isolation: analysis, an oracle mask, resynthesis.

No learned model here — we build the ideal ratio-style mask from the known
clean/noise pair to show the ceiling of what a magnitude mask with noisy
phase can recover.
"""

import numpy as np

from semask.evaluation import si_sdr, stoi
from semask.signal import (StftConfig, Waveform, apply_mask, istft,
                           mix_at_snr, stft)
from semask.synth import _harmonic_complex, _tilted_noise

rng = np.random.default_rng(7)
fs = 16000
clean = Waveform(_harmonic_complex(rng, 2 * fs, fs))
noise = Waveform(_tilted_noise(rng, 2 * fs))
noisy = mix_at_snr(clean, noise, snr_db=0.0)

cfg = StftConfig()
noisy_spec = stft(noisy, cfg)
clean_spec = stft(clean, cfg)
print(f"frames x bins: {noisy_spec.log_amp.shape}")

# oracle magnitude mask, clipped to the sigmoid's (0, 1) range
oracle = np.clip(np.exp(clean_spec.log_amp - noisy_spec.log_amp), 1e-4, 1.0 - 1e-4)
masked = apply_mask(noisy_spec, oracle, domain="magnitude")
recovered = istft(masked.magnitude(), masked.phase, cfg)

n = len(recovered)
ref = Waveform(clean.samples[:n])
deg = Waveform(noisy.samples[:n])
print(f"noisy    si_sdr {si_sdr(ref, deg):6.2f} dB   stoi {stoi(ref, deg):.3f}")
print(f"oracle   si_sdr {si_sdr(ref, recovered):6.2f} dB   stoi {stoi(ref, recovered):.3f}")
