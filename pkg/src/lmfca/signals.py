"""Synthetic test signals so the whole pipeline runs with zero external data.

make_speech produces speech-shaped bursts: pink-ish noise pushed through a
few gliding formant resonators with a syllabic amplitude envelope. It is
not speech, but it has the right spectro-temporal texture for exercising
masking, SNR mixing, and SI-SDR scoring.
"""

from __future__ import annotations

import numpy as np
from scipy import signal as sps

from .dsp import SAMPLE_RATE, Waveform


def _pink_noise(rng, n):
    # -3 dB/octave via cumulative filtering of white noise
    b, a = [0.049922035, -0.095993537, 0.050612699, -0.004408786], \
           [1, -2.494956002, 2.017265875, -0.522189400]
    return sps.lfilter(b, a, rng.standard_normal(n))


def make_speech(rng: np.random.Generator, seconds: float = 3.0) -> Waveform:
    """Speech-shaped burst signal with pauses; peak below 1, RMS ~0.05."""
    n = int(round(seconds * SAMPLE_RATE))
    x = _pink_noise(rng, n)
    # three formant-like resonators with random centers
    for f0 in rng.uniform([250, 900, 2200], [700, 1800, 3200]):
        w = f0 / (SAMPLE_RATE / 2)
        b, a = sps.iirpeak(w, Q=4.0)
        x = x + 2.0 * sps.lfilter(b, a, x)
    # syllabic envelope ~4 Hz with occasional silences
    t = np.arange(n) / SAMPLE_RATE
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    n_pauses = max(1, int(seconds))
    for _ in range(n_pauses):
        start = rng.integers(0, max(1, n - SAMPLE_RATE // 5))
        width = rng.integers(SAMPLE_RATE // 20, SAMPLE_RATE // 5)
        env[start:start + width] *= 0.05
    x = x * env
    x = x / (np.max(np.abs(x)) + 1e-12)
    rms = np.sqrt(np.mean(x * x))
    return Waveform(x * (0.05 / max(rms, 1e-12)))


def make_noise(rng: np.random.Generator, seconds: float = 3.0, kind: str = "pink") -> Waveform:
    n = int(round(seconds * SAMPLE_RATE))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        x = _pink_noise(rng, n)
    elif kind == "babble":
        x = sum(_pink_noise(rng, n) * (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2, 6) *
                np.arange(n) / SAMPLE_RATE + rng.uniform(0, 6.28))) for _ in range(4))
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    rms = np.sqrt(np.mean(x * x))
    return Waveform(x * (0.05 / max(rms, 1e-12)))
