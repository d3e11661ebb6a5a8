"""Plucked-string toy material for desk-scale experiments and tests.

Notes are additive sums of exponentially decaying, slightly inharmonic
partials, roughly the spectral envelope of a DI electric guitar.
"""

import numpy as np

from dryrecover.dspcore import SAMPLE_RATE, AudioClip
from dryrecover.fxrender import make_rng

# E2 .. E5 in MIDI note numbers
LOWEST_NOTE, HIGHEST_NOTE = 40, 76


def midi_to_hz(note):
    return 440.0 * 2.0 ** ((note - 69) / 12.0)


def pluck(freq, duration, rng, sample_rate=SAMPLE_RATE, n_partials=24):
    t = np.arange(int(duration * sample_rate)) / sample_rate
    pluck_pos = rng.uniform(0.1, 0.3)
    base_decay = rng.uniform(0.6, 2.0)
    inharm = 1e-4 * rng.uniform(0.5, 2.0)
    out = np.zeros_like(t)
    for h in range(1, n_partials + 1):
        f = h * freq * np.sqrt(1.0 + inharm * h * h)
        if f >= 0.45 * sample_rate:
            break
        amp = abs(np.sin(np.pi * h * pluck_pos)) / h
        decay = base_decay / (1.0 + 0.15 * (h - 1))
        out += amp * np.exp(-t / decay) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    attack = np.minimum(1.0, t / 0.002)
    return out * attack


def guitar_phrase(duration, seed, sample_rate=SAMPLE_RATE, peak_range=(0.3, 0.9)):
    """Random monophonic/dyad phrase of plucked notes, peak-normalised into ``peak_range``."""
    rng = make_rng(seed)
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    t = 0.0
    while t < duration:
        start = int(t * sample_rate)
        note_len = rng.uniform(0.3, 1.5)
        voices = 1 if rng.random() < 0.7 else 2
        for _ in range(voices):
            note = rng.integers(LOWEST_NOTE, HIGHEST_NOTE + 1)
            seg = pluck(midi_to_hz(note), min(note_len + 0.5, duration - t + 1e-3), rng, sample_rate)
            end = min(n, start + len(seg))
            out[start:end] += seg[: end - start] * rng.uniform(0.5, 1.0)
        t += note_len
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= rng.uniform(*peak_range) / peak
    return AudioClip(out.astype(np.float32), sample_rate)
