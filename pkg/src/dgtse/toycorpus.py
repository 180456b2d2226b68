"""Synthetic multi-speaker corpus for desk-scale experiments.

Each speaker is a small source-filter voice: a harmonic glottal source with a
speaker-specific pitch range and spectral tilt, shaped by three formant
resonators whose frequencies are scaled by a speaker-specific vocal-tract
factor. Utterances are random syllable strings (vowel nuclei, optional
fricative onsets, pauses). Output layout is ``root/<speaker>/<utt>.wav``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter

from .signal import SAMPLE_RATE, write_wav

# (F1, F2, F3) in Hz for a reference adult voice
VOWELS = np.array([
    [730, 1090, 2440],   # a
    [530, 1840, 2480],   # e
    [270, 2290, 3010],   # i
    [570, 840, 2410],    # o
    [300, 870, 2240],    # u
    [660, 1720, 2410],   # ae
])
BANDWIDTHS = np.array([80.0, 100.0, 140.0])


@dataclass(frozen=True)
class Voice:
    f0: float            # median pitch in Hz
    tract: float         # formant scale factor
    tilt: float          # harmonic amplitude ~ k ** -tilt
    breath: float        # aspiration noise level


DEFAULT_VOICES = (
    Voice(f0=105.0, tract=0.92, tilt=1.0, breath=0.02),
    Voice(f0=175.0, tract=1.08, tilt=1.3, breath=0.04),
    Voice(f0=245.0, tract=1.2, tilt=1.6, breath=0.03),
    Voice(f0=140.0, tract=1.0, tilt=1.15, breath=0.05),
    Voice(f0=210.0, tract=1.15, tilt=1.45, breath=0.02),
)


def _resonator(x, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return lfilter(b, a, x)


def _envelope(n, sr, attack=0.02, release=0.03):
    env = np.ones(n)
    na, nr = min(n // 2, int(attack * sr)), min(n // 2, int(release * sr))
    if na:
        env[:na] = np.linspace(0, 1, na)
    if nr:
        env[n - nr:] = np.linspace(1, 0, nr)
    return env


def _syllable(voice: Voice, rng, sr, phase, f0_scale):
    dur = rng.uniform(0.12, 0.3)
    n = int(dur * sr)
    t = np.arange(n) / sr
    f0 = voice.f0 * f0_scale * (1 + 0.06 * np.sin(2 * np.pi * rng.uniform(1, 4) * t + rng.uniform(0, 6.28)))
    f0 *= np.exp(rng.normal(0, 0.004, n)).cumprod() ** 0.05
    inst_phase = phase + 2 * np.pi * np.cumsum(f0) / sr
    n_harm = int(4000 / f0.max())
    k = np.arange(1, n_harm + 1)[:, None]
    source = (np.sin(k * inst_phase[None]) * k ** -voice.tilt).sum(0)
    source += voice.breath * rng.standard_normal(n)
    formants = VOWELS[rng.integers(len(VOWELS))] * voice.tract * rng.uniform(0.95, 1.05, 3)
    y = np.zeros(n)
    for f, bw, g in zip(formants, BANDWIDTHS, (1.0, 0.6, 0.3)):
        y += g * _resonator(source, f, bw, sr)
    y *= _envelope(n, sr)
    return y, inst_phase[-1]


def _fricative(rng, sr):
    n = int(rng.uniform(0.03, 0.08) * sr)
    b, a = butter(2, rng.uniform(2500, 5000) / (sr / 2), btype="high")
    return lfilter(b, a, rng.standard_normal(n)) * _envelope(n, sr, 0.01, 0.01) * rng.uniform(0.05, 0.15)


def synth_utterance(voice: Voice, rng: np.random.Generator, duration: float, sr: int = SAMPLE_RATE) -> np.ndarray:
    target = int(duration * sr)
    pieces, total, phase = [], 0, 0.0
    pieces.append(np.zeros(int(rng.uniform(0.02, 0.1) * sr)))
    while total < target:
        f0_scale = 1.0 - 0.15 * total / max(target, 1) + rng.normal(0, 0.03)
        if rng.random() < 0.35:
            pieces.append(_fricative(rng, sr))
        syl, phase = _syllable(voice, rng, sr, phase, f0_scale)
        pieces.append(syl)
        if rng.random() < 0.25:
            pieces.append(np.zeros(int(rng.uniform(0.04, 0.15) * sr)))
        total = sum(len(p) for p in pieces)
    y = np.concatenate(pieces)[:target]
    y = y / (np.abs(y).max() + 1e-9) * rng.uniform(0.4, 0.8)
    return y.astype(np.float32)


def make_toy_corpus(root, n_speakers: int = 3, utts_per_speaker: int = 40, seed: int = 0,
                    min_dur: float = 3.5, max_dur: float = 6.5, voices=DEFAULT_VOICES):
    """Write a synthetic corpus under ``root`` and return the list of written paths."""
    if n_speakers > len(voices):
        raise ValueError(f"at most {len(voices)} built-in voices")
    root = Path(root)
    paths = []
    for s in range(n_speakers):
        for u in range(utts_per_speaker):
            rng = np.random.default_rng([seed, s, u])
            wav = synth_utterance(voices[s], rng, rng.uniform(min_dur, max_dur))
            path = root / f"spk{s:02d}" / f"utt{u:03d}.wav"
            write_wav(path, wav)
            paths.append(path)
    return paths
