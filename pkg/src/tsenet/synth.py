"""Synthetic harmonic "speakers" so the pipeline runs without licensed speech.

A speaker is a base F0, a spectral envelope (a few resonances) and a
characteristic vibrato. An utterance is a run of voiced syllables with gliding
F0 separated by short pauses.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, AudioSignal, Utterance, UtteranceManifest, write_wav


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    gender: str
    f0: float
    formants: tuple[float, ...]
    bandwidths: tuple[float, ...]
    vibrato_hz: float
    vibrato_depth: float


def make_speakers(n_male: int = 2, n_female: int = 2, seed: int = 0,
                  prefix: str = "spk") -> list[SyntheticSpeaker]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_male + n_female):
        gender = "m" if k < n_male else "f"
        f0 = rng.uniform(95, 140) if gender == "m" else rng.uniform(180, 260)
        formants = tuple(sorted(rng.uniform(lo, hi) for lo, hi in ((300, 900), (900, 2200), (2200, 3400))))
        bandwidths = tuple(rng.uniform(80, 250, size=3))
        out.append(SyntheticSpeaker(f"{prefix}{k:02d}", gender, float(f0), formants, bandwidths,
                                    float(rng.uniform(3, 7)), float(rng.uniform(0.01, 0.04))))
    return out


def _envelope(freqs: np.ndarray, spk: SyntheticSpeaker) -> np.ndarray:
    amp = np.zeros_like(freqs)
    for fc, bw in zip(spk.formants, spk.bandwidths):
        amp += 1.0 / (1.0 + ((freqs - fc) / bw) ** 2)
    return amp + 0.02


def synth_utterance(spk: SyntheticSpeaker, duration: float, rng: np.random.Generator,
                    sample_rate: int = SAMPLE_RATE, peak: float = 0.3) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    # syllable layout: voiced spans of 0.15-0.4 s separated by 0.03-0.12 s pauses
    gate = np.zeros(n)
    contour = np.full(n, spk.f0)
    pos = int(rng.uniform(0.0, 0.05) * sample_rate)
    while pos < n:
        length = int(rng.uniform(0.15, 0.4) * sample_rate)
        end = min(n, pos + length)
        span = end - pos
        ramp = np.hanning(2 * min(200, span // 2) + 1)
        g = np.ones(span)
        h = ramp.size // 2
        if h:
            g[:h] = ramp[:h]
            g[-h:] = ramp[-h:]
        gate[pos:end] = g * rng.uniform(0.6, 1.0)
        contour[pos:end] = spk.f0 * (1 + rng.uniform(-0.12, 0.12) * np.linspace(-1, 1, span) + rng.uniform(-0.08, 0.08))
        pos = end + int(rng.uniform(0.03, 0.12) * sample_rate)
    f0 = contour * (1 + spk.vibrato_depth * np.sin(2 * np.pi * spk.vibrato_hz * t))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    x = np.zeros(n)
    n_harm = int((sample_rate / 2 - 100) // spk.f0)
    for h in range(1, n_harm + 1):
        fh = h * f0
        amp = _envelope(fh, spk) * (fh < sample_rate / 2 - 50)
        x += amp * np.sin(h * phase) / np.sqrt(h)
    x *= gate
    x += 1e-4 * rng.standard_normal(n)
    return peak * x / np.max(np.abs(x))


def make_corpus(out_dir, n_male: int = 2, n_female: int = 2, utts_per_speaker: int = 4,
                min_dur: float = 1.0, max_dur: float = 2.0, seed: int = 0,
                prefix: str = "spk") -> UtteranceManifest:
    """Write WAVs plus an ``utterances.csv`` manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = UtteranceManifest()
    for spk in make_speakers(n_male, n_female, seed, prefix):
        for u in range(utts_per_speaker):
            dur = rng.uniform(min_dur, max_dur)
            x = synth_utterance(spk, dur, rng)
            path = out_dir / f"{spk.speaker_id}_u{u:02d}.wav"
            write_wav(path, AudioSignal(x))
            manifest.add(Utterance(str(path), spk.speaker_id, spk.gender))
    manifest.write_csv(out_dir / "utterances.csv")
    return manifest
