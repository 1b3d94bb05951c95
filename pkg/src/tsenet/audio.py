"""Waveform I/O, SNR-controlled mixing and spectrogram export.

All signals are mono and carried as :class:`AudioSignal`. The pipeline runs at
8 kHz; readers can be told to accept other rates.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SAMPLE_RATE = 8000
_INT16_SCALE = 32768.0


class AudioError(ValueError):
    """Raised for malformed audio input or invalid mixing requests."""


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise AudioError("samples contain NaN or Inf")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass
class MixtureSpec:
    target_utterance: str
    interference_utterances: list[str]
    snr_db: float
    seed: int


@dataclass
class MixtureRecord:
    mixture: AudioSignal
    target_source: AudioSignal
    interference_sources: list[AudioSignal]
    target_utterance: str
    interference_utterances: list[str]
    reference_utterance: str
    snr_db: float
    gender_pair: str
    id: str = ""
    speaker_id: str = ""

    def __post_init__(self):
        n = len(self.mixture)
        sr = self.mixture.sample_rate_hz
        for s in [self.target_source, *self.interference_sources]:
            if len(s) != n or s.sample_rate_hz != sr:
                raise AudioError("all signals in a mixture record must share length and rate")
        if self.reference_utterance == self.target_utterance:
            raise AudioError("reference utterance must differ from the target utterance")
        if self.gender_pair not in ("diff", "same"):
            raise AudioError(f"gender_pair must be 'diff' or 'same', got {self.gender_pair!r}")


# ---------------------------------------------------------------------------
# WAV I/O


def read_wav(path, *, expected_rate: int | None = SAMPLE_RATE) -> AudioSignal:
    """Read a 16-bit PCM mono WAV file.

    Samples are scaled by 1/32768. Pass ``expected_rate=None`` to accept any
    sample rate.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise AudioError(f"unsupported encoding in {path}: {exc}") from exc
    if n_channels != 1:
        raise AudioError(f"non-mono input: {path} has {n_channels} channels")
    if width != 2:
        raise AudioError(f"unsupported encoding: {8 * width}-bit samples in {path}")
    if expected_rate is not None and rate != expected_rate:
        raise AudioError(f"sample rate {rate} Hz in {path}, expected {expected_rate} Hz")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _INT16_SCALE
    return AudioSignal(data, rate)


def write_wav(path, signal: AudioSignal) -> None:
    """Write ``signal`` as 16-bit PCM. Out-of-range samples are hard-clipped."""
    x = signal.samples
    scaled = np.round(x * _INT16_SCALE)
    lo, hi = -32768, 32767
    n_clip = int(np.count_nonzero((scaled < lo) | (scaled > hi)))
    if n_clip:
        log.warning("event=clip clipped=%d samples=%d path=%s", n_clip, x.size, path)
    pcm = np.clip(scaled, lo, hi).astype("<i2")
    path = Path(path)
    try:
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(signal.sample_rate_hz)
            fh.writeframes(pcm.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write WAV file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# mixing


def signal_power(signal: AudioSignal) -> float:
    """Mean squared amplitude."""
    if len(signal) == 0:
        raise AudioError("power of an empty signal is undefined")
    x = signal.samples
    return float(np.dot(x, x) / x.size)


def snr_gain(target: AudioSignal, interference: AudioSignal, snr_db: float) -> float:
    """Gain to apply to ``interference`` so the pair sits at ``snr_db``."""
    if not np.isfinite(snr_db):
        raise AudioError(f"snr_db must be finite, got {snr_db}")
    p_t = signal_power(target)
    p_i = signal_power(interference)
    if p_t <= 0 or p_i <= 0:
        raise AudioError("cannot set SNR with a zero-power target or interference")
    return float(np.sqrt(p_t / p_i) * 10.0 ** (-snr_db / 20.0))


def scale_to_snr(target: AudioSignal, interference: AudioSignal, snr_db: float) -> AudioSignal:
    """Rescale ``interference`` so that 10 log10(P_target / P_interf) == snr_db.

    Powers are taken over each signal's own unpadded extent.
    """
    g = snr_gain(target, interference, snr_db)
    return AudioSignal(g * interference.samples, interference.sample_rate_hz)


def pad_to(signal: AudioSignal, length: int) -> AudioSignal:
    """Zero-pad at the tail up to ``length`` samples."""
    n = len(signal)
    if n > length:
        raise AudioError(f"cannot pad a {n}-sample signal down to {length}")
    if n == length:
        return signal
    return AudioSignal(np.concatenate([signal.samples, np.zeros(length - n)]), signal.sample_rate_hz)


def mix(target: AudioSignal, interferences: Sequence[AudioSignal]):
    """Sum target and (already scaled) interferences, tail-padding to the longest.

    Returns ``(mixture, padded_target, padded_interferences)``.
    """
    rate = target.sample_rate_hz
    if any(s.sample_rate_hz != rate for s in interferences):
        raise AudioError("sample-rate mismatch between mixture inputs")
    length = max(len(target), *(len(s) for s in interferences)) if interferences else len(target)
    tgt = pad_to(target, length)
    itf = [pad_to(s, length) for s in interferences]
    total = tgt.samples.copy()
    for s in itf:
        total += s.samples
    return AudioSignal(total, rate), tgt, itf


# ---------------------------------------------------------------------------
# corpus simulation


@dataclass
class Utterance:
    path: str
    speaker_id: str
    gender: str

    @property
    def utterance_id(self) -> str:
        return Path(self.path).stem


@dataclass
class UtteranceManifest:
    """Speaker id -> utterances, with a gender label per speaker."""

    speakers: dict[str, list[Utterance]] = field(default_factory=dict)

    def add(self, utt: Utterance):
        self.speakers.setdefault(utt.speaker_id, []).append(utt)

    def gender(self, speaker_id: str) -> str:
        return self.speakers[speaker_id][0].gender

    def speaker_ids(self) -> list[str]:
        return sorted(self.speakers)

    def all_utterances(self) -> list[Utterance]:
        return [u for spk in self.speaker_ids() for u in self.speakers[spk]]

    @classmethod
    def read_csv(cls, path) -> "UtteranceManifest":
        path = Path(path)
        out = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"speaker_id", "gender", "path"} - set(reader.fieldnames or [])
            if missing:
                raise AudioError(f"utterance manifest {path} lacks columns {sorted(missing)}")
            for row in reader:
                p = Path(row["path"])
                if not p.is_absolute():
                    p = path.parent / p
                out.add(Utterance(str(p), row["speaker_id"], row["gender"]))
        return out

    def write_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["speaker_id", "gender", "path"])
            for u in self.all_utterances():
                w.writerow([u.speaker_id, u.gender, relative_to(u.path, path.parent)])


def _record_rng(seed: int, index: int) -> np.random.Generator:
    # one counter-based stream per record so records can be built in any order
    return np.random.Generator(np.random.Philox(key=seed, counter=index))


def draw_mixture_specs(manifest: UtteranceManifest, count: int, snr_low: float,
                       snr_high: float, seed: int) -> list[dict]:
    """Sample (target, interference, reference, snr) tuples without touching audio."""
    if snr_high < snr_low:
        raise AudioError(f"empty SNR range [{snr_low}, {snr_high}]")
    speakers = manifest.speaker_ids()
    if len(speakers) < 2:
        raise AudioError("corpus simulation needs at least two speakers")
    eligible = [s for s in speakers if len(manifest.speakers[s]) >= 2]
    if not eligible:
        raise AudioError("no speaker has the two utterances needed for target + reference")

    specs = []
    for i in range(count):
        rng = _record_rng(seed, i)
        for _ in range(1000):
            a, b = rng.choice(len(speakers), size=2, replace=False)
            tgt_spk, itf_spk = speakers[a], speakers[b]
            if len(manifest.speakers[tgt_spk]) >= 2:
                break
        else:
            raise AudioError("could not draw a target speaker with a spare reference utterance")
        tgt_utts = manifest.speakers[tgt_spk]
        itf_utts = manifest.speakers[itf_spk]
        ti = int(rng.integers(len(tgt_utts)))
        ii = int(rng.integers(len(itf_utts)))
        rest = [j for j in range(len(tgt_utts)) if j != ti]
        ri = rest[int(rng.integers(len(rest)))]
        snr = float(rng.uniform(snr_low, snr_high))
        g_pair = "same" if manifest.gender(tgt_spk) == manifest.gender(itf_spk) else "diff"
        specs.append(dict(
            id=f"mix{i:05d}",
            target=tgt_utts[ti],
            interference=itf_utts[ii],
            reference=tgt_utts[ri],
            snr_db=snr,
            gender_pair=g_pair,
            seed=seed,
        ))
    return specs


def simulate_corpus(manifest: UtteranceManifest, count: int, snr_low: float = 0.0,
                    snr_high: float = 5.0, seed: int = 0, loader=None) -> list[MixtureRecord]:
    """Simulate ``count`` two-speaker mixtures.

    For each record two distinct speakers are drawn uniformly; the first is the
    target. The interference is scaled to an SNR drawn uniformly from
    ``[snr_low, snr_high]`` and the mixture spans the longer utterance. The
    reference is another utterance of the target speaker.
    """
    loader = loader or read_wav
    cache: dict[str, AudioSignal] = {}

    def load(u: Utterance):
        if u.path not in cache:
            cache[u.path] = loader(u.path)
        return cache[u.path]

    records = []
    for spec in draw_mixture_specs(manifest, count, snr_low, snr_high, seed):
        tgt_u, itf_u, ref_u = spec["target"], spec["interference"], spec["reference"]
        tgt = load(tgt_u)
        itf = scale_to_snr(tgt, load(itf_u), spec["snr_db"])
        mixture, tgt_p, itf_p = mix(tgt, [itf])
        records.append(MixtureRecord(
            mixture=mixture,
            target_source=tgt_p,
            interference_sources=itf_p,
            target_utterance=tgt_u.path,
            interference_utterances=[itf_u.path],
            reference_utterance=ref_u.path,
            snr_db=spec["snr_db"],
            gender_pair=spec["gender_pair"],
            id=spec["id"],
            speaker_id=tgt_u.speaker_id,
        ))
    return records


def write_corpus(records: Sequence[MixtureRecord], out_dir) -> Path:
    """Write mixture/target/interference WAVs and a JSON-lines mixture manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "mixtures.jsonl"
    with open(manifest_path, "w") as fh:
        for rec in records:
            mix_p = out_dir / f"{rec.id}_mix.wav"
            tgt_p = out_dir / f"{rec.id}_target.wav"
            write_wav(mix_p, rec.mixture)
            write_wav(tgt_p, rec.target_source)
            itf_paths = []
            for j, s in enumerate(rec.interference_sources):
                p = out_dir / f"{rec.id}_interf{j}.wav"
                write_wav(p, s)
                itf_paths.append(relative_to(p, out_dir))
            row = {
                "id": rec.id,
                "mixture_path": relative_to(mix_p, out_dir),
                "target_path": relative_to(tgt_p, out_dir),
                "interf_paths": itf_paths,
                "reference_path": relative_to(rec.reference_utterance, out_dir),
                "snr_db": rec.snr_db,
                "gender_pair": rec.gender_pair,
                "speaker_id": rec.speaker_id,
            }
            fh.write(json.dumps(row) + "\n")
    return manifest_path


PATH_FIELDS = ("mixture_path", "target_path", "reference_path", "est_path")


def relative_to(path, base) -> str:
    """``path`` spelled relative to directory ``base`` (manifests store these)."""
    return os.path.relpath(os.path.abspath(path), os.path.abspath(base))


def read_jsonl(path) -> list[dict]:
    """JSON-lines manifest; relative paths in known path fields are resolved
    against the manifest's directory."""
    base = Path(path).parent
    rows = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            for key in PATH_FIELDS:
                if key in row:
                    row[key] = str(base / row[key])
            if "interf_paths" in row:
                row["interf_paths"] = [str(base / p) for p in row["interf_paths"]]
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# spectrogram

LOG_EPS = 1e-12


def log_spectrogram(signal: AudioSignal, win_samples: int = 256, hop_samples: int = 128) -> np.ndarray:
    """Frames x bins matrix of log(|DFT| + 1e-12) over Hamming-windowed frames."""
    if not win_samples >= hop_samples > 0:
        raise AudioError("need win_samples >= hop_samples > 0")
    x = signal.samples
    if x.size < win_samples:
        raise AudioError(f"signal of {x.size} samples is shorter than one {win_samples}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, win_samples)[::hop_samples]
    spec = np.fft.rfft(frames * np.hamming(win_samples), axis=1)
    return np.log(np.abs(spec) + LOG_EPS)


def save_spectrogram_csv(spec: np.ndarray, path):
    np.savetxt(path, spec, delimiter=",", fmt="%.6f")


def save_spectrogram_pgm(spec: np.ndarray, path):
    """Binary 8-bit PGM, frequency increasing upward, time left to right."""
    lo, hi = float(spec.min()), float(spec.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.round((spec - lo) * scale).astype(np.uint8).T[::-1]
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())
