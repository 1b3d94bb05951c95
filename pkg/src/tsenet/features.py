"""MFCC + energy features for the i-vector front end.

Pipeline per utterance: 19 MFCCs and log energy from 25 ms Hamming frames
every 10 ms, regression deltas and delta-deltas (60 dims), 3 s sliding mean
normalization, then energy VAD to drop silent frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .audio import AudioSignal

ENERGY_FLOOR = 1e-10
N_FEATS = 60


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FrameConfig:
    win_samples: int = 200
    hop_samples: int = 80
    n_mels: int = 23
    n_ceps: int = 19
    preemph: float = 0.97
    sample_rate_hz: int = 8000
    vad_threshold_db: float = 30.0
    cmn_window: int = 301

    def __post_init__(self):
        if not self.win_samples > self.hop_samples > 0:
            raise FeatureError("need win_samples > hop_samples > 0")
        if not self.n_ceps < self.n_mels:
            raise FeatureError("need n_ceps < n_mels")

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_samples - 1).bit_length()


def frame_count(n_samples: int, win: int, hop: int) -> int:
    return (n_samples - win) // hop + 1


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, f_lo: float = 0.0,
                   f_hi: float | None = None) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_mels, n_fft // 2 + 1)."""
    f_hi = sample_rate / 2 if f_hi is None else f_hi
    edges = _mel_to_hz(np.linspace(_hz_to_mel(f_lo), _hz_to_mel(f_hi), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        left, centre, right = edges[m], edges[m + 1], edges[m + 2]
        up = (bins - left) / (centre - left)
        down = (right - bins) / (right - centre)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def extract_mfcc_energy(signal: AudioSignal, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """Frames x 20 matrix: cepstra c1..c19 followed by log frame energy."""
    x = signal.samples
    if x.size < cfg.win_samples:
        raise FeatureError(f"signal of {x.size} samples is shorter than one frame ({cfg.win_samples})")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_samples)[::cfg.hop_samples]
    window = np.hamming(cfg.win_samples)

    energy = np.sum((frames * window) ** 2, axis=1)
    log_energy = np.log(np.maximum(energy, ENERGY_FLOOR))

    emph = frames.copy()
    emph[:, 1:] -= cfg.preemph * frames[:, :-1]
    emph[:, 0] -= cfg.preemph * frames[:, 0]
    power = np.abs(np.fft.rfft(emph * window, n=cfg.n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate_hz)
    log_mel = np.log(np.maximum(power @ fb.T, ENERGY_FLOOR))
    ceps = dct(log_mel, type=2, norm="ortho", axis=1)[:, 1:cfg.n_ceps + 1]
    return np.hstack([ceps, log_energy[:, None]])


def deltas(feats: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-width frames with replicated edges."""
    n = feats.shape[0]
    padded = np.concatenate([np.repeat(feats[:1], width, 0), feats, np.repeat(feats[-1:], width, 0)])
    denom = 2 * sum(k * k for k in range(1, width + 1))
    out = np.zeros_like(feats, dtype=np.float64)
    for k in range(1, width + 1):
        out += k * (padded[width + k:width + k + n] - padded[width - k:width - k + n])
    return out / denom


def append_deltas(feats: np.ndarray) -> np.ndarray:
    if feats.shape[0] < 5:
        raise FeatureError(f"need at least 5 frames for deltas, got {feats.shape[0]}")
    d1 = deltas(feats)
    d2 = deltas(d1)
    return np.hstack([feats, d1, d2])


def energy_vad(feats: np.ndarray, threshold_db: float = 30.0, energy_col: int = 19) -> np.ndarray:
    """Boolean speech mask: log energy within ``threshold_db`` of the utterance max.

    Frames sitting at the energy floor are digital silence and never count as
    speech; if nothing else is left the single loudest frame is kept.
    """
    e = feats[:, energy_col]
    if e.size == 0:
        return np.zeros(0, dtype=bool)
    if np.isinf(threshold_db):
        return np.ones(e.size, dtype=bool)
    mask = (e >= e.max() - threshold_db * np.log(10.0) / 10.0) & (e > np.log(ENERGY_FLOOR))
    if not mask.any():
        mask[int(np.argmax(e))] = True
    return mask


def sliding_cmn(feats: np.ndarray, window_frames: int = 301) -> np.ndarray:
    """Subtract the mean over a centred window, clipped at the utterance edges."""
    n = feats.shape[0]
    if n == 0:
        return feats.copy()
    half = window_frames // 2
    csum = np.vstack([np.zeros((1, feats.shape[1])), np.cumsum(feats, axis=0, dtype=np.float64)])
    t = np.arange(n)
    lo = np.maximum(t - half, 0)
    hi = np.minimum(t + half + 1, n)
    means = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return feats - means


def pipeline(signal: AudioSignal, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """MFCC+energy -> deltas -> sliding CMN -> keep VAD speech frames.

    VAD runs on the raw log energy, before normalization.
    """
    base = extract_mfcc_energy(signal, cfg)
    speech = energy_vad(base, cfg.vad_threshold_db)
    full = sliding_cmn(append_deltas(base), cfg.cmn_window)
    return full[speech]


# ---------------------------------------------------------------------------
# archive format: per record <u32 id_len><id utf-8><u32 frames><frames*60 f32>,
# all little-endian; the index is a TSV of utterance id, byte offset, frames.


def write_archive(feats: dict[str, np.ndarray], path) -> Path:
    path = Path(path)
    index_path = path.with_suffix(path.suffix + ".idx")
    with open(path, "wb") as fh, open(index_path, "w") as idx:
        for utt_id, mat in feats.items():
            mat = np.asarray(mat)
            if mat.ndim != 2 or mat.shape[1] != N_FEATS:
                raise FeatureError(f"{utt_id}: expected (frames, {N_FEATS}) features, got {mat.shape}")
            offset = fh.tell()
            key = utt_id.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", mat.shape[0]))
            fh.write(mat.astype("<f4").tobytes())
            idx.write(f"{utt_id}\t{offset}\t{mat.shape[0]}\n")
    return index_path


def read_archive(path) -> dict[str, np.ndarray]:
    out = {}
    data = Path(path).read_bytes()
    pos = 0
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        utt_id = data[pos:pos + n].decode("utf-8")
        pos += n
        (frames,) = struct.unpack_from("<I", data, pos)
        pos += 4
        size = frames * N_FEATS * 4
        if pos + size > len(data):
            raise FeatureError(f"truncated feature archive at record {utt_id!r}")
        mat = np.frombuffer(data, dtype="<f4", count=frames * N_FEATS, offset=pos)
        out[utt_id] = mat.reshape(frames, N_FEATS).astype(np.float64)
        pos += size
    return out


def dump_csv(feats: dict[str, np.ndarray], path):
    with open(path, "w") as fh:
        fh.write("utterance_id,frame," + ",".join(f"f{i}" for i in range(N_FEATS)) + "\n")
        for utt_id, mat in feats.items():
            for t, row in enumerate(mat):
                fh.write(f"{utt_id},{t}," + ",".join(f"{v:.6g}" for v in row) + "\n")
