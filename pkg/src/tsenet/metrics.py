"""Evaluation metrics and the corpus report.

SDR follows the BSS-eval decomposition: the estimate is projected onto the
span of the target reference and its first ``taps - 1`` delays (the allowed
distortion filter); projecting onto all references' delays and subtracting
gives the interference; the remainder is artifacts.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, signal

from .audio import read_jsonl, read_wav
from .trainer import SI_SDR_CAP, si_sdr

RIDGE = 1e-10
SNR_BINS = ((0.0, 1.0, "[0, 1)"), (1.0, 3.0, "[1, 3)"), (3.0, 5.0, "[3, 5]"))


class MetricError(ValueError):
    pass


def _ratio_db(num: float, den: float) -> float:
    if den <= num * 10.0 ** (-SI_SDR_CAP / 10.0):
        return SI_SDR_CAP
    return float(10.0 * np.log10(num / den))


def _delay_gram(refs: np.ndarray, taps: int, n_fft: int) -> np.ndarray:
    """Gram matrix of all references and their delays 0..taps-1 (block Toeplitz)."""
    n_src = refs.shape[0]
    spec = np.fft.rfft(refs, n=n_fft)
    gram = np.zeros((n_src * taps, n_src * taps))
    for i in range(n_src):
        for j in range(i, n_src):
            xcorr = np.fft.irfft(np.conj(spec[i]) * spec[j], n=n_fft)
            # <delay_a(ref_i), delay_b(ref_j)> = xcorr_ij[b - a] (circular index)
            col = xcorr[(-np.arange(taps)) % n_fft]
            row = xcorr[np.arange(taps)]
            block = linalg.toeplitz(col, row)
            gram[i * taps:(i + 1) * taps, j * taps:(j + 1) * taps] = block
            gram[j * taps:(j + 1) * taps, i * taps:(i + 1) * taps] = block.T
    return gram


def _project(est: np.ndarray, refs: np.ndarray, taps: int) -> np.ndarray:
    """Least-squares projection of ``est`` (length T) onto delayed ``refs``; length T + taps - 1."""
    n_src, n = refs.shape
    total = n + taps - 1
    n_fft = 1 << (total - 1).bit_length()
    gram = _delay_gram(refs, taps, n_fft)
    spec_e = np.fft.rfft(est, n=n_fft)
    rhs = np.zeros(n_src * taps)
    for i in range(n_src):
        xc = np.fft.irfft(np.conj(np.fft.rfft(refs[i], n=n_fft)) * spec_e, n=n_fft)
        rhs[i * taps:(i + 1) * taps] = xc[:taps]
    ridge = RIDGE * max(float(np.mean(np.diag(gram))), np.finfo(float).tiny)
    try:
        coef = linalg.cho_solve(linalg.cho_factor(gram + ridge * np.eye(gram.shape[0])), rhs)
    except linalg.LinAlgError as exc:
        raise MetricError("singular projection: references are degenerate") from exc
    coef = coef.reshape(n_src, taps)
    proj = np.zeros(total)
    for i in range(n_src):
        proj += signal.fftconvolve(refs[i], coef[i])[:total]
    return proj


def sdr_bsseval(est, refs: Sequence, taps: int = 512, target_index: int = 0) -> float:
    """BSS-eval SDR of ``est`` against ``refs[target_index]``, capped at +120 dB."""
    e = np.asarray(getattr(est, "samples", est), dtype=np.float64).reshape(-1)
    R = np.stack([np.asarray(getattr(r, "samples", r), dtype=np.float64).reshape(-1) for r in refs])
    if R.shape[1] != e.size:
        raise MetricError(f"estimate has {e.size} samples, references {R.shape[1]}")
    if taps < 1:
        raise MetricError("taps must be >= 1")
    if not np.any(R):
        raise MetricError("singular projection: all references are zero")
    if not np.any(R[target_index]):
        raise MetricError("singular projection: target reference is zero")
    s_target = _project(e, R[target_index:target_index + 1], taps)
    if R.shape[0] > 1:
        e_interf = _project(e, R, taps) - s_target
    else:
        e_interf = np.zeros_like(s_target)
    e_pad = np.concatenate([e, np.zeros(taps - 1)])
    e_artif = e_pad - s_target - e_interf
    err = e_interf + e_artif
    return _ratio_db(float(np.dot(s_target, s_target)), float(np.dot(err, err)))


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalRow:
    id: str
    si_sdr_db: float
    sdr_db: float
    gender_pair: str
    snr_db: float


def snr_bin(snr_db: float) -> str | None:
    for lo, hi, label in SNR_BINS:
        if lo <= snr_db < hi or (hi == SNR_BINS[-1][1] and snr_db == hi):
            return label
    return None


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else float("nan")


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mixture_rows: list[EvalRow] = field(default_factory=list)
    method: str = "TseNet"

    @staticmethod
    def _summary(rows: list[EvalRow]) -> dict:
        out = {"overall": {"sdr": _mean(r.sdr_db for r in rows), "si_sdr": _mean(r.si_sdr_db for r in rows),
                           "count": len(rows)}}
        for g in ("diff", "same"):
            sel = [r for r in rows if r.gender_pair == g]
            out[g] = {"sdr": _mean(r.sdr_db for r in sel), "si_sdr": _mean(r.si_sdr_db for r in sel),
                      "count": len(sel)}
        for _, _, label in SNR_BINS:
            sel = [r for r in rows if snr_bin(r.snr_db) == label]
            out[label] = {"sdr": _mean(r.sdr_db for r in sel), "si_sdr": _mean(r.si_sdr_db for r in sel),
                          "count": len(sel)}
        return out

    def summary(self) -> dict:
        return {"Mixture": self._summary(self.mixture_rows), self.method: self._summary(self.rows)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "si_sdr", "sdr", "gender_pair", "snr_db"])
        for r in self.rows:
            w.writerow([r.id, f"{r.si_sdr_db:.6f}", f"{r.sdr_db:.6f}", r.gender_pair, f"{r.snr_db:.6f}"])
        return buf.getvalue()

    def format_tables(self, n_params: str = "-") -> str:
        s = self.summary()
        names = ["Mixture", self.method]
        width = max(len(n) for n in names) + 2

        def line(cells):
            return "| " + " | ".join(cells) + " |"

        out = ["Table 1: overall", line(["Methods".rjust(width), "#Paras", "   SDR", "SI-SDR"])]
        for n in names:
            paras = "-" if n == "Mixture" else n_params
            out.append(line([n.rjust(width), paras.rjust(6), f"{s[n]['overall']['sdr']:6.2f}",
                             f"{s[n]['overall']['si_sdr']:6.2f}"]))
        out += ["", "Table 2: different vs same gender",
                line(["Methods".rjust(width), "SDR Diff.", "SDR Same", "SI-SDR Diff.", "SI-SDR Same"])]
        for n in names:
            out.append(line([n.rjust(width), f"{s[n]['diff']['sdr']:9.2f}", f"{s[n]['same']['sdr']:8.2f}",
                             f"{s[n]['diff']['si_sdr']:12.2f}", f"{s[n]['same']['si_sdr']:11.2f}"]))
        out += ["", "Table 3: SDR by mixture SNR (dB)",
                line(["Methods".rjust(width)] + [label.center(7) for _, _, label in SNR_BINS])]
        for n in names:
            out.append(line([n.rjust(width)] + [f"{s[n][label]['sdr']:7.2f}" for _, _, label in SNR_BINS]))
        return "\n".join(out) + "\n"


def evaluate_pairs(items, taps: int = 512, method: str = "TseNet") -> EvalReport:
    """``items``: iterable of dicts with id, est, mixture, target, interferences, gender_pair, snr_db."""
    rows, mix_rows = [], []
    for it in items:
        refs = [it["target"], *it.get("interferences", [])]
        for est, bucket in ((it["est"], rows), (it["mixture"], mix_rows)):
            bucket.append(EvalRow(it["id"], si_sdr(est, it["target"]), sdr_bsseval(est, refs, taps),
                                  it["gender_pair"], float(it["snr_db"])))
    return EvalReport(rows, mix_rows, method)


def evaluate_corpus(est_manifest, mixture_manifest, taps: int = 512, method: str = "TseNet") -> EvalReport:
    """Score estimated WAVs against the targets of a simulated corpus.

    ``est_manifest`` is JSON-lines {id, est_path}; ``mixture_manifest`` is the
    corpus manifest written by the simulator.
    """
    ests = {row["id"]: row["est_path"] for row in read_jsonl(est_manifest)}
    mixtures = read_jsonl(mixture_manifest)
    ids = [m["id"] for m in mixtures]
    missing = sorted(set(ids) - set(ests))
    extra = sorted(set(ests) - set(ids))
    if missing or extra:
        raise MetricError(f"manifest ids do not align: missing estimates {missing[:5]}, unknown {extra[:5]}")

    def items():
        for m in mixtures:
            yield {
                "id": m["id"],
                "est": read_wav(ests[m["id"]]),
                "mixture": read_wav(m["mixture_path"]),
                "target": read_wav(m["target_path"]),
                "interferences": [read_wav(p) for p in m.get("interf_paths", [])],
                "gender_pair": m["gender_pair"],
                "snr_db": m["snr_db"],
            }
    return evaluate_pairs(items(), taps, method)


def write_report(report: EvalReport, out_dir, n_params: str = "-"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(report.to_csv())
    (out_dir / "report.txt").write_text(report.format_tables(n_params))
