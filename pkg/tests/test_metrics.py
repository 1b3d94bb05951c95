import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsenet import audio, metrics
from tsenet.audio import AudioSignal
from tsenet.trainer import si_sdr


def _delay_matrix(refs, taps):
    n = refs.shape[1]
    cols = []
    for r in refs:
        for d in range(taps):
            col = np.zeros(n + taps - 1)
            col[d:d + n] = r
            cols.append(col)
    return np.stack(cols, axis=1)


def _sdr_oracle(est, refs, taps):
    """Dense least squares on explicit delay matrices."""
    e = np.concatenate([est, np.zeros(taps - 1)])
    A_t = _delay_matrix(refs[:1], taps)
    s_t = A_t @ np.linalg.lstsq(A_t, e, rcond=None)[0]
    A = _delay_matrix(refs, taps)
    p_all = A @ np.linalg.lstsq(A, e, rcond=None)[0]
    err = e - s_t  # interference + artifacts
    assert np.allclose(err, (p_all - s_t) + (e - p_all))
    return 10 * np.log10(s_t @ s_t / (err @ err))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), taps=st.integers(1, 8), n_src=st.integers(1, 3))
def test_sdr_matches_dense_least_squares(seed, taps, n_src):
    r = np.random.default_rng(seed)
    refs = r.standard_normal((n_src, 120))
    est = refs[0] + 0.3 * r.standard_normal(120) + (0.5 * refs[1] if n_src > 1 else 0)
    assert metrics.sdr_bsseval(est, refs, taps) == pytest.approx(_sdr_oracle(est, refs, taps), abs=1e-6)


def test_identity_hits_the_cap(rng):
    s = rng.standard_normal(500)
    assert metrics.sdr_bsseval(s, [s], taps=16) == metrics.SI_SDR_CAP == 120


def test_orthogonal_noise_at_power_ratio_ten(rng):
    s = rng.standard_normal(4000)
    n = rng.standard_normal(4000)
    n -= (n @ s) / (s @ s) * s
    n *= np.sqrt((s @ s) / 10 / (n @ n))
    assert metrics.sdr_bsseval(s + n, [s], taps=1) == pytest.approx(10.0, abs=0.01)


def test_single_reference_taps_one_equals_si_sdr(rng):
    s = rng.standard_normal(2000)
    s -= s.mean()
    e = 0.7 * s + 0.4 * rng.standard_normal(2000)
    e -= e.mean()
    assert metrics.sdr_bsseval(e, [s], taps=1) == pytest.approx(si_sdr(e, s), abs=1e-6)


def test_short_filter_of_reference_is_allowed_distortion(rng):
    s = rng.standard_normal(3000)
    est = np.convolve(s, [1.0, -0.5, 0.25])[:3000]
    assert metrics.sdr_bsseval(est, [s], taps=1) < 10
    assert metrics.sdr_bsseval(est, [s], taps=8) > 40


def test_sdr_errors(rng):
    s = rng.standard_normal(100)
    with pytest.raises(metrics.MetricError, match="samples"):
        metrics.sdr_bsseval(s[:50], [s])
    with pytest.raises(metrics.MetricError, match="singular"):
        metrics.sdr_bsseval(s, [np.zeros(100)])
    with pytest.raises(metrics.MetricError, match="target"):
        metrics.sdr_bsseval(s, [np.zeros(100), s])
    with pytest.raises(metrics.MetricError):
        metrics.sdr_bsseval(s, [s], taps=0)


@pytest.mark.parametrize("snr, label", [(0.0, "[0, 1)"), (0.999, "[0, 1)"), (1.0, "[1, 3)"), (3.0, "[3, 5]"),
                                        (5.0, "[3, 5]"), (5.01, None), (-0.1, None)])
def test_snr_bins(snr, label):
    assert metrics.snr_bin(snr) == label


def _report():
    rows = [metrics.EvalRow("m0", 10.0, 11.0, "diff", 0.5), metrics.EvalRow("m1", 6.0, 7.0, "same", 2.0),
            metrics.EvalRow("m2", 8.0, 9.0, "diff", 4.0)]
    mix = [metrics.EvalRow(r.id, 1.0, 2.0, r.gender_pair, r.snr_db) for r in rows]
    return metrics.EvalReport(rows, mix)


def test_report_summary_and_tables():
    rep = _report()
    s = rep.summary()
    assert s["TseNet"]["overall"]["sdr"] == pytest.approx(9.0)
    assert s["TseNet"]["diff"]["si_sdr"] == pytest.approx(9.0)
    assert s["TseNet"]["same"]["count"] == 1
    assert s["TseNet"]["[3, 5]"]["sdr"] == pytest.approx(9.0)
    text = rep.format_tables("9.0M")
    lines = text.splitlines()
    assert lines[0] == "Table 1: overall"
    assert "Table 2: different vs same gender" in lines and "Table 3: SDR by mixture SNR (dB)" in lines
    for header in ("#Paras", "SDR Diff.", "SI-SDR Same", "[0, 1)", "[3, 5]"):
        assert header in text
    mixture_lines = [ln for ln in lines if ln.startswith("|") and "Mixture" in ln]
    assert len(mixture_lines) == 3
    assert "9.0M" in next(ln for ln in lines if "TseNet" in ln)


def test_report_csv():
    csv_text = _report().to_csv().splitlines()
    assert csv_text[0] == "id,si_sdr,sdr,gender_pair,snr_db"
    assert csv_text[1].startswith("m0,10.000000,11.000000,diff,")


def test_evaluate_corpus_and_alignment(tmp_path, manifest):
    recs = audio.simulate_corpus(manifest, 3, seed=2)
    mix_manifest = audio.write_corpus(recs, tmp_path / "mix")
    est_dir = tmp_path / "est"
    est_dir.mkdir()
    with open(est_dir / "estimates.jsonl", "w") as fh:
        for r in recs:
            audio.write_wav(est_dir / f"{r.id}.wav", r.target_source)
            fh.write(json.dumps({"id": r.id, "est_path": f"{r.id}.wav"}) + "\n")
    rep = metrics.evaluate_corpus(est_dir / "estimates.jsonl", mix_manifest, taps=8)
    assert [r.id for r in rep.rows] == [r.id for r in recs]
    assert all(r.si_sdr_db == 120 for r in rep.rows)
    for r, m in zip(recs, rep.mixture_rows):
        assert m.si_sdr_db == pytest.approx(si_sdr(r.mixture, r.target_source), abs=1e-3)  # 16-bit storage
    metrics.write_report(rep, tmp_path / "rep", "1K")
    assert (tmp_path / "rep" / "report.txt").read_text().startswith("Table 1")

    with open(est_dir / "estimates.jsonl", "a") as fh:
        fh.write(json.dumps({"id": "ghost", "est_path": "x.wav"}) + "\n")
    with pytest.raises(metrics.MetricError, match="align"):
        metrics.evaluate_corpus(est_dir / "estimates.jsonl", mix_manifest)


def test_accepts_audio_signals(rng):
    s = rng.standard_normal(300)
    assert metrics.sdr_bsseval(AudioSignal(s), [AudioSignal(s)], taps=2) == 120
