import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsenet import features as F
from tsenet.audio import AudioSignal


def _mfcc_one_frame_by_hand(frame, cfg):
    """Direct-sum DFT and DCT for a single frame."""
    n = cfg.win_samples
    win = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / (n - 1))
    energy = np.log(max(np.sum((frame * win) ** 2), F.ENERGY_FLOOR))
    emph = np.array([frame[i] - cfg.preemph * frame[i - 1 if i else 0] for i in range(n)])
    padded = np.zeros(cfg.n_fft)
    padded[:n] = emph * win
    k = np.arange(cfg.n_fft // 2 + 1)[:, None]
    t = np.arange(cfg.n_fft)[None]
    spec = padded @ np.exp(-2j * np.pi * k * t / cfg.n_fft).T
    mel = F.mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate_hz) @ np.abs(spec) ** 2
    log_mel = np.log(np.maximum(mel, F.ENERGY_FLOOR))
    M = cfg.n_mels
    ceps = []
    for q in range(1, cfg.n_ceps + 1):
        scale = np.sqrt(2.0 / M)
        ceps.append(scale * sum(log_mel[m] * np.cos(np.pi * q * (2 * m + 1) / (2 * M)) for m in range(M)))
    return np.array(ceps + [energy])


def test_mfcc_matches_direct_sums(rng):
    cfg = F.FrameConfig()
    x = rng.standard_normal(1000) * 0.1
    feats = F.extract_mfcc_energy(AudioSignal(x), cfg)
    assert feats.shape == (F.frame_count(1000, 200, 80), 20)
    for idx in (0, 3, feats.shape[0] - 1):
        frame = x[idx * 80: idx * 80 + 200]
        np.testing.assert_allclose(feats[idx], _mfcc_one_frame_by_hand(frame, cfg), rtol=1e-9, atol=1e-9)


def test_energy_uses_floor_on_silence():
    feats = F.extract_mfcc_energy(AudioSignal(np.zeros(400)))
    assert np.all(feats[:, 19] == np.log(F.ENERGY_FLOOR))
    assert np.all(np.isfinite(feats))


def test_mel_filterbank_shape_and_peaks():
    fb = F.mel_filterbank(23, 256, 8000)
    assert fb.shape == (23, 129)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0)
    assert np.all(fb.max(axis=1) > 0.5)
    centres = np.argmax(fb, axis=1)
    assert np.all(np.diff(centres) >= 0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 4)), elements=st.floats(-10, 10)))
def test_deltas_match_regression_formula(x):
    n = x.shape[0]
    clamp = lambda i: min(max(i, 0), n - 1)  # noqa: E731
    expect = np.array([sum(k * (x[clamp(t + k)] - x[clamp(t - k)]) for k in (1, 2)) / 10.0 for t in range(n)])
    np.testing.assert_allclose(F.deltas(x), expect, atol=1e-12)


def test_deltas_of_a_ramp_are_one_in_the_interior():
    x = np.arange(20.0)[:, None]
    d = F.deltas(x)
    np.testing.assert_allclose(d[2:-2], 1.0)
    np.testing.assert_allclose(F.deltas(d)[4:-4], 0.0, atol=1e-12)


def test_append_deltas_needs_five_frames():
    with pytest.raises(F.FeatureError):
        F.append_deltas(np.zeros((4, 20)))
    assert F.append_deltas(np.zeros((5, 20))).shape == (5, 60)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), window=st.integers(1, 15), seed=st.integers(0, 1000))
def test_sliding_cmn_matches_loop(n, window, seed):
    x = np.random.default_rng(seed).standard_normal((n, 3))
    half = window // 2
    expect = np.array([x[t] - x[max(0, t - half):min(n, t + half + 1)].mean(axis=0) for t in range(n)])
    np.testing.assert_allclose(F.sliding_cmn(x, window), expect, atol=1e-12)


def test_vad_threshold_and_floor():
    floor = np.log(F.ENERGY_FLOOR)
    e = np.array([0.0, -3.0, -6.9, -7.0, floor])  # 30 dB is 6.9078 nepers of energy
    feats = np.zeros((5, 20))
    feats[:, 19] = e
    np.testing.assert_array_equal(F.energy_vad(feats), [True, True, True, False, False])


def test_vad_keeps_loudest_frame_of_all_silence():
    feats = np.zeros((4, 20))
    feats[:, 19] = np.log(F.ENERGY_FLOOR)
    mask = F.energy_vad(feats)
    assert mask.sum() == 1


def test_vad_infinite_threshold_keeps_everything():
    feats = np.zeros((4, 20))
    feats[:, 19] = [0, -100, -200, np.log(F.ENERGY_FLOOR)]
    assert F.energy_vad(feats, threshold_db=float("inf")).all()


def test_pipeline_drops_silence(rng):
    tone = 0.3 * np.sin(2 * np.pi * 300 * np.arange(4000) / 8000)
    x = np.concatenate([tone, np.zeros(4000), tone])
    base = F.extract_mfcc_energy(AudioSignal(x))
    out = F.pipeline(AudioSignal(x))
    assert out.shape[1] == 60
    starts = np.arange(base.shape[0]) * 80
    silent = np.sum((starts >= 4000) & (starts + 200 <= 8000))
    assert out.shape[0] == base.shape[0] - silent


def test_pipeline_rejects_short_input():
    with pytest.raises(F.FeatureError):
        F.pipeline(AudioSignal(np.ones(150)))


def test_frame_config_validation():
    with pytest.raises(F.FeatureError):
        F.FrameConfig(win_samples=80, hop_samples=80)
    with pytest.raises(F.FeatureError):
        F.FrameConfig(n_ceps=23, n_mels=23)
    assert F.FrameConfig().n_fft == 256


def test_archive_round_trip(tmp_path, rng):
    feats = {"a": rng.standard_normal((7, 60)), "ü-b": rng.standard_normal((1, 60))}
    idx = F.write_archive(feats, tmp_path / "f.ark")
    back = F.read_archive(tmp_path / "f.ark")
    assert list(back) == list(feats)
    for k in feats:
        np.testing.assert_array_equal(back[k], feats[k].astype(np.float32))
    lines = idx.read_text().splitlines()
    assert lines[0] == "a\t0\t7"
    F.dump_csv(back, tmp_path / "f.csv")
    assert len((tmp_path / "f.csv").read_text().splitlines()) == 1 + 8


def test_archive_rejects_wrong_width_and_truncation(tmp_path):
    with pytest.raises(F.FeatureError):
        F.write_archive({"a": np.zeros((3, 20))}, tmp_path / "x.ark")
    F.write_archive({"a": np.zeros((3, 60))}, tmp_path / "y.ark")
    data = (tmp_path / "y.ark").read_bytes()
    (tmp_path / "y.ark").write_bytes(data[:-4])
    with pytest.raises(F.FeatureError, match="truncated"):
        F.read_archive(tmp_path / "y.ark")


def test_corpus_features_are_normalized(corpus_features):
    for mat in corpus_features.values():
        assert mat.shape[1] == 60 and mat.shape[0] > 20
        assert np.all(np.isfinite(mat))
