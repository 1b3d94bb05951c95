import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsenet import graph as G
from tsenet import model as Mo
from tsenet import trainer as Tr
from tsenet.audio import AudioSignal, MixtureRecord


def test_si_sdr_hand_example():
    assert Tr.si_sdr([1.0, 0.0, -1.0], [1.0, 1.0, -2.0]) == pytest.approx(10 * np.log10(4.5 / 1.5), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3), offset=st.floats(-5, 5))
def test_si_sdr_is_scale_and_offset_invariant(seed, scale, offset):
    r = np.random.default_rng(seed)
    s = r.standard_normal(64)
    e = s + 0.5 * r.standard_normal(64)
    assert Tr.si_sdr(scale * e + offset, s) == pytest.approx(Tr.si_sdr(e, s), abs=1e-9)


def test_si_sdr_matches_graph_op(rng):
    e, s = rng.standard_normal((3, 50)), rng.standard_normal((3, 50))
    graph_vals = G.si_sdr_values(G.Tensor(e), s).data
    np.testing.assert_allclose([Tr.si_sdr(e[i], s[i]) for i in range(3)], graph_vals, atol=1e-10)


def test_si_sdr_cap_and_errors():
    s = np.array([1.0, -2.0, 3.0])
    assert Tr.si_sdr(s, s) == Tr.SI_SDR_CAP
    with pytest.raises(ValueError):
        Tr.si_sdr(s, np.ones(3))
    with pytest.raises(ValueError):
        Tr.si_sdr(s, s[:2])


def test_plateau_schedule_hand_walk():
    sched = Tr.PlateauSchedule(lr=1.0, halve_patience=3, stop_patience=10)
    lrs, stops = [], []
    for epoch, dev in enumerate(range(5, 30), start=1):
        lrs.append(sched.lr)
        improved, stop = sched.update(float(dev))
        assert improved == (epoch == 1)
        if stop:
            stops.append(epoch)
            break
    # lr used in epochs 1..11: halved after epochs 4, 7 and 10
    assert lrs == [1, 1, 1, 1, .5, .5, .5, .25, .25, .25, .125]
    assert stops == [11]


def test_plateau_counter_resets_on_improvement():
    sched = Tr.PlateauSchedule(lr=1.0)
    for dev in (5, 6, 7, 4, 6, 7):
        sched.update(dev)
    assert sched.lr == 1.0
    sched.update(8)
    assert sched.lr == 0.5


def _record(rid, n_mix, n_tgt, rng):
    tgt = np.zeros(n_mix)
    tgt[:n_tgt] = rng.standard_normal(n_tgt)
    itf = rng.standard_normal(n_mix)
    return MixtureRecord(AudioSignal(tgt + itf), AudioSignal(tgt), [AudioSignal(itf)], "t", ["i"], "r", 1.0,
                         "diff", id=rid)


def test_segment_dataset(rng):
    recs = [_record("a", 10, 10, rng), _record("b", 27, 27, rng), _record("c", 30, 8, rng)]
    ivecs = {"a": np.ones(2), "b": np.zeros(2), "c": np.full(2, 3.0)}
    segs = Tr.segment_dataset(recs, ivecs, seconds=1.0, sample_rate=10, min_seconds=0.5)
    # a: one segment; b: 10+10 plus a 7-sample remnant padded; c: target silent after sample 8
    assert [s.id for s in segs] == ["a#0", "b#0", "b#1", "b#2", "c#0"]
    assert all(s.mixture.size == 10 for s in segs)
    assert not segs[3].mixture[7:].any()
    np.testing.assert_array_equal(segs[-1].ivec, 3.0)
    short = Tr.segment_dataset(recs[1:2], [np.ones(2)], seconds=1.0, sample_rate=10, min_seconds=0.8)
    assert len(short) == 2


def _tiny_examples(rng, n=6, T=200):
    out = []
    for i in range(n):
        tgt = np.sin(2 * np.pi * (i + 3) * np.arange(T) / 50)
        out.append(Tr.TrainExample(tgt + 0.5 * rng.standard_normal(T), tgt, rng.standard_normal(8), f"x{i}"))
    return out


def test_train_writes_history_and_best_checkpoint(tmp_path, rng):
    data = _tiny_examples(rng)
    cfg = Tr.TrainConfig(lr_init=1e-2, batch_size=3, max_epochs=4, seed=0)
    best, hist = Tr.train(Mo.build(Mo.TINY_CONFIG, seed=0), data[:4], data[4:], cfg,
                          history_path=tmp_path / "h.jsonl", checkpoint_path=tmp_path / "best.bin")
    rows = [json.loads(line) for line in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert rows == hist and len(rows) == 4
    assert set(rows[0]) == {"epoch", "train_loss", "dev_loss", "lr"}
    best_epoch = min(rows, key=lambda r: r["dev_loss"])["epoch"]
    assert Mo.checkpoint_extra(tmp_path / "best.bin")["epoch"] == best_epoch
    assert Tr.evaluate_loss(best, data[4:]) == pytest.approx(min(r["dev_loss"] for r in rows), abs=1e-5)


def test_training_is_deterministic(rng):
    data = _tiny_examples(rng)
    cfg = Tr.TrainConfig(lr_init=1e-2, batch_size=2, max_epochs=2, seed=4)
    runs = [Tr.train(Mo.build(Mo.TINY_CONFIG, seed=0), data[:4], data[4:], cfg) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0].params:
        np.testing.assert_array_equal(runs[0][0][k].data, runs[1][0][k].data)


def test_max_steps_bounds_updates(rng):
    data = _tiny_examples(rng)
    cfg = Tr.TrainConfig(batch_size=1, max_epochs=5, max_steps=3)
    _, hist = Tr.train(Mo.build(Mo.TINY_CONFIG, seed=0), data[:4], data[4:], cfg)
    assert len(hist) == 1


def test_divergence_is_reported(tmp_path, rng, monkeypatch):
    data = _tiny_examples(rng)
    real = Tr.neg_si_sdr_loss

    def poisoned(model, batch):
        loss = real(model, batch)
        return G.mul(loss, float("nan"))
    monkeypatch.setattr(Tr, "neg_si_sdr_loss", poisoned)
    with pytest.raises(Tr.TrainingDiverged):
        Tr.train(Mo.build(Mo.TINY_CONFIG, seed=0), data[:2], data[2:3], Tr.TrainConfig(max_epochs=1),
                 history_path=tmp_path / "h.jsonl")
    dump = json.loads((tmp_path / "h.jsonl.divergence.json").read_text())
    assert dump["epoch"] == 1 and "param_norms" in dump


def test_overfit_reduces_loss(rng):
    data = _tiny_examples(rng, n=2)
    trace = Tr.overfit(Mo.build(Mo.TINY_CONFIG, seed=0), data, steps=40, lr=1e-2)
    assert len(trace) == 40 and trace[-1] < trace[0] - 3


def test_config_validation():
    with pytest.raises(ValueError):
        Tr.TrainConfig(lr_init=0)
    with pytest.raises(ValueError):
        Tr.train(Mo.build(Mo.TINY_CONFIG), [], [], Tr.TrainConfig())
