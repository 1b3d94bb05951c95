import json

import numpy as np
import pytest

from tsenet import audio, checks, cli
from tsenet import config as C

SMALL = ["--config", "desk", "--set", "train.max_epochs=1", "--set", "ubm.n_components=4",
         "--log-level", "warning"]


def test_presets_resolve_and_validate():
    for name in C.PRESETS:
        cfg = C.load_config(name)
        assert cfg["tv"]["rank"] == cfg["tsenet"]["D1"]
    assert C.tsenet_config(C.load_config("full")).receptive_radius == 1020


def test_overrides_and_unknown_keys():
    cfg = C.load_config("tiny", C.parse_assignment("train.lr_init=0.01"))
    assert cfg["train"]["lr_init"] == 0.01
    assert C.parse_assignment("simulate.count=12") == {"simulate": {"count": 12}}
    assert C.parse_assignment("a=hello") == {"a": "hello"}
    with pytest.raises(C.ConfigError, match="unknown"):
        C.load_config(None, {"train": {"nope": 1}})
    with pytest.raises(C.ConfigError):
        C.load_config(None, {"tsenet": {"L": 21}})
    with pytest.raises(C.ConfigError, match="tv.rank"):
        C.load_config(None, {"tsenet": {"D1": 5}})
    with pytest.raises(C.ConfigError):
        C.parse_assignment("novalue")


def test_json_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"schema_version": 1, "seed": 9, "tsenet": {"b": 2}}))
    cfg = C.load_config(str(tmp_path / "c.json"))
    assert cfg["seed"] == 9 and cfg["tsenet"]["b"] == 2
    (tmp_path / "old.json").write_text(json.dumps({"schema_version": 0}))
    with pytest.raises(C.ConfigError, match="schema"):
        C.load_config(str(tmp_path / "old.json"))
    with pytest.raises(C.ConfigError, match="no preset"):
        C.load_config(str(tmp_path / "missing.json"))


def test_config_hash_tracks_content():
    a, b = C.load_config("desk"), C.load_config("desk", {"seed": 1})
    assert C.config_hash(a) == C.config_hash(C.load_config("desk")) != C.config_hash(b)
    assert C.train_config(b).seed == 1


def test_symbol_flags_override_network_and_tv_rank(capsys):
    args = cli.build_parser().parse_args(["gradcheck", "--config", "tiny", "--D1", "6", "--b", "1", "--M", "8"])
    cfg = C.load_config(args.config, cli._overrides(args))
    assert cfg["tsenet"]["D1"] == 6 and cfg["tv"]["rank"] == 6
    assert cfg["tsenet"]["b"] == 1 and cfg["tsenet"]["M"] == 8


def test_simulate_twice_is_identical(tmp_path, corpus_dir):
    for out in ("a", "b"):
        assert cli.main(["simulate", "--utterances", str(corpus_dir / "utterances.csv"), "--out",
                         str(tmp_path / out), "--count", "5", "--snr", "0:5", "--seed", "7",
                         "--log-level", "warning"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if not p.name.startswith("run_manifest"))
    assert len(files) == 1 + 5 * 3
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    man = json.loads((tmp_path / "a" / "run_manifest.simulate.json").read_text())
    assert set(man) >= {"config_hash", "seed", "versions", "wall_time_s"} and man["seed"] == 7
    rows = audio.read_jsonl(tmp_path / "a" / "mixtures.jsonl")
    assert all(0 <= r["snr_db"] <= 5 for r in rows)


def test_errors_are_structured(tmp_path, capsys):
    rc = cli.main(["train-ubm", "--feats", str(tmp_path / "none.ark"), "--out", str(tmp_path / "u.bin")])
    err = capsys.readouterr().err
    assert rc == 1 and "error=CliError" in err and "missing input" in err
    rc = cli.main(["train-ubm", "--set", "ubm.bogus=1", "--feats", "x", "--out", "y"])
    assert rc == 2 and "error=ConfigError" in capsys.readouterr().err


def test_gradcheck_prints_each_op_and_gates(tmp_path, capsys, monkeypatch):
    argv = ["gradcheck", "--config", "tiny", "--T", "40", "--max-entries", "8", "--out", str(tmp_path),
            "--log-level", "warning"]
    assert cli.main(argv) == 0
    out = capsys.readouterr().out
    for op in ("conv1d", "depthwise_conv1d_dilated", "global_layer_norm", "si_sdr", "end_to_end_si_sdr_loss"):
        assert f"op={op} max_rel_error=" in out
    monkeypatch.setattr(checks, "GRADCHECK_TOL", 0.0)
    assert cli.main(argv) == 1
    assert "gradient check failed" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory, corpus_dir):
    """features -> UBM -> TV -> i-vectors -> simulate -> train through the CLI."""
    w = tmp_path_factory.mktemp("cli")
    utts = str(corpus_dir / "utterances.csv")
    steps = [
        ["features", "--utterances", utts, "--out", str(w / "f.ark"), "--dump-csv", str(w / "f.csv")],
        ["train-ubm", "--feats", str(w / "f.ark"), "--out", str(w / "ubm.bin")],
        ["train-tv", "--feats", str(w / "f.ark"), "--ubm", str(w / "ubm.bin"), "--out", str(w / "tv.bin")],
        ["ivector", "--feats", str(w / "f.ark"), "--ubm", str(w / "ubm.bin"), "--tv", str(w / "tv.bin"),
         "--utterances", utts, "--out", str(w / "iv.jsonl")],
        ["ivector", "--feats", str(w / "f.ark"), "--ubm", str(w / "ubm.bin"), "--tv", str(w / "tv.bin"),
         "--utterances", utts, "--out", str(w / "iv_pooled.jsonl"), "--pooled"],
        ["simulate", "--utterances", utts, "--out", str(w / "mix"), "--count", "6"],
        ["train", "--train", str(w / "mix" / "mixtures.jsonl"), "--dev", str(w / "mix" / "mixtures.jsonl"),
         "--ivectors", str(w / "iv.jsonl"), "--out", str(w / "model")],
    ]
    for argv in steps:
        assert cli.main(argv[:1] + SMALL + argv[1:]) == 0, argv
    return w


def test_pipeline_artifacts(pipeline_run):
    w = pipeline_run
    for name in ("f.ark", "f.ark.idx", "f.csv", "ubm.bin", "tv.bin", "iv.jsonl", "model/best.bin",
                 "model/history.jsonl", "run_manifest.train-tv.json", "model/run_manifest.train.json"):
        assert (w / name).exists(), name
    pooled = [json.loads(line) for line in (w / "iv_pooled.jsonl").read_text().splitlines()]
    by_spk = {}
    for row in pooled:
        by_spk.setdefault(row["speaker_id"], []).append(row["vec"])
    assert all(all(v == vecs[0] for v in vecs) for vecs in by_spk.values())
    single = [json.loads(line)["vec"] for line in (w / "iv.jsonl").read_text().splitlines()]
    assert single[0] != single[1]


def test_extract_single_keeps_length(pipeline_run, tmp_path):
    w = pipeline_run
    row = audio.read_jsonl(w / "mix" / "mixtures.jsonl")[0]
    iv = json.loads((w / "iv.jsonl").read_text().splitlines()[0])
    (tmp_path / "spk.json").write_text(json.dumps({"vec": iv["vec"]}))
    rc = cli.main(["extract", "--ckpt", str(w / "model" / "best.bin"), "--mixture", row["mixture_path"],
                   "--ivector", str(tmp_path / "spk.json"), "--out", str(tmp_path / "o" / "est.wav"),
                   "--log-level", "warning"])
    assert rc == 0
    assert len(audio.read_wav(tmp_path / "o" / "est.wav")) == len(audio.read_wav(row["mixture_path"]))
    assert (tmp_path / "o" / "run_manifest.extract.json").exists()


def test_extract_batch_and_evaluate(pipeline_run, tmp_path, capsys):
    w = pipeline_run
    assert cli.main(["extract", "--ckpt", str(w / "model" / "best.bin"), "--mixtures",
                     str(w / "mix" / "mixtures.jsonl"), "--ivectors", str(w / "iv.jsonl"),
                     "--out", str(tmp_path / "est"), "--log-level", "warning"]) == 0
    assert cli.main(["evaluate", "--config", "desk", "--est", str(tmp_path / "est" / "estimates.jsonl"),
                     "--mixtures", str(w / "mix" / "mixtures.jsonl"), "--out", str(tmp_path / "rep"),
                     "--ckpt", str(w / "model" / "best.bin"), "--log-level", "warning"]) == 0
    out = capsys.readouterr().out
    assert "Table 1: overall" in out and "Mixture" in out
    assert (tmp_path / "rep" / "report.csv").read_text().count("\n") == 7


def test_extract_needs_one_mode(pipeline_run, tmp_path, capsys):
    rc = cli.main(["extract", "--ckpt", str(pipeline_run / "model" / "best.bin"), "--out", str(tmp_path / "x")])
    assert rc == 1 and "either" in capsys.readouterr().err


def test_spectrogram_command(tmp_path, corpus_dir):
    wav = sorted(corpus_dir.glob("*.wav"))[0]
    assert cli.main(["spectrogram", "--wav", str(wav), "--out", str(tmp_path / "s.csv"),
                     "--log-level", "warning"]) == 0
    spec = np.loadtxt(tmp_path / "s.csv", delimiter=",")
    assert spec.shape[1] == 129
