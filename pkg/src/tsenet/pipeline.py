"""File-to-file pipeline stages shared by the command line and the self-test."""

from __future__ import annotations

import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import audio, features, ivector, metrics, synth, trainer
from . import config as C
from . import model as Mo

log = logging.getLogger(__name__)


def write_run_manifest(out_dir, command: str, cfg: dict, started: float, outputs=()):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config_hash": C.config_hash(cfg),
        "seed": cfg["seed"],
        "versions": {"tsenet": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "wall_time_s": round(time.time() - started, 3),
        "outputs": [str(o) for o in outputs],
    }
    path = out_dir / f"run_manifest.{command}.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# stages


def simulate(utterances_csv, out_dir, count: int, snr_low: float, snr_high: float, seed: int):
    manifest = audio.UtteranceManifest.read_csv(utterances_csv)
    records = audio.simulate_corpus(manifest, count, snr_low, snr_high, seed)
    return audio.write_corpus(records, out_dir)


def _features_of(path, frame_cfg):
    return features.pipeline(audio.read_wav(path), frame_cfg)


def extract_features(utterances_csv, out_path, frame_cfg: features.FrameConfig, jobs: int = 1):
    """Per-utterance features; utterances are independent, so ``jobs > 1`` fans
    out to worker processes without changing the archive."""
    manifest = audio.UtteranceManifest.read_csv(utterances_csv)
    utts = manifest.all_utterances()
    paths = [u.path for u in utts]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            mats = list(pool.map(_features_of, paths, [frame_cfg] * len(paths)))
    else:
        mats = [_features_of(p, frame_cfg) for p in paths]
    feats = {u.utterance_id: m for u, m in zip(utts, mats)}
    features.write_archive(feats, out_path)
    return feats


def train_ubm(feats_path, out_path, cfg: dict):
    feats = features.read_archive(feats_path)
    u = cfg["ubm"]
    ubm = ivector.train_ubm(feats.values(), u["n_components"], u["em_iters"], cfg["seed"], u["split_iters"])
    ivector.save_ubm(ubm, out_path)
    return ubm


def train_tv(feats_path, ubm_path, out_path, cfg: dict):
    feats = features.read_archive(feats_path)
    ubm = ivector.load_ubm(ubm_path)
    stats = [ivector.accumulate_stats(ubm, f) for f in feats.values()]
    tv = ivector.train_tv(ubm, stats, cfg["tv"]["rank"], cfg["tv"]["em_iters"], cfg["seed"])
    ivector.save_tv(tv, out_path)
    return tv


def extract_ivectors(feats_path, ubm_path, tv_path, utterances_csv, out_path, pooled: bool = False):
    """One i-vector per utterance; with ``pooled`` every utterance of a speaker
    gets the i-vector of that speaker's summed statistics."""
    feats = features.read_archive(feats_path)
    ubm = ivector.load_ubm(ubm_path)
    tv = ivector.load_tv(tv_path)
    manifest = audio.UtteranceManifest.read_csv(utterances_csv)
    spk_of = {u.utterance_id: u.speaker_id for u in manifest.all_utterances()}
    stats = {k: ivector.accumulate_stats(ubm, v) for k, v in feats.items()}
    if pooled:
        per_spk: dict[str, ivector.BaumWelchStats] = {}
        for k, s in stats.items():
            spk = spk_of.get(k, "")
            per_spk[spk] = s if spk not in per_spk else per_spk[spk] + s
        spk_vec = {spk: ivector.extract_ivector(ubm, tv, s) for spk, s in per_spk.items()}
        rows = [(k, spk_of.get(k, ""), spk_vec[spk_of.get(k, "")]) for k in stats]
    else:
        rows = [(k, spk_of.get(k, ""), ivector.extract_ivector(ubm, tv, s)) for k, s in stats.items()]
    ivector.write_ivectors_jsonl(rows, out_path)
    return rows


def _records_from_manifest(path):
    out = []
    for row in audio.read_jsonl(path):
        mixture = audio.read_wav(row["mixture_path"])
        target = audio.read_wav(row["target_path"])
        out.append(audio.MixtureRecord(
            mixture=mixture, target_source=target,
            interference_sources=[audio.read_wav(p) for p in row["interf_paths"]],
            target_utterance=row["target_path"], interference_utterances=row["interf_paths"],
            reference_utterance=row["reference_path"], snr_db=row["snr_db"],
            gender_pair=row["gender_pair"], id=row["id"], speaker_id=row.get("speaker_id", "")))
    return out


def reference_ivectors(mixture_rows, ivectors: dict) -> dict:
    """Mixture id -> i-vector of its reference utterance."""
    out = {}
    for row in mixture_rows:
        key = Path(row["reference_path"]).stem
        if key not in ivectors:
            raise KeyError(f"no i-vector for reference utterance {key!r} of mixture {row['id']}")
        out[row["id"]] = ivectors[key]["vec"]
    return out


def train(train_manifest, dev_manifest, ivectors_path, out_dir, cfg: dict):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ivecs = ivector.read_ivectors_jsonl(ivectors_path)
    tcfg = C.train_config(cfg)
    sets = []
    for manifest in (train_manifest, dev_manifest):
        rows = audio.read_jsonl(manifest)
        sets.append(trainer.segment_dataset(_records_from_manifest(manifest), reference_ivectors(rows, ivecs),
                                            tcfg.segment_seconds))
    model = Mo.build(C.tsenet_config(cfg), seed=cfg["seed"])
    best, history = trainer.train(model, sets[0], sets[1], tcfg, history_path=out_dir / "history.jsonl",
                                  checkpoint_path=out_dir / "best.bin")
    Mo.save_checkpoint(best, out_dir / "best.bin",
                       extra={"history_len": len(history), "dev_loss_on": "segments"})
    return best, history


def extract_one(ckpt, mixture_wav, ivec, out_wav):
    model = Mo.load_checkpoint(ckpt)
    mix = audio.read_wav(mixture_wav)
    est = Mo.extract(model, mix.samples, ivec)
    audio.write_wav(out_wav, audio.AudioSignal(est, mix.sample_rate_hz))
    return out_wav


def extract_batch(ckpt, mixtures_manifest, ivectors_path, out_dir):
    """Extract every mixture of a corpus; writes WAVs and an ``estimates.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = Mo.load_checkpoint(ckpt)
    rows = audio.read_jsonl(mixtures_manifest)
    ivecs = reference_ivectors(rows, ivector.read_ivectors_jsonl(ivectors_path))
    est_manifest = out_dir / "estimates.jsonl"
    with open(est_manifest, "w") as fh:
        for row in rows:
            mix = audio.read_wav(row["mixture_path"])
            est = Mo.extract(model, mix.samples, ivecs[row["id"]])
            path = out_dir / f"{row['id']}_est.wav"
            audio.write_wav(path, audio.AudioSignal(est, mix.sample_rate_hz))
            fh.write(json.dumps({"id": row["id"], "est_path": path.name}) + "\n")
    return est_manifest


def evaluate(est_manifest, mixtures_manifest, out_dir, taps: int, n_params: str = "-"):
    report = metrics.evaluate_corpus(est_manifest, mixtures_manifest, taps)
    metrics.write_report(report, out_dir, n_params)
    return report


# ---------------------------------------------------------------------------
# self-test


def _format_count(n: int) -> str:
    return f"{n / 1e6:.1f}M" if n >= 1e5 else f"{n / 1e3:.1f}K"


def selftest(out_dir, seed: int = 0, cfg: dict | None = None) -> metrics.EvalReport:
    """Run every stage on bundled synthetic audio; returns the evaluation report.

    Training speakers and test speakers are disjoint (open condition).
    """
    cfg = cfg or C.load_config("desk", {"seed": seed})
    out = Path(out_dir)
    started = time.time()
    fcfg = C.frame_config(cfg)

    train_src = out / "source" / "train"
    test_src = out / "source" / "test"
    synth.make_corpus(train_src, n_male=3, n_female=3, utts_per_speaker=5, seed=seed, prefix="trn")
    synth.make_corpus(test_src, n_male=2, n_female=2, utts_per_speaker=4, seed=seed + 1000, prefix="tst")
    log.info("stage=corpus elapsed=%.1fs", time.time() - started)

    extract_features(train_src / "utterances.csv", out / "train_feats.ark", fcfg)
    extract_features(test_src / "utterances.csv", out / "test_feats.ark", fcfg)
    train_ubm(out / "train_feats.ark", out / "ubm.bin", cfg)
    train_tv(out / "train_feats.ark", out / "ubm.bin", out / "tv.bin", cfg)
    extract_ivectors(out / "train_feats.ark", out / "ubm.bin", out / "tv.bin", train_src / "utterances.csv",
                     out / "train_ivectors.jsonl")
    extract_ivectors(out / "test_feats.ark", out / "ubm.bin", out / "tv.bin", test_src / "utterances.csv",
                     out / "test_ivectors.jsonl")
    log.info("stage=ivectors elapsed=%.1fs", time.time() - started)

    sim = cfg["simulate"]
    lo, hi = sim["snr_low"], sim["snr_high"]
    train_mix = simulate(train_src / "utterances.csv", out / "mix_train", sim["count"], lo, hi, seed)
    dev_mix = simulate(train_src / "utterances.csv", out / "mix_dev", max(sim["count"] // 4, 2), lo, hi, seed + 1)
    test_mix = simulate(test_src / "utterances.csv", out / "mix_test", max(sim["count"] // 4, 3), lo, hi, seed + 2)
    log.info("stage=simulate elapsed=%.1fs", time.time() - started)

    best, _ = train(train_mix, dev_mix, out / "train_ivectors.jsonl", out / "model", cfg)
    log.info("stage=train elapsed=%.1fs", time.time() - started)
    est = extract_batch(out / "model" / "best.bin", test_mix, out / "test_ivectors.jsonl", out / "est_test")
    report = evaluate(est, test_mix, out / "report", cfg["metrics"]["taps"], _format_count(best.parameter_count()))
    log.info("stage=evaluate elapsed=%.1fs", time.time() - started)
    write_run_manifest(out, "selftest", cfg, started, [out / "report" / "report.csv"])
    return report
