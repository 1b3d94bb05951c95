"""Command-line front end: one subcommand per pipeline stage.

Every subcommand resolves a config (preset or JSON file, then ``--set`` and
symbol flags), logs it, runs its stage and writes a run manifest next to its
outputs. Failures print one ``error=... message=...`` line and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import audio, checks, features, ivector, pipeline
from . import config as C
from . import model as Mo

log = logging.getLogger("tsenet.cli")

SYMBOLS = ("M", "L", "N", "O", "P", "b", "r", "D1", "D2")
EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(RuntimeError):
    pass


def _setup_logging(level: str):
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level.upper()),
                        format="ts=%(asctime)s level=%(levelname)s logger=%(name)s %(message)s", force=True)


def _overrides(args) -> dict:
    out: dict = {}
    for text in args.set or []:
        C.deep_update(out, C.parse_assignment(text))
    sym = {s: getattr(args, f"sym_{s}") for s in SYMBOLS if getattr(args, f"sym_{s}") is not None}
    if sym:
        C.deep_update(out, {"tsenet": sym})
        # the speaker adapter input is the i-vector, so D1 drags the TV rank along
        if "D1" in sym and "rank" not in out.get("tv", {}):
            C.deep_update(out, {"tv": {"rank": sym["D1"]}})
    if args.seed is not None:
        out["seed"] = args.seed
    stage = getattr(args, "stage_overrides", None)
    if stage:
        C.deep_update(out, {k: v for k, v in stage(args).items() if v})
    return out


def _resolve(args) -> dict:
    spec = args.config or getattr(args, "default_config", None)
    cfg = C.load_config(spec, _overrides(args))
    log.info("config_hash=%s config=%s", C.config_hash(cfg), json.dumps(cfg, sort_keys=True))
    return cfg


def _out_parent(path) -> Path:
    parent = Path(path).parent
    parent.mkdir(parents=True, exist_ok=True)
    return parent


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise CliError(f"missing input: {p}")


# ---------------------------------------------------------------------------
# subcommands; each returns (manifest directory, outputs)


def cmd_simulate(args, cfg):
    _require(args.utterances)
    sim = cfg["simulate"]
    out = pipeline.simulate(args.utterances, args.out, sim["count"], sim["snr_low"], sim["snr_high"], cfg["seed"])
    return args.out, [out]


def cmd_features(args, cfg):
    _require(args.utterances)
    parent = _out_parent(args.out)
    feats = pipeline.extract_features(args.utterances, args.out, C.frame_config(cfg), jobs=args.jobs)
    outputs = [args.out, args.out + ".idx"]
    if args.dump_csv:
        features.dump_csv(feats, args.dump_csv)
        outputs.append(args.dump_csv)
    log.info("stage=features utterances=%d", len(feats))
    return parent, outputs


def cmd_train_ubm(args, cfg):
    _require(args.feats)
    parent = _out_parent(args.out)
    ubm = pipeline.train_ubm(args.feats, args.out, cfg)
    log.info("stage=train-ubm components=%d final_loglik=%.6f", ubm.means.shape[0], ubm.loglik_history[-1])
    return parent, [args.out]


def cmd_train_tv(args, cfg):
    _require(args.feats, args.ubm)
    parent = _out_parent(args.out)
    tv = pipeline.train_tv(args.feats, args.ubm, args.out, cfg)
    log.info("stage=train-tv rank=%d final_objective=%.6f", tv.T.shape[2], tv.objective_history[-1])
    return parent, [args.out]


def cmd_ivector(args, cfg):
    _require(args.feats, args.ubm, args.tv, args.utterances)
    parent = _out_parent(args.out)
    rows = pipeline.extract_ivectors(args.feats, args.ubm, args.tv, args.utterances, args.out, pooled=args.pooled)
    log.info("stage=ivector utterances=%d pooled=%s", len(rows), args.pooled)
    return parent, [args.out]


def cmd_train(args, cfg):
    _require(args.train, args.dev, args.ivectors)
    _, history = pipeline.train(args.train, args.dev, args.ivectors, args.out, cfg)
    out = Path(args.out)
    return out, [out / "best.bin", out / "history.jsonl"]


def _load_ivector(path, utt: str | None) -> np.ndarray:
    """A single-vector JSON ({"vec": [...]} or a bare list), or one row of an
    i-vector JSON-lines file selected by ``utt``."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = None
    if doc is not None and utt is None:
        vec = doc["vec"] if isinstance(doc, dict) else doc
        return np.asarray(vec, dtype=np.float64)
    table = ivector.read_ivectors_jsonl(path)
    if utt is None:
        if len(table) != 1:
            raise CliError(f"{path} holds {len(table)} i-vectors; choose one with --utt")
        return next(iter(table.values()))["vec"]
    if utt not in table:
        raise CliError(f"no i-vector for utterance {utt!r} in {path}")
    return table[utt]["vec"]


def cmd_extract(args, cfg):
    _require(args.ckpt)
    single = args.mixture is not None
    batch = args.mixtures is not None
    if single == batch:
        raise CliError("give either --mixture/--ivector (single) or --mixtures/--ivectors (batch)")
    if single:
        if args.ivector is None:
            raise CliError("single extraction needs --ivector")
        _require(args.mixture, args.ivector)
        parent = _out_parent(args.out)
        pipeline.extract_one(args.ckpt, args.mixture, _load_ivector(args.ivector, args.utt), args.out)
        return parent, [args.out]
    if args.ivectors is None:
        raise CliError("batch extraction needs --ivectors")
    _require(args.mixtures, args.ivectors)
    manifest = pipeline.extract_batch(args.ckpt, args.mixtures, args.ivectors, args.out)
    return args.out, [manifest]


def cmd_evaluate(args, cfg):
    _require(args.est, args.mixtures)
    n_params = "-"
    if args.ckpt:
        _require(args.ckpt)
        n_params = pipeline._format_count(Mo.load_checkpoint(args.ckpt).parameter_count())
    report = pipeline.evaluate(args.est, args.mixtures, args.out, cfg["metrics"]["taps"], n_params)
    sys.stdout.write(report.format_tables(n_params))
    out = Path(args.out)
    return out, [out / "report.csv", out / "report.txt"]


def cmd_spectrogram(args, cfg):
    _require(args.wav)
    spec = audio.log_spectrogram(audio.read_wav(args.wav), args.win, args.hop)
    parent = _out_parent(args.out)
    if args.out.endswith(".pgm"):
        audio.save_spectrogram_pgm(spec, args.out)
    else:
        audio.save_spectrogram_csv(spec, args.out)
    log.info("stage=spectrogram frames=%d bins=%d", *spec.shape)
    return parent, [args.out]


def cmd_gradcheck(args, cfg):
    results = checks.op_gradcheck(cfg["seed"])
    results["end_to_end_si_sdr_loss"] = checks.end_to_end_gradcheck(C.tsenet_config(cfg), args.T, seed=cfg["seed"],
                                                                    max_entries=args.max_entries)
    worst = 0.0
    for name, res in results.items():
        status = "ok" if res.max_error <= checks.GRADCHECK_TOL else "FAIL"
        sys.stdout.write(f"op={name} max_rel_error={res.max_error:.3e} checked={sum(res.checked.values())} "
                         f"skipped_kinks={sum(res.skipped_kinks.values())} status={status}\n")
        worst = max(worst, res.max_error)
    sys.stdout.write(f"max_rel_error={worst:.3e} tol={checks.GRADCHECK_TOL:.0e}\n")
    if worst > checks.GRADCHECK_TOL:
        raise CliError(f"gradient check failed: max relative error {worst:.3e} > {checks.GRADCHECK_TOL:.0e}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "gradcheck.json"
    path.write_text(json.dumps({k: {"max_error": v.max_error, "errors": v.errors} for k, v in results.items()},
                               indent=2) + "\n")
    return out, [path]


def cmd_selftest(args, cfg):
    report = pipeline.selftest(args.out, cfg["seed"], cfg)
    sys.stdout.write((Path(args.out) / "report" / "report.txt").read_text())
    log.info("stage=selftest mixtures=%d", len(report.rows))
    return None, [Path(args.out) / "report" / "report.csv"]


# ---------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="preset name (full, tiny, tiny-plus, desk) or JSON config path")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.lr_init=0.01")
    g.add_argument("--seed", type=int)
    for s in SYMBOLS:
        g.add_argument(f"--{s}", dest=f"sym_{s}", type=int, metavar="INT", help=f"network hyperparameter {s}")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for parallel-safe stages")
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    return p


def _snr_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW:HIGH, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsenet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    def add(name, fn, help_text, **defaults):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=fn, **defaults)
        return p

    p = add("simulate", cmd_simulate, "simulate two-speaker mixtures from an utterance manifest",
            stage_overrides=lambda a: {"simulate": {k: v for k, v in (
                ("count", a.count), ("snr_low", a.snr and a.snr[0]), ("snr_high", a.snr and a.snr[1]))
                if v is not None}})
    p.add_argument("--utterances", required=True, help="CSV with speaker_id, gender, path")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--snr", type=_snr_range, metavar="LOW:HIGH")

    p = add("features", cmd_features, "MFCC + energy + deltas with CMN and VAD")
    p.add_argument("--utterances", required=True)
    p.add_argument("--out", required=True, help="feature archive path")
    p.add_argument("--dump-csv", help="also write a human-readable CSV")

    p = add("train-ubm", cmd_train_ubm, "train a diagonal GMM universal background model")
    p.add_argument("--feats", required=True)
    p.add_argument("--out", required=True)

    p = add("train-tv", cmd_train_tv, "train the total variability matrix")
    p.add_argument("--feats", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--out", required=True)

    p = add("ivector", cmd_ivector, "extract i-vectors to JSON-lines")
    p.add_argument("--feats", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--tv", required=True)
    p.add_argument("--utterances", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pooled", action="store_true", help="one i-vector per speaker from pooled statistics")

    p = add("train", cmd_train, "train the extraction network")
    p.add_argument("--train", required=True, help="training mixture manifest")
    p.add_argument("--dev", required=True, help="development mixture manifest")
    p.add_argument("--ivectors", required=True)
    p.add_argument("--out", required=True)

    p = add("extract", cmd_extract, "extract the target speaker from one mixture or a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mixture")
    p.add_argument("--ivector", help="i-vector JSON, or JSON-lines with --utt")
    p.add_argument("--utt", help="utterance id to select from a JSON-lines i-vector file")
    p.add_argument("--mixtures", help="mixture manifest (batch mode)")
    p.add_argument("--ivectors", help="i-vector JSON-lines (batch mode)")
    p.add_argument("--out", required=True, help="output WAV (single) or directory (batch)")

    p = add("evaluate", cmd_evaluate, "SDR / SI-SDR report against the mixture baseline",
            stage_overrides=lambda a: {"metrics": {"taps": a.taps}} if a.taps is not None else {})
    p.add_argument("--est", required=True, help="estimates manifest written by extract")
    p.add_argument("--mixtures", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--taps", type=int)
    p.add_argument("--ckpt", help="checkpoint, to report its parameter count")

    p = add("spectrogram", cmd_spectrogram, "log-magnitude spectrogram as CSV or PGM")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True, help="*.csv or *.pgm")
    p.add_argument("--win", type=int, default=256)
    p.add_argument("--hop", type=int, default=128)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every operator and the full loss",
            default_config="tiny")
    p.add_argument("--T", type=int, default=400, help="mixture length in samples")
    p.add_argument("--max-entries", type=int, help="sample at most this many entries per parameter")
    p.add_argument("--out", default="gradcheck_out")

    p = add("selftest", cmd_selftest, "whole pipeline on bundled synthetic speakers", default_config="desk")
    p.add_argument("--out", default="selftest_out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    started = time.time()
    try:
        cfg = _resolve(args)
        manifest_dir, outputs = args.func(args, cfg)
        path = pipeline.write_run_manifest(manifest_dir or args.out, args.command, cfg, started, outputs)
        log.info("command=%s status=ok wall_time_s=%.3f manifest=%s", args.command, time.time() - started, path)
        return 0
    except C.ConfigError as exc:
        _report(args.command, exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001  every failure becomes one structured line
        if args.log_level == "debug":
            log.exception("traceback")
        _report(args.command, exc)
        return EXIT_FAILURE


def _report(command: str, exc: Exception):
    module = type(exc).__module__
    sys.stderr.write(f"error={type(exc).__name__} command={command} module={module} "
                     f"message={json.dumps(str(exc))}\n")


if __name__ == "__main__":
    sys.exit(main())
