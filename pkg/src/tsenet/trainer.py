"""SI-SDR objective, segmentation and the Adam training loop.

Learning-rate schedule: the rate is halved after ``halve_patience`` epochs in a
row without a new best development loss, and training stops after
``stop_patience`` such epochs. The halving counter restarts on every
improvement and every halving; the stopping counter only on improvement.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import graph as G
from . import model as Mo

log = logging.getLogger(__name__)

SI_SDR_CAP = 120.0


class TrainingDiverged(RuntimeError):
    pass


def si_sdr(est, ref) -> float:
    """SI-SDR in dB after zero-mean normalization, capped at +120 dB."""
    e = np.asarray(getattr(est, "samples", est), dtype=np.float64).reshape(-1)
    s = np.asarray(getattr(ref, "samples", ref), dtype=np.float64).reshape(-1)
    if e.shape != s.shape:
        raise ValueError(f"length mismatch: estimate {e.size}, reference {s.size}")
    if e.size < 2:
        raise ValueError("SI-SDR needs at least two samples")
    e = e - e.mean()
    s = s - s.mean()
    ss = float(np.dot(s, s))
    if ss <= 0:
        raise ValueError("SI-SDR reference has zero power after mean removal")
    target = (np.dot(e, s) / ss) * s
    noise = target - e
    num = float(np.dot(target, target))
    den = float(np.dot(noise, noise))
    if den <= num * 10.0 ** (-SI_SDR_CAP / 10.0):
        return SI_SDR_CAP
    return 10.0 * np.log10(num / den)


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainExample:
    mixture: np.ndarray
    target: np.ndarray
    ivec: np.ndarray
    id: str = ""


def segment_dataset(records, ivectors, seconds: float = 4.0, sample_rate: int = 8000,
                    min_seconds: float = 1.0) -> list[TrainExample]:
    """Cut mixtures and targets jointly into non-overlapping fixed-length segments.

    A final remnant shorter than ``min_seconds`` is dropped; a longer one is
    zero-padded. Segments where the target is silent (it ended before the
    interference did) carry no SI-SDR signal and are skipped. ``ivectors`` is
    either one vector per record or a mapping from record id to vector.
    """
    seg = int(round(seconds * sample_rate))
    min_len = int(round(min_seconds * sample_rate))
    out = []
    for k, rec in enumerate(records):
        mix = np.asarray(getattr(rec.mixture, "samples", rec.mixture), dtype=np.float64)
        tgt = np.asarray(getattr(rec.target_source, "samples", rec.target_source), dtype=np.float64)
        ivec = ivectors[rec.id] if isinstance(ivectors, dict) else ivectors[k]
        for n, start in enumerate(range(0, mix.size, seg)):
            m, t = mix[start:start + seg], tgt[start:start + seg]
            if m.size < seg:
                if m.size < min_len:
                    break
                m = np.pad(m, (0, seg - m.size))
                t = np.pad(t, (0, seg - t.size))
            if not np.ptp(t) > 0:
                continue
            out.append(TrainExample(m, t, np.asarray(ivec, dtype=np.float64), f"{rec.id}#{n}"))
    return out


def _stack(examples: Sequence[TrainExample]):
    n = max(e.mixture.size for e in examples)
    mix = np.stack([np.pad(e.mixture, (0, n - e.mixture.size)) for e in examples])
    tgt = np.stack([np.pad(e.target, (0, n - e.target.size)) for e in examples])
    ivec = np.stack([e.ivec for e in examples])
    return mix, tgt, ivec


def neg_si_sdr_loss(model: Mo.TseNet, batch: Sequence[TrainExample]) -> G.Tensor:
    """Mean over the batch of -SI-SDR (uncapped) of the network estimate."""
    mix, tgt, ivec = _stack(batch)
    est, _ = Mo.forward(model, mix, ivec)
    return G.mul(G.mean(G.si_sdr_values(est, tgt)), -1.0)


def evaluate_loss(model: Mo.TseNet, examples: Sequence[TrainExample], batch_size: int = 10) -> float:
    total = 0.0
    for i in range(0, len(examples), batch_size):
        batch = examples[i:i + batch_size]
        total += float(neg_si_sdr_loss(model, batch).data) * len(batch)
    return total / len(examples)


def mean_si_sdr(model: Mo.TseNet, examples: Sequence[TrainExample]) -> float:
    vals = [si_sdr(Mo.extract(model, e.mixture, e.ivec), e.target) for e in examples]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# schedule and loop


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    halve_patience: int = 3
    stop_patience: int = 10
    segment_seconds: float = 4.0
    batch_size: int = 10
    max_epochs: int = 100
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.lr_init <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("lr_init, batch_size and max_epochs must be positive")
        if not 0 < self.halve_patience <= self.stop_patience:
            raise ValueError("need 0 < halve_patience <= stop_patience")


@dataclass
class PlateauSchedule:
    lr: float
    halve_patience: int = 3
    stop_patience: int = 10
    best: float = float("inf")
    since_best: int = 0
    since_halving: int = 0

    def update(self, dev_loss: float) -> tuple[bool, bool]:
        """Record one epoch's dev loss. Returns (improved, stop)."""
        if dev_loss < self.best:
            self.best = dev_loss
            self.since_best = 0
            self.since_halving = 0
            return True, False
        self.since_best += 1
        self.since_halving += 1
        if self.since_halving >= self.halve_patience:
            self.lr /= 2.0
            self.since_halving = 0
        return False, self.since_best >= self.stop_patience


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    schedule: PlateauSchedule | None = None
    adam: G.AdamState = field(default_factory=G.AdamState)
    history: list[dict] = field(default_factory=list)


def train(model: Mo.TseNet, train_set: Sequence[TrainExample], dev_set: Sequence[TrainExample],
          cfg: TrainConfig = TrainConfig(), history_path=None, checkpoint_path=None):
    """Train in place and return ``(best_model, history)``.

    ``best_model`` carries the parameters of the epoch with the lowest
    development loss. History rows are {epoch, train_loss, dev_loss, lr}.
    """
    if not train_set or not dev_set:
        raise ValueError("training and development sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    state = TrainState(schedule=PlateauSchedule(cfg.lr_init, cfg.halve_patience, cfg.stop_patience))
    best_state = model.state_dict()
    hist_fh = open(history_path, "w") if history_path else None
    params = {k: p.data for k, p in model.params.items()}
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            state.epoch = epoch
            order = rng.permutation(len(train_set))
            losses = []
            lr = state.schedule.lr
            for i in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    break
                batch = [train_set[j] for j in order[i:i + cfg.batch_size]]
                model.zero_grad()
                loss = neg_si_sdr_loss(model, batch)
                value = float(loss.data)
                if not np.isfinite(value):
                    _dump_divergence(model, state, value, history_path)
                G.backward(loss)
                grads = {k: p.grad for k, p in model.params.items()}
                G.adam_step(params, grads, state.adam, lr)
                state.step += 1
                losses.append(value)
            if not losses:
                break
            dev = evaluate_loss(model, dev_set, cfg.batch_size)
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "dev_loss": dev, "lr": lr}
            state.history.append(row)
            if hist_fh:
                hist_fh.write(json.dumps(row) + "\n")
                hist_fh.flush()
            improved, stop = state.schedule.update(dev)
            if improved:
                best_state = model.state_dict()
                if checkpoint_path:
                    Mo.save_checkpoint(model, checkpoint_path, extra={"epoch": epoch, "dev_loss": dev,
                                                                       "dev_loss_on": "segments"})
            log.info("epoch=%d train_loss=%.4f dev_loss=%.4f lr=%g", epoch, row["train_loss"], dev, lr)
            if stop:
                log.info("event=early_stop epoch=%d", epoch)
                break
    finally:
        if hist_fh:
            hist_fh.close()
    best = model.copy()
    best.load_state_dict(best_state)
    return best, state.history


def _dump_divergence(model, state, value, history_path):
    dump = {
        "epoch": state.epoch,
        "step": state.step,
        "loss": repr(value),
        "lr": state.schedule.lr,
        "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in model.params.items()},
        "non_finite_params": [k for k, p in model.params.items() if not np.all(np.isfinite(p.data))],
        "time": time.time(),
    }
    if history_path:
        Path(str(history_path) + ".divergence.json").write_text(json.dumps(dump, indent=2))
    raise TrainingDiverged(f"non-finite loss at epoch {state.epoch}, step {state.step}: {dump}")


def overfit(model: Mo.TseNet, examples: Sequence[TrainExample], steps: int, lr: float = 1e-3,
            batch_size: int | None = None, seed: int = 0, log_every: int = 0,
            state: G.AdamState | None = None) -> list[float]:
    """Plain Adam on a fixed set of examples; returns the loss per step.

    Pass the same ``state`` to successive calls to continue one optimizer run.
    """
    rng = np.random.default_rng(seed)
    batch_size = batch_size or len(examples)
    state = G.AdamState() if state is None else state
    params = {k: p.data for k, p in model.params.items()}
    trace = []
    for step in range(steps):
        idx = rng.permutation(len(examples))[:batch_size]
        model.zero_grad()
        loss = neg_si_sdr_loss(model, [examples[i] for i in idx])
        G.backward(loss)
        G.adam_step(params, {k: p.grad for k, p in model.params.items()}, state, lr)
        trace.append(float(loss.data))
        if log_every and step % log_every == 0:
            log.info("step=%d loss=%.4f", step, trace[-1])
    return trace


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
