"""GMM-UBM, total variability model and i-vector extraction.

The UBM is a diagonal-covariance GMM grown by binary splitting. The total
variability model maps an R-dimensional latent factor to offsets of the UBM
mean supervector; an utterance's i-vector is the posterior mean of that factor
given its centred Baum-Welch statistics:

    w = (I + sum_c n_c T_c' S_c^-1 T_c)^-1  sum_c T_c' S_c^-1 f_c
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)
_MAGIC = b"TSIV"
_VERSION = 1
_KIND_UBM, _KIND_TV = 1, 2


class IvectorError(RuntimeError):
    pass


@dataclass
class GmmUbm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    var_floor: np.ndarray | None = None
    loglik_history: list[float] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_loglik(self, x: np.ndarray) -> np.ndarray:
        """log w_c + log N(x_t | mean_c, var_c), shape (frames, C)."""
        prec = 1.0 / self.variances
        const = (np.log(self.weights)
                 - 0.5 * (self.dim * _LOG_2PI + np.sum(np.log(self.variances), axis=1)
                          + np.sum(self.means ** 2 * prec, axis=1)))
        return const + x @ (self.means * prec).T - 0.5 * (x ** 2) @ prec.T

    def posteriors(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Responsibilities (frames, C) and per-frame log-likelihood."""
        lp = self.component_loglik(x)
        m = lp.max(axis=1, keepdims=True)
        frame_ll = m[:, 0] + np.log(np.sum(np.exp(lp - m), axis=1))
        return np.exp(lp - frame_ll[:, None]), frame_ll

    def loglik(self, x: np.ndarray) -> float:
        return float(np.sum(self.posteriors(x)[1]))


@dataclass
class BaumWelchStats:
    n: np.ndarray  # (C,)
    f: np.ndarray  # (C, F), centred on the UBM means

    def __add__(self, other: "BaumWelchStats") -> "BaumWelchStats":
        return BaumWelchStats(self.n + other.n, self.f + other.f)

    def scaled(self, k: float) -> "BaumWelchStats":
        return BaumWelchStats(k * self.n, k * self.f)


@dataclass
class TotalVariabilityMatrix:
    T: np.ndarray  # (C, F, R)
    objective_history: list[float] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.T.shape[2]

    def as_matrix(self) -> np.ndarray:
        c, f, r = self.T.shape
        return self.T.reshape(c * f, r)


# ---------------------------------------------------------------------------
# UBM


def _chunks(x: np.ndarray, size: int = 8192):
    for i in range(0, x.shape[0], size):
        yield x[i:i + size]


def _em_accumulate(ubm: GmmUbm, x: np.ndarray):
    c, f = ubm.n_components, ubm.dim
    n = np.zeros(c)
    s1 = np.zeros((c, f))
    s2 = np.zeros((c, f))
    total = 0.0
    for chunk in _chunks(x):
        gamma, ll = ubm.posteriors(chunk)
        n += gamma.sum(axis=0)
        s1 += gamma.T @ chunk
        s2 += gamma.T @ chunk ** 2
        total += float(ll.sum())
    return n, s1, s2, total


def _m_step(ubm: GmmUbm, n, s1, s2, n_frames) -> list[int]:
    """Update in place. Components with occupancy < 1 keep their old Gaussian."""
    starved = [int(i) for i in np.flatnonzero(n < 1.0)]
    ok = n >= 1.0
    ubm.weights = n / n_frames
    means = ubm.means.copy()
    variances = ubm.variances.copy()
    means[ok] = s1[ok] / n[ok, None]
    variances[ok] = s2[ok] / n[ok, None] - means[ok] ** 2
    ubm.means = means
    ubm.variances = np.maximum(variances, ubm.var_floor)
    # a starved component may have ~0 weight; keep it usable
    ubm.weights = np.maximum(ubm.weights, 1e-300)
    ubm.weights /= ubm.weights.sum()
    return starved


def _split(ubm: GmmUbm, idx: Sequence[int], offset: float = 0.2):
    """Replace each listed component by two copies shifted by +-offset standard deviations."""
    w, mu, var = list(ubm.weights), list(ubm.means), list(ubm.variances)
    for i in idx:
        step = offset * np.sqrt(ubm.variances[i])
        w[i] = ubm.weights[i] / 2
        mu[i] = ubm.means[i] + step
        w.append(ubm.weights[i] / 2)
        mu.append(ubm.means[i] - step)
        var.append(ubm.variances[i].copy())
    ubm.weights = np.array(w)
    ubm.means = np.array(mu)
    ubm.variances = np.array(var)


def _resplit_starved(ubm: GmmUbm, starved: Sequence[int], rng: np.random.Generator):
    for i in starved:
        heavy = int(np.argmax(ubm.weights))
        jitter = 0.2 * np.sqrt(ubm.variances[heavy]) * (1.0 + 0.1 * rng.standard_normal(ubm.dim))
        half = ubm.weights[heavy] / 2
        ubm.means[i] = ubm.means[heavy] - jitter
        ubm.means[heavy] = ubm.means[heavy] + jitter
        ubm.variances[i] = ubm.variances[heavy]
        ubm.weights[i] = ubm.weights[heavy] = half
    ubm.weights /= ubm.weights.sum()


def train_ubm(features: Iterable[np.ndarray], n_components: int = 512, em_iters: int = 10,
              seed: int = 0, split_iters: int = 2, var_floor_frac: float = 0.01) -> GmmUbm:
    """Train a diagonal GMM by binary splitting followed by ``em_iters`` EM passes.

    ``loglik_history`` of the result holds the total data log-likelihood before
    each of the final EM passes and after the last one.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in features]
    mats = [m for m in mats if m.size]
    if not mats:
        raise IvectorError("cannot train a UBM on empty data")
    if em_iters < 1:
        raise IvectorError("em_iters must be >= 1")
    x = np.vstack(mats)
    n_frames = x.shape[0]
    if n_frames < n_components:
        raise IvectorError(f"{n_frames} frames cannot support {n_components} components")
    rng = np.random.default_rng(seed)

    mean = x.mean(axis=0)
    var = x.var(axis=0)
    floor = var_floor_frac * var
    ubm = GmmUbm(np.ones(1), mean[None].copy(), np.maximum(var, floor)[None].copy(), var_floor=floor)

    while ubm.n_components < n_components:
        k = min(ubm.n_components, n_components - ubm.n_components)
        heaviest = np.argsort(-ubm.weights, kind="stable")[:k]
        _split(ubm, heaviest)
        for _ in range(split_iters):
            n, s1, s2, _ = _em_accumulate(ubm, x)
            starved = _m_step(ubm, n, s1, s2, n_frames)
            if starved:
                log.info("event=ubm_resplit starved=%d", len(starved))
                _resplit_starved(ubm, starved, rng)

    history = []
    for it in range(em_iters):
        n, s1, s2, ll = _em_accumulate(ubm, x)
        history.append(ll)
        starved = _m_step(ubm, n, s1, s2, n_frames)
        if starved:
            log.warning("event=ubm_starved iter=%d components=%d", it, len(starved))
        log.debug("UBM EM iter %d: avg loglik %.6f", it, ll / n_frames)
    history.append(ubm.loglik(x))
    ubm.loglik_history = history
    return ubm


# ---------------------------------------------------------------------------
# statistics and i-vectors


def accumulate_stats(ubm: GmmUbm, feats: np.ndarray) -> BaumWelchStats:
    """Zero-order and centred first-order Baum-Welch statistics."""
    feats = np.asarray(feats, dtype=np.float64)
    n = np.zeros(ubm.n_components)
    s1 = np.zeros((ubm.n_components, ubm.dim))
    for chunk in _chunks(feats):
        gamma, _ = ubm.posteriors(chunk)
        n += gamma.sum(axis=0)
        s1 += gamma.T @ chunk
    return BaumWelchStats(n, s1 - n[:, None] * ubm.means)


def _whiten(ubm: GmmUbm, tv: TotalVariabilityMatrix):
    inv_sd = 1.0 / np.sqrt(ubm.variances)
    return tv.T * inv_sd[:, :, None], inv_sd


def _spd_solve(a: np.ndarray, b: np.ndarray, what: str = "system"):
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise IvectorError(f"{what} is not symmetric positive definite") from exc
    x = linalg.cho_solve(factor, b)
    if not np.all(np.isfinite(x)):
        raise IvectorError(f"non-finite solution of {what}")
    return x, factor


class _Posterior:
    """Precomputed pieces for repeated i-vector posteriors under one model."""

    def __init__(self, ubm: GmmUbm, tv: TotalVariabilityMatrix):
        if tv.T.shape[:2] != ubm.means.shape:
            raise IvectorError(f"T blocks {tv.T.shape[:2]} do not match UBM {ubm.means.shape}")
        self.Tw, self.inv_sd = _whiten(ubm, tv)
        self.TT = np.einsum("cfr,cfs->crs", self.Tw, self.Tw)
        self.rank = tv.rank

    def precision_and_linear(self, stats: BaumWelchStats):
        prec = np.eye(self.rank) + np.tensordot(stats.n, self.TT, axes=1)
        b = np.einsum("cfr,cf->r", self.Tw, stats.f * self.inv_sd)
        return prec, b

    def solve(self, stats: BaumWelchStats, need_cov: bool = False):
        prec, b = self.precision_and_linear(stats)
        w, factor = _spd_solve(prec, b, "i-vector precision")
        cov = linalg.cho_solve(factor, np.eye(self.rank)) if need_cov else None
        return w, cov, prec, b, factor


def extract_ivector(ubm: GmmUbm, tv: TotalVariabilityMatrix, stats: BaumWelchStats,
                    check_residual: bool = True) -> np.ndarray:
    """Posterior mean of the latent factor (no length normalization)."""
    post = _Posterior(ubm, tv)
    w, _, prec, b, _ = post.solve(stats)
    if check_residual and np.linalg.norm(b) > 0:
        resid = np.linalg.norm(prec @ w - b) / np.linalg.norm(b)
        if resid > 1e-8:
            raise IvectorError(f"i-vector solve residual {resid:.3g} exceeds 1e-8")
    return w


def extract_ivectors(ubm: GmmUbm, tv: TotalVariabilityMatrix,
                     stats: Sequence[BaumWelchStats]) -> np.ndarray:
    post = _Posterior(ubm, tv)
    return np.array([post.solve(s)[0] for s in stats])


def tv_objective(ubm: GmmUbm, tv: TotalVariabilityMatrix, stats: Sequence[BaumWelchStats]) -> float:
    """Log-likelihood of the centred statistics, dropping terms that do not depend on T.

    sum_u 1/2 b_u' L_u^-1 b_u - 1/2 log det L_u
    """
    post = _Posterior(ubm, tv)
    total = 0.0
    for s in stats:
        w, _, _, b, factor = post.solve(s)
        total += 0.5 * float(b @ w) - float(np.sum(np.log(np.diag(factor[0]))))
    return total


def train_tv(ubm: GmmUbm, stats: Sequence[BaumWelchStats], rank: int = 400, em_iters: int = 5,
             seed: int = 0, init: np.ndarray | None = None) -> TotalVariabilityMatrix:
    """EM for the total variability matrix.

    ``objective_history`` holds :func:`tv_objective` before each iteration and
    after the last one; EM guarantees it never decreases.
    """
    if em_iters < 1:
        raise IvectorError("em_iters must be >= 1")
    if not stats:
        raise IvectorError("no statistics to train on")
    c, f = ubm.means.shape
    if len(stats) < rank:
        log.warning("event=tv_few_utterances rank=%d utterances=%d", rank, len(stats))
    if init is None:
        rng = np.random.default_rng(seed)
        scale = 0.001 * np.sqrt(np.mean(ubm.variances))
        init = scale * rng.standard_normal((c, f, rank))
    tv = TotalVariabilityMatrix(np.array(init, dtype=np.float64))
    sd = np.sqrt(ubm.variances)

    history = []
    for it in range(em_iters):
        post = _Posterior(ubm, tv)
        acc_a = np.zeros((c, rank, rank))
        acc_c = np.zeros((c, f, rank))
        objective = 0.0
        for s in stats:
            w, cov, _, b, factor = post.solve(s, need_cov=True)
            objective += 0.5 * float(b @ w) - float(np.sum(np.log(np.diag(factor[0]))))
            second = cov + np.outer(w, w)
            acc_a += s.n[:, None, None] * second
            acc_c += (s.f * post.inv_sd)[:, :, None] * w
        history.append(objective)
        new_t = np.empty_like(tv.T)
        for k in range(c):
            a = acc_a[k]
            try:
                factor = linalg.cho_factor(a, lower=True)
            except linalg.LinAlgError:
                log.warning("event=tv_singular component=%d ridge=1e-6", k)
                factor = linalg.cho_factor(a + 1e-6 * np.eye(rank), lower=True)
            new_t[k] = linalg.cho_solve(factor, acc_c[k].T).T
        tv.T = new_t * sd[:, :, None]
        log.debug("TV EM iter %d: objective %.6f", it, objective)
    history.append(tv_objective(ubm, tv, stats))
    tv.objective_history = history
    return tv


# ---------------------------------------------------------------------------
# model files: magic, u32 version, u32 kind, u32 dims..., f64 little-endian payload


def save_ubm(ubm: GmmUbm, path):
    c, f = ubm.means.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<IIII", _VERSION, _KIND_UBM, c, f))
        for arr in (ubm.weights, ubm.means, ubm.variances):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_tv(tv: TotalVariabilityMatrix, path):
    c, f, r = tv.T.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<IIIII", _VERSION, _KIND_TV, c, f, r))
        fh.write(np.ascontiguousarray(tv.T, dtype="<f8").tobytes())


def _read_header(data: bytes, kind: int, n_dims: int):
    if data[:4] != _MAGIC:
        raise IvectorError("not an i-vector model file (bad magic)")
    version, got_kind = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise IvectorError(f"unsupported model file version {version}")
    if got_kind != kind:
        raise IvectorError(f"model file holds kind {got_kind}, expected {kind}")
    dims = struct.unpack_from("<" + "I" * n_dims, data, 12)
    return dims, 12 + 4 * n_dims


def _payload(data: bytes, offset: int, count: int) -> np.ndarray:
    if len(data) - offset < 8 * count:
        raise IvectorError("model file is truncated")
    return np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)


def load_ubm(path) -> GmmUbm:
    data = Path(path).read_bytes()
    (c, f), pos = _read_header(data, _KIND_UBM, 2)
    w = _payload(data, pos, c)
    mu = _payload(data, pos + 8 * c, c * f).reshape(c, f)
    var = _payload(data, pos + 8 * (c + c * f), c * f).reshape(c, f)
    return GmmUbm(w, mu, var)


def load_tv(path) -> TotalVariabilityMatrix:
    data = Path(path).read_bytes()
    (c, f, r), pos = _read_header(data, _KIND_TV, 3)
    return TotalVariabilityMatrix(_payload(data, pos, c * f * r).reshape(c, f, r))


def write_ivectors_jsonl(rows: Iterable[tuple[str, str, np.ndarray]], path):
    with open(path, "w") as fh:
        for utt_id, spk_id, vec in rows:
            fh.write(json.dumps({"utterance_id": utt_id, "speaker_id": spk_id,
                                 "vec": [float(v) for v in vec]}) + "\n")


def read_ivectors_jsonl(path) -> dict[str, dict]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                row["vec"] = np.asarray(row["vec"], dtype=np.float64)
                out[row["utterance_id"]] = row
    return out
