"""The time-domain speaker extraction network.

mixture -> conv encoder + ReLU (A) -> channel norm -> 1x1 conv (B)
        -> r x [dense+ReLU i-vector adapter, repeat + concat, b TCN blocks]
        -> 1x1 conv + sigmoid (mask W) -> W * A -> overlap-add decoder.

Internally sequences are (batch, channels, frames), so the encoded mixture is
(B, M, K) rather than K x M.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import graph as G
from .graph import Tensor

CHECKPOINT_MAGIC = b"TSNC"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class TseNetConfig:
    M: int = 256  # encoder filters
    L: int = 20  # filter length in samples
    N: int = 256  # TCN residual channels
    O: int = 512  # depthwise channels
    P: int = 3  # depthwise kernel width
    b: int = 8  # blocks per batch
    r: int = 4  # batches
    D1: int = 400  # i-vector dimension
    D2: int = 100  # adapted i-vector dimension

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ModelError(f"config field {f.name} must be positive")
        if self.L % 2:
            raise ModelError(f"L must be even, got {self.L}")
        if self.P % 2 == 0:
            raise ModelError(f"P must be odd, got {self.P}")

    @property
    def stride(self) -> int:
        return self.L // 2

    @property
    def receptive_radius(self) -> int:
        """Frames on either side that can influence one mask frame."""
        return self.r * (self.P - 1) // 2 * (2 ** self.b - 1)

    def to_dict(self):
        return dataclasses.asdict(self)


FULL_CONFIG = TseNetConfig()
TINY_CONFIG = TseNetConfig(M=16, L=4, N=16, O=32, P=3, b=2, r=1, D1=8, D2=4)
TINY_PLUS_CONFIG = TseNetConfig(M=64, L=20, N=64, O=128, P=3, b=4, r=2, D1=400, D2=100)


def _param_shapes(cfg: TseNetConfig) -> list[tuple[str, tuple, str, int]]:
    """(name, shape, init kind, fan_in) in a fixed order."""
    shapes = [
        ("encoder.U", (cfg.M, 1, cfg.L), "uniform", cfg.L),
        ("enc_norm.gain", (cfg.M,), "ones", 0),
        ("enc_norm.bias", (cfg.M,), "zeros", 0),
        ("bottleneck.w", (cfg.N, cfg.M), "uniform", cfg.M),
        ("bottleneck.b", (cfg.N,), "zeros", 0),
    ]
    for i in range(cfg.r):
        shapes += [
            (f"adapter{i}.w", (cfg.D2, cfg.D1), "uniform", cfg.D1),
            (f"adapter{i}.b", (cfg.D2,), "zeros", 0),
        ]
        for j in range(cfg.b):
            width = cfg.N + cfg.D2 if j == 0 else cfg.N
            p = f"tcn{i}.{j}."
            shapes += [
                (p + "in_w", (cfg.O, width), "uniform", width),
                (p + "in_b", (cfg.O,), "zeros", 0),
                (p + "prelu1", (cfg.O,), "prelu", 0),
                (p + "norm1.gain", (cfg.O,), "ones", 0),
                (p + "norm1.bias", (cfg.O,), "zeros", 0),
                (p + "dconv", (cfg.O, cfg.P), "uniform", cfg.P),
                (p + "prelu2", (cfg.O,), "prelu", 0),
                (p + "norm2.gain", (cfg.O,), "ones", 0),
                (p + "norm2.bias", (cfg.O,), "zeros", 0),
                (p + "out_w", (cfg.N, cfg.O), "uniform", cfg.O),
                (p + "out_b", (cfg.N,), "zeros", 0),
            ]
    shapes += [
        ("mask.w", (cfg.M, cfg.N), "uniform", cfg.N),
        ("mask.b", (cfg.M,), "zeros", 0),
        ("decoder.V", (cfg.M, cfg.L), "uniform", cfg.M),
    ]
    return shapes


class TseNet:
    """Parameters plus the forward computation."""

    def __init__(self, config: TseNetConfig, params: dict[str, Tensor], seed: int = 0):
        self.config = config
        self.params = params
        self.seed = seed

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "TseNet":
        params = {k: G.parameter(v.data.astype(dtype), k) for k, v in self.params.items()}
        return TseNet(self.config, params, self.seed)

    def copy(self) -> "TseNet":
        return self.astype(self.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            self.params[k].data[...] = v


def build(config: TseNetConfig = FULL_CONFIG, seed: int = 0, dtype=np.float32) -> TseNet:
    """Initialize a model deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind, fan_in in _param_shapes(config):
        if kind == "uniform":
            bound = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "prelu":
            data = np.full(shape, 0.25)
        else:
            data = np.zeros(shape)
        params[name] = G.parameter(data.astype(dtype), name)
    return TseNet(config, params, seed)


def parameter_count(config: TseNetConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _, _ in _param_shapes(config))


# ---------------------------------------------------------------------------
# forward pieces


def padded_length(n_samples: int, L: int) -> int:
    """Smallest length >= n_samples (and >= L) whose hop count is whole."""
    if n_samples < 1:
        raise ModelError("cannot encode an empty signal")
    hop = L // 2
    if n_samples <= L:
        return L
    return L + -(-(n_samples - L) // hop) * hop


def frame_count(n_samples: int, L: int) -> int:
    return 2 * (padded_length(n_samples, L) - L) // L + 1


def _as_batch(wave) -> np.ndarray:
    x = np.asarray(getattr(wave, "samples", wave))
    return x[None] if x.ndim == 1 else x


def encode(model: TseNet, mixture) -> Tensor:
    """A = ReLU(conv(y, U)) as a (batch, M, K) tensor; input is tail-padded as needed."""
    y = _as_batch(mixture)
    cfg = model.config
    total = padded_length(y.shape[-1], cfg.L)
    y = np.pad(y, ((0, 0), (0, total - y.shape[-1]))).astype(model.dtype)
    x = Tensor(y[:, None, :])
    return G.relu(G.conv1d(x, model["encoder.U"], stride=cfg.stride))


def tcn_block(model: TseNet, x: Tensor, prefix: str, dilation: int, norm_stats: dict | None = None) -> Tensor:
    p = model.params

    def stats(key):
        return None if norm_stats is None else norm_stats.setdefault(prefix + key, {})

    h = G.pointwise_conv(x, p[prefix + "in_w"], p[prefix + "in_b"])
    h = G.prelu(h, p[prefix + "prelu1"])
    h = G.global_layer_norm(h, p[prefix + "norm1.gain"], p[prefix + "norm1.bias"], stats=stats("norm1"))
    h = G.depthwise_conv1d_dilated(h, p[prefix + "dconv"], dilation)
    h = G.prelu(h, p[prefix + "prelu2"])
    h = G.global_layer_norm(h, p[prefix + "norm2.gain"], p[prefix + "norm2.bias"], stats=stats("norm2"))
    return G.pointwise_conv(h, p[prefix + "out_w"], p[prefix + "out_b"])


def extract_mask(model: TseNet, A, ivec, norm_stats: dict | None = None) -> Tensor:
    """Speaker-conditioned mask W in (0, 1), same shape as A.

    Each batch of TCN blocks starts by concatenating the adapted i-vector to
    the running representation; that first block's residual adds the
    representation from before the concatenation.
    """
    cfg = model.config
    p = model.params
    A = A if isinstance(A, Tensor) else Tensor(np.asarray(A, dtype=model.dtype))
    if A.data.ndim == 2:
        A = G.reshape(A, (1, *A.shape))
    ivec = np.asarray(getattr(ivec, "ivec", ivec), dtype=model.dtype)
    if ivec.ndim == 1:
        ivec = np.broadcast_to(ivec, (A.shape[0], ivec.size))
    if A.shape[1] != cfg.M:
        raise ModelError(f"representation has {A.shape[1]} channels, model expects M={cfg.M}")
    if ivec.shape != (A.shape[0], cfg.D1):
        raise ModelError(f"i-vectors of shape {ivec.shape}, expected ({A.shape[0]}, {cfg.D1})")
    frames = A.shape[-1]
    spk = Tensor(ivec)

    h = G.channelwise_norm(A, p["enc_norm.gain"], p["enc_norm.bias"])
    x = G.pointwise_conv(h, p["bottleneck.w"], p["bottleneck.b"])
    for i in range(cfg.r):
        emb = G.relu(G.dense(spk, p[f"adapter{i}.w"], p[f"adapter{i}.b"]))
        block_in = G.concat_channels(x, G.repeat_vector(emb, frames))
        for j in range(cfg.b):
            y = tcn_block(model, block_in, f"tcn{i}.{j}.", 2 ** j, norm_stats)
            x = G.add(x, y)
            block_in = x
    return G.sigmoid(G.pointwise_conv(x, p["mask.w"], p["mask.b"]))


def apply_mask(A: Tensor, W: Tensor) -> Tensor:
    if A.shape != W.shape:
        raise ModelError(f"mask shape {W.shape} does not match representation {A.shape}")
    return G.mul(W, A)


def decode(model: TseNet, S, length: int | None = None) -> Tensor:
    """Overlap-add decoder; returns (batch, samples), trimmed to ``length`` if given."""
    S = S if isinstance(S, Tensor) else Tensor(np.asarray(S, dtype=model.dtype))
    if S.data.ndim == 2:
        S = G.reshape(S, (1, *S.shape))
    out = G.transposed_conv1d(S, model["decoder.V"], model.config.stride)
    out = G.reshape(out, (out.shape[0], out.shape[-1]))
    if length is not None:
        out = G.slice_time(out, 0, length)
    return out


def forward(model: TseNet, mixture, ivec, norm_stats: dict | None = None) -> tuple[Tensor, Tensor]:
    """Return (estimate, mask). The estimate has the mixture's length."""
    y = _as_batch(mixture)
    A = encode(model, y)
    W = extract_mask(model, A, ivec, norm_stats)
    est = decode(model, apply_mask(A, W), length=y.shape[-1])
    return est, W


def extract(model: TseNet, mixture, ivec) -> np.ndarray:
    """Inference helper: a single waveform in, a single waveform out."""
    est, _ = forward(model, mixture, ivec)
    return est.data[0].astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 version, u32 header length, JSON header, raw
# little-endian arrays in header order, sha256 of everything before it.


def save_checkpoint(model: TseNet, path, extra: dict | None = None):
    dtype = np.dtype(model.dtype).newbyteorder("<")
    header = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "dtype": dtype.str,
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) + head)
    for v in model.params.values():
        body += np.ascontiguousarray(v.data, dtype=dtype).tobytes()
    body += hashlib.sha256(body).digest()
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> TseNet:
    data = Path(path).read_bytes()
    if len(data) < 44 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a TseNet checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checksum mismatch in {path}: file is corrupt or truncated")
    version, head_len = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    header = json.loads(body[12:12 + head_len])
    dtype = np.dtype(header["dtype"])
    pos = 12 + head_len
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=pos).reshape(shape)
        params[name] = G.parameter(arr.astype(dtype.newbyteorder("=")), name)
        pos += count * dtype.itemsize
    if pos != len(body):
        raise CheckpointError(f"checkpoint payload size mismatch in {path}")
    return TseNet(TseNetConfig(**header["config"]), params, header["seed"])


def checkpoint_extra(path) -> dict:
    data = Path(path).read_bytes()
    _, head_len = struct.unpack_from("<II", data, 4)
    return json.loads(data[12:12 + head_len]).get("extra", {})
