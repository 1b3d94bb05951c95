"""A small reverse-mode differentiation engine over numpy arrays.

Only the operators the extraction network needs are provided. Sequence tensors
are laid out as (batch, channels, time); a 2-D (channels, time) input is
treated as a batch of one and the result is returned without the batch axis.

Every operator records a closure that maps the output gradient to its input
gradients. :func:`backward` walks the graph once in reverse topological order
and accumulates gradients additively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

NORM_EPS = 1e-8

# when a list, relu/prelu append their activation patterns (finite-difference checks)
_kink_trace: list | None = None


class GraphError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 parents: tuple = (), backward_fn: Callable | None = None, op: str = ""):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = self.name or self.op or "tensor"
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


def _node(data, parents, backward_fn, op) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, parents=parents, backward_fn=backward_fn, op=op)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor that ``loss`` depends on and that requires it."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any parameter")
    order = _topo_order(loss)
    for node in order:
        if node.backward_fn is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), bw, "mul")


elementwise_mul = mul


def _trace_kinks(mask):
    if _kink_trace is not None:
        _kink_trace.append(mask)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _trace_kinks(mask)
    return _node(x.data * mask, (x,), lambda g: _accumulate(x, g * mask), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _node(y, (x,), lambda g: _accumulate(x, g * y * (1 - y)), "sigmoid")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """max(x, 0) + slope_c * min(x, 0) with one slope per channel (axis -2)."""
    pos = x.data > 0
    _trace_kinks(pos)
    a = slope.data[:, None]
    scale = pos * (1 - a) + a

    def bw(g):
        _accumulate(x, g * scale)
        gx = (g * x.data) * ~pos
        _accumulate(slope, gx.reshape(-1, *gx.shape[-2:]).sum(axis=(0, 2)))
    return _node(x.data * scale, (x, slope), bw, "prelu")


# ---------------------------------------------------------------------------
# reductions and shape bookkeeping


def sum_all(x: Tensor) -> Tensor:
    return _node(np.sum(x.data, dtype=np.float64).astype(x.dtype), (x,),
                 lambda g: _accumulate(x, np.broadcast_to(g, x.shape)), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(np.mean(x.data, dtype=np.float64).astype(x.dtype), (x,),
                 lambda g: _accumulate(x, np.broadcast_to(g / n, x.shape)), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(old)), "reshape")


def slice_time(x: Tensor, start: int, stop: int) -> Tensor:
    """x[..., start:stop]."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        _accumulate(x, full)
    return _node(x.data[..., start:stop], (x,), bw, "slice_time")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-1] or a.data.ndim != b.data.ndim:
        raise GraphError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[-2]

    def bw(g):
        _accumulate(a, g[..., :ca, :])
        _accumulate(b, g[..., ca:, :])
    return _node(np.concatenate([a.data, b.data], axis=-2), (a, b), bw, "concat")


def repeat_vector(v: Tensor, time: int) -> Tensor:
    """(..., dim) -> (..., dim, time) by repeating along a new time axis."""
    out = np.repeat(v.data[..., None], time, axis=-1)
    return _node(out, (v,), lambda g: _accumulate(v, g.sum(axis=-1)), "repeat")


def _batched(fn):
    """Let a (batch, channels, time) op also accept an unbatched (channels, time) input."""

    def wrapper(x: Tensor, *args, **kwargs):
        if x.data.ndim == 2:
            out = fn(reshape(x, (1, *x.shape)), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.data.ndim != 3:
            raise GraphError(f"{fn.__name__} expects (batch, channels, time), got {x.shape}")
        return fn(x, *args, **kwargs)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# convolutions


def conv_out_len(time: int, width: int, stride: int) -> int:
    return (time - width) // stride + 1


@_batched
def conv1d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation; kernels are (c_out, c_in, width)."""
    bsz, c_in, time = x.shape
    c_out, k_in, width = kernels.shape
    if k_in != c_in:
        raise GraphError(f"kernel expects {k_in} input channels, input has {c_in}")
    if time < width:
        raise GraphError(f"input of length {time} is shorter than the kernel width {width}")
    frames = conv_out_len(time, width, stride)
    cols = np.lib.stride_tricks.sliding_window_view(x.data, width, axis=2)[:, :, ::stride]
    cols = cols.transpose(0, 2, 1, 3).reshape(bsz, frames, c_in * width)
    w_flat = kernels.data.reshape(c_out, c_in * width)
    out = (cols @ w_flat.T).transpose(0, 2, 1)

    def bw(g):
        gt = g.transpose(0, 2, 1)
        _accumulate(kernels, np.tensordot(gt, cols, axes=([0, 1], [0, 1])).reshape(kernels.shape))
        if x.requires_grad:
            dcols = (gt @ w_flat).reshape(bsz, frames, c_in, width).transpose(0, 2, 1, 3)
            dx = np.zeros_like(x.data)
            span = stride * (frames - 1) + 1
            for j in range(width):
                dx[:, :, j:j + span:stride] += dcols[..., j]
            _accumulate(x, dx)
    return _node(np.ascontiguousarray(out), (x, kernels), bw, "conv1d")


@_batched
def transposed_conv1d(x: Tensor, basis: Tensor, stride: int) -> Tensor:
    """Overlap-add of basis rows weighted by x: (B, C, K) -> (B, 1, (K-1)*stride + width)."""
    bsz, c_in, frames = x.shape
    k_in, width = basis.shape
    if k_in != c_in:
        raise GraphError(f"basis has {k_in} rows, input has {c_in} channels")
    if frames < 1:
        raise GraphError("transposed convolution needs at least one frame")
    time = (frames - 1) * stride + width
    contrib = x.data.transpose(0, 2, 1) @ basis.data  # (B, K, width)
    out = np.zeros((bsz, time), dtype=np.result_type(x.data, basis.data))
    span = stride * (frames - 1) + 1
    for j in range(width):
        out[:, j:j + span:stride] += contrib[:, :, j]

    def bw(g):
        g = g[:, 0, :]
        dcontrib = np.empty_like(contrib)
        for j in range(width):
            dcontrib[:, :, j] = g[:, j:j + span:stride]
        _accumulate(basis, np.tensordot(x.data, dcontrib, axes=([0, 2], [0, 1])))
        _accumulate(x, (dcontrib @ basis.data.T).transpose(0, 2, 1))
    return _node(out[:, None, :], (x, basis), bw, "transposed_conv1d")


@_batched
def depthwise_conv1d_dilated(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Per-channel dilated cross-correlation with symmetric zero padding (length preserving)."""
    bsz, chans, time = x.shape
    k_ch, width = kernel.shape
    if k_ch != chans:
        raise GraphError(f"kernel has {k_ch} channels, input has {chans}")
    if width % 2 == 0:
        raise GraphError(f"depthwise kernel width must be odd, got {width}")
    if dilation < 1:
        raise GraphError(f"dilation must be >= 1, got {dilation}")
    pad = dilation * (width - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    out = np.zeros_like(x.data, dtype=np.result_type(x.data, kernel.data))
    for j in range(width):
        out += kernel.data[:, j, None] * xp[:, :, j * dilation:j * dilation + time]

    def bw(g):
        dk = np.empty_like(kernel.data)
        dxp = np.zeros_like(xp)
        for j in range(width):
            sl = slice(j * dilation, j * dilation + time)
            dk[:, j] = np.einsum("bct,bct->c", g, xp[:, :, sl])
            dxp[:, :, sl] += kernel.data[:, j, None] * g
        _accumulate(kernel, dk)
        _accumulate(x, dxp[:, :, pad:pad + time])
    return _node(out, (x, kernel), bw, "depthwise_conv1d")


@_batched
def pointwise_conv(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution: the same affine map across channels at every time step."""
    if weights.shape[1] != x.shape[1]:
        raise GraphError(f"weights expect {weights.shape[1]} channels, input has {x.shape[1]}")
    out = np.matmul(weights.data, x.data)
    if bias is not None:
        out = out + bias.data[:, None]
    parents = (x, weights) if bias is None else (x, weights, bias)

    def bw(g):
        _accumulate(weights, np.tensordot(g, x.data, axes=([0, 2], [0, 2])))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2)))
        if x.requires_grad:
            _accumulate(x, np.matmul(weights.data.T, g))
    return _node(out, parents, bw, "pointwise_conv")


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ W' + b for x of shape (dim_in,) or (batch, dim_in)."""
    out = x.data @ weights.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weights) if bias is None else (x, weights, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        _accumulate(weights, g2.T @ x2)
        if bias is not None:
            _accumulate(bias, g2.sum(axis=0))
        _accumulate(x, g @ weights.data)
    return _node(out, parents, bw, "dense")


# ---------------------------------------------------------------------------
# normalization


def _standardize(x: Tensor, gain: Tensor, bias: Tensor, axes: tuple, eps: float, op: str) -> Tensor:
    xd = x.data
    mu = np.mean(xd, axis=axes, keepdims=True, dtype=np.float64)
    centred = xd - mu.astype(xd.dtype)
    var = np.mean(centred * centred, axis=axes, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centred * inv
    out = gain.data[:, None] * xhat + bias.data[:, None]

    def bw(g):
        _accumulate(gain, (g * xhat).reshape(-1, *g.shape[-2:]).sum(axis=(0, 2)))
        _accumulate(bias, g.reshape(-1, *g.shape[-2:]).sum(axis=(0, 2)))
        if x.requires_grad:
            gh = g * gain.data[:, None]
            m1 = np.mean(gh, axis=axes, keepdims=True, dtype=np.float64).astype(xd.dtype)
            m2 = np.mean(gh * xhat, axis=axes, keepdims=True, dtype=np.float64).astype(xd.dtype)
            _accumulate(x, inv * (gh - m1 - xhat * m2))
    return _node(out, (x, gain, bias), bw, op)


def channelwise_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Standardize across channels separately at each time step, then per-channel affine."""
    return _standardize(x, gain, bias, (-2,), eps, "channelwise_norm")


def global_layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = NORM_EPS,
                      stats: dict | None = None) -> Tensor:
    """Standardize over channels and time jointly (per batch item), then per-channel affine.

    ``stats`` is a probe hook: an empty dict records (mean, variance) and a
    filled one replays them instead of measuring the input. The replayed form is
    a fixed affine map and is not used in training.
    """
    if stats is None:
        return _standardize(x, gain, bias, (-2, -1), eps, "global_layer_norm")
    if not stats:
        xd = x.data
        stats["mean"] = np.mean(xd, axis=(-2, -1), keepdims=True, dtype=np.float64)
        stats["var"] = np.var(xd, axis=(-2, -1), keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(stats["var"] + eps)
    centred = add(x, as_tensor(-stats["mean"]))
    xhat = mul(centred, as_tensor(inv))
    return add(mul(xhat, reshape(gain, (-1, 1))), reshape(bias, (-1, 1)))


# ---------------------------------------------------------------------------
# objective


def si_sdr_values(est: Tensor, ref: np.ndarray) -> Tensor:
    """Uncapped SI-SDR in dB of each row of ``est`` against ``ref`` after mean removal.

    ``est`` and ``ref`` are (batch, time) or (batch, 1, time); the reference is
    data, not a graph node.
    """
    shape = est.shape
    e = est.data.reshape(shape[0], -1).astype(np.float64)
    s = np.asarray(ref, dtype=np.float64).reshape(e.shape)
    e = e - e.mean(axis=1, keepdims=True)
    s = s - s.mean(axis=1, keepdims=True)
    ss = np.sum(s * s, axis=1, keepdims=True)
    if np.any(ss <= 0):
        raise GraphError("SI-SDR reference has zero power after mean removal")
    alpha = np.sum(e * s, axis=1, keepdims=True) / ss
    proj = alpha * s
    resid = e - proj
    p = np.sum(proj * proj, axis=1)
    q = np.sum(resid * resid, axis=1)
    val = 10.0 * np.log10(p / q)

    def bw(g):
        c = 20.0 / np.log(10.0)
        grad = c * g[:, None] * (proj / p[:, None] - resid / q[:, None])
        _accumulate(est, grad.reshape(shape))
    return _node(val.astype(est.dtype), (est,), bw, "si_sdr")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update applied in place; returns ``params``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise GraphError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def _eval_traced(fn):
    global _kink_trace
    _kink_trace = []
    try:
        value = float(fn().data)
        return value, _kink_trace
    finally:
        _kink_trace = None


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                     indices: Iterable[int] | None = None, return_kinks: bool = False):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t`` (others left 0).

    With ``return_kinks`` also returns a boolean array marking entries whose
    +-h stencil changed some ReLU/PReLU activation pattern; the difference
    quotient there straddles a non-differentiable point.
    """
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size)
    kinked = np.zeros(flat.size, dtype=bool)
    _, base = _eval_traced(fn)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        up, up_pat = _eval_traced(fn)
        flat[i] = old - h
        down, down_pat = _eval_traced(fn)
        flat[i] = old
        out[i] = (up - down) / (2 * h)
        kinked[i] = not (_same_pattern(base, up_pat) and _same_pattern(base, down_pat))
    if return_kinks:
        return out.reshape(t.shape), kinked.reshape(t.shape)
    return out.reshape(t.shape)


@dataclass
class GradcheckResult:
    errors: dict[str, float]
    checked: dict[str, int]
    skipped_kinks: dict[str, int]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              max_entries: int | None = None, seed: int = 0) -> GradcheckResult:
    """Compare analytic and central-difference gradients of scalar ``fn()``.

    The error per input is :func:`relative_error` over its checked entries.
    Entries whose stencil crosses a ReLU/PReLU kink are excluded and counted.
    With ``max_entries`` only a seeded random subset of each input is differenced.
    """
    for t in inputs:
        t.zero_grad()
    loss = fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    errors, checked, skipped = {}, {}, {}
    for k, t in enumerate(inputs):
        name = t.name or f"input{k}"
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        if max_entries is not None and t.data.size > max_entries:
            idx = np.sort(rng.choice(t.data.size, size=max_entries, replace=False))
        else:
            idx = np.arange(t.data.size)
        numeric, kinked = numeric_gradient(fn, t, h, idx, return_kinks=True)
        keep = idx[~kinked.reshape(-1)[idx]]
        errors[name] = relative_error(analytic.reshape(-1)[keep], numeric.reshape(-1)[keep])
        checked[name] = int(keep.size)
        skipped[name] = int(idx.size - keep.size)
    return GradcheckResult(errors, checked, skipped)
