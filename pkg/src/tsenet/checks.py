"""Finite-difference verification of every graph operator and of the full loss."""

from __future__ import annotations

import numpy as np

from . import graph as G
from . import model as Mo

GRADCHECK_TOL = 1e-4


def _op_cases(rng: np.random.Generator):
    def p(*shape, name):
        return G.parameter(rng.standard_normal(shape), name)

    x = p(2, 5, 24, name="x")
    k = p(4, 5, 6, name="kernels")
    basis = p(5, 4, name="basis")
    dk = p(5, 3, name="dw_kernel")
    pw = p(3, 5, name="pw_weights")
    pb = p(3, name="pw_bias")
    slope = G.parameter(np.full(5, 0.25) + 0.1 * rng.standard_normal(5), "slope")
    gain = p(5, name="gain")
    bias = p(5, name="bias")
    v = p(2, 7, name="v")
    dw = p(3, 7, name="dense_w")
    db = p(3, name="dense_b")
    y = p(2, 3, 24, name="y")
    m = p(2, 5, 24, name="m")
    est = p(2, 64, name="est")
    ref = rng.standard_normal((2, 64))
    return {
        "conv1d": (lambda: G.conv1d(x, k, stride=3), [x, k]),
        "depthwise_conv1d_dilated": (lambda: G.depthwise_conv1d_dilated(x, dk, dilation=4), [x, dk]),
        "pointwise_conv": (lambda: G.pointwise_conv(x, pw, pb), [x, pw, pb]),
        "transposed_conv1d": (lambda: G.transposed_conv1d(x, basis, stride=2), [x, basis]),
        "dense": (lambda: G.dense(v, dw, db), [v, dw, db]),
        "relu": (lambda: G.relu(x), [x]),
        "prelu": (lambda: G.prelu(x, slope), [x, slope]),
        "sigmoid": (lambda: G.sigmoid(x), [x]),
        "channelwise_norm": (lambda: G.channelwise_norm(x, gain, bias), [x, gain, bias]),
        "global_layer_norm": (lambda: G.global_layer_norm(x, gain, bias), [x, gain, bias]),
        "concat_channels": (lambda: G.concat_channels(x, y), [x, y]),
        "repeat_vector": (lambda: G.repeat_vector(v, 5), [v]),
        "elementwise_mul": (lambda: G.mul(x, m), [x, m]),
        "si_sdr": (lambda: G.si_sdr_values(est, ref), [est]),
    }


def op_gradcheck(seed: int = 0, h: float = 1e-5) -> dict[str, G.GradcheckResult]:
    """Each operator contracted with a fixed random weight to a scalar, in float64."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, (fn, inputs) in _op_cases(rng).items():
        weight = rng.standard_normal(fn().shape)
        out[name] = G.gradcheck(lambda fn=fn, w=weight: G.sum_all(G.mul(fn(), w)), inputs, h=h)
    return out


def end_to_end_gradcheck(config: Mo.TseNetConfig = Mo.TINY_CONFIG, T: int = 400, batch: int = 2,
                         seed: int = 0, h: float = 1e-5, max_entries: int | None = None) -> G.GradcheckResult:
    """Negative SI-SDR of a float64 model w.r.t. every parameter."""
    rng = np.random.default_rng(seed)
    model = Mo.build(config, seed=seed, dtype=np.float64)
    mix = rng.standard_normal((batch, T))
    tgt = rng.standard_normal((batch, T))
    ivec = rng.standard_normal((batch, config.D1))

    def loss():
        est, _ = Mo.forward(model, mix, ivec)
        return G.mul(G.mean(G.si_sdr_values(est, tgt)), -1.0)
    return G.gradcheck(loss, list(model.params.values()), h=h, max_entries=max_entries, seed=seed)


def run_all(config: Mo.TseNetConfig = Mo.TINY_CONFIG, T: int = 400, seed: int = 0) -> dict[str, G.GradcheckResult]:
    results = op_gradcheck(seed)
    results["end_to_end_si_sdr_loss"] = end_to_end_gradcheck(config, T, seed=seed)
    return results
