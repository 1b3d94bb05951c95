"""Measure how far a mask frame can see, with and without frozen gLN statistics.

    python demos/receptive_field.py

Global layer norm pools statistics over the whole utterance, so in the live
network every output frame depends on every input frame. Freezing those
statistics leaves only the convolutions, whose reach is r * (P - 1) / 2 * (2^b - 1)
frames on each side.
"""
import numpy as np

from tsenet import graph as G
from tsenet import model as Mo


def support(cfg, frames, k, frozen):
    rng = np.random.default_rng(0)
    net = Mo.build(cfg, seed=0, dtype=np.float64)
    A = G.Tensor(rng.uniform(0.1, 1.0, (1, cfg.M, frames)), requires_grad=True)
    W = Mo.extract_mask(net, A, rng.standard_normal(cfg.D1), {} if frozen else None)
    pick = np.zeros(W.shape)
    pick[:, :, k] = 1.0
    G.backward(G.sum_all(G.mul(W, G.Tensor(pick))))
    return np.flatnonzero(np.any(A.grad[0] != 0, axis=0))


for b, r in ((3, 2), (5, 3), (8, 4)):
    cfg = Mo.TseNetConfig(M=4, L=4, N=4, O=4, P=3, b=b, r=r, D1=3, D2=2)
    frames = 2 * cfg.receptive_radius + 201
    k = frames // 2
    frozen = support(cfg, frames, k, frozen=True)
    live = support(cfg, frames, k, frozen=False)
    print(f"b={b} r={r}: radius {cfg.receptive_radius:5d}  frozen-stats support {frozen.size:5d} frames "
          f"[{frozen[0] - k:+d}, {frozen[-1] - k:+d}]  live support {live.size} of {frames}")
