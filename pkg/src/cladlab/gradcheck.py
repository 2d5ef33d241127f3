"""Finite-difference audit of every differentiable piece, on randomized instances."""

from __future__ import annotations

import numpy as np

from . import clad
from . import model as m
from . import numcore as nc
from .train import TaskContext, TrainConfig, batch_loss, distill_term

TOLERANCE = 1e-6


def _affine(rng):
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    up = rng.normal(size=(3, 2))
    dx, dW, db = nc.affine_backward(up, x, W)
    return (lambda ps: float((nc.affine_forward(*ps) * up).sum())), [x, W, b], [dx, dW, db]


def _relu(rng):
    x = rng.normal(size=12)
    x[np.abs(x) < 1e-3] = 0.5  # stay off the kink
    up = rng.normal(size=12)
    return (lambda ps: float((nc.relu_forward(ps[0]) * up).sum())), [x], [nc.relu_backward(up, x)]


def _cross_entropy(rng):
    z, y = rng.normal(size=(5, 4)) * 2, rng.integers(0, 4, 5)
    _, d = nc.softmax_cross_entropy(z, y)
    return (lambda ps: nc.softmax_cross_entropy(ps[0], y)[0]), [z], [d]


def _cosine(rng):
    u, v = rng.normal(size=6), rng.normal(size=6)
    _, du, dv = nc.cosine_sim(u, v)
    return (lambda ps: nc.cosine_sim(ps[0], ps[1])[0]), [u, v], [du, dv]


def _distillation(rng):
    z, t = rng.normal(size=(4, 5)) * 2, rng.normal(size=(4, 5)) * 2
    _, d = distill_term(z, t, 2.0)
    return (lambda ps: distill_term(ps[0], t, 2.0)[0]), [z], [d]


def _online(rng):
    x, E = rng.normal(size=6), rng.normal(size=(3, 6))
    _, dx, dE = clad.loss_online(x, E)
    return (lambda ps: clad.loss_online(ps[0], ps[1])[0]), [x, E], [dx, dE]


def _offline(rng):
    x, Z = rng.normal(size=6), rng.normal(size=(4, 6))
    _, dx = clad.loss_offline(x, Z)
    return (lambda ps: clad.loss_offline(ps[0], Z)[0]), [x], [dx]


def _composite(rng):
    seed = int(rng.integers(0, 2**31))
    cfg = m.ModelConfig(input_dim=5, hidden_dims=(12,), feature_dim=8,
                        relu_features=bool(rng.integers(0, 2)))
    old = m.init_model(cfg, seed, 4)
    snap = m.snapshot(old, 0)
    p = m.expand_head(old, 3, seed)
    X, y = rng.normal(size=(10, 5)), rng.integers(0, 7, 10)
    M = np.zeros((7, 7), bool)
    for new in range(4, 7):
        M[new, rng.choice(4, rng.integers(1, 3), replace=False)] = True
    bx, by = rng.normal(size=(6, 5)), rng.integers(0, 4, 6)
    zf = m.features(snap, bx)
    keep = np.linalg.norm(zf, axis=1) > nc.COSINE_EPS
    Z = nc.normalize_rows(zf[keep])[0] if keep.any() else np.zeros((0, cfg.feature_dim))
    ctx = TaskContext(4, snap, M, Z, by[keep], bx, by)
    tc = TrainConfig(eta=float(rng.uniform(0.5, 4.0)), distill_weight=float(rng.uniform(0, 2)),
                     rd_pairing=str(rng.choice(["text", "literal"])))
    _, grads = batch_loss(p, X, y, ctx, tc)
    return ((lambda ps: batch_loss(m.ModelParams.from_arrays(cfg, ps), X, y, ctx, tc)[0].total),
            p.arrays(), grads)


CHECKS = {
    "affine": _affine,
    "relu": _relu,
    "cross_entropy": _cross_entropy,
    "cosine": _cosine,
    "distillation": _distillation,
    "loss_online": _online,
    "loss_offline": _offline,
    "composite": _composite,
}


def run_gradchecks(instances=20, seed=0, names=None):
    """``{name: [max relative error per instance]}``."""
    out = {}
    for name in names or CHECKS:
        errs = []
        for i in range(instances):
            rng = nc.Rng(seed, ("gradcheck", name, i)).generator
            f, params, grads = CHECKS[name](rng)
            errs.append(nc.grad_check(f, params, grads).max_relative_error)
        out[name] = errs
    return out
