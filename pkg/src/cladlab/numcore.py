"""Dense float64 primitives with hand-written gradients.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, shape
``(rows, cols)``.  Row vectors (biases) are 1-D arrays.  Every backward
function returns gradients with the same shapes as the forward inputs.

Randomness goes through :class:`Rng`, a thin wrapper around numpy's PCG64
bit generator seeded through ``SeedSequence``.  PCG64 output is specified
bit-for-bit by numpy and is identical across platforms, so a root seed plus
a stream name fully determines every draw.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import DegenerateVectorError, DimensionError, NumericalError

COSINE_EPS = 1e-12


def as_matrix(x, name="x"):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# PRNG
# ---------------------------------------------------------------------------


def _stream_key(name):
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


class Rng:
    """Deterministic PCG64 stream addressed by ``(root_seed, *path)``.

    ``Rng(1993).child("data")`` and ``Rng(1993, ("data",))`` are the same
    stream.  Children never share state with their parent.
    """

    algorithm = "PCG64/SeedSequence"

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(path)
        key = tuple(_stream_key(p) for p in self.path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *names):
        return Rng(self.seed, self.path + tuple(names))

    @property
    def generator(self):
        return self._gen

    # state round-trip, used by checkpoints
    def get_state(self):
        return {"seed": self.seed, "path": list(self.path),
                "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state):
        rng = cls(state["seed"], state["path"])
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def random_bytes(self, n):
        return self._gen.bytes(n)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def affine_forward(x, W, b):
    x = as_matrix(x, "x")
    W = as_matrix(W, "W")
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.shape[1] != W.shape[0] or b.shape[0] != W.shape[1]:
        raise DimensionError(
            f"affine shapes do not conform: x{x.shape} @ W{W.shape} + b{b.shape}")
    return x @ W + b


def affine_backward(upstream, x, W):
    """Return ``(dx, dW, db)`` for ``out = x @ W + b``."""
    upstream = as_matrix(upstream, "upstream")
    x = as_matrix(x, "x")
    W = as_matrix(W, "W")
    if upstream.shape != (x.shape[0], W.shape[1]) or x.shape[1] != W.shape[0]:
        raise DimensionError(
            f"affine_backward shapes do not conform: upstream{upstream.shape}, "
            f"x{x.shape}, W{W.shape}")
    return upstream @ W.T, x.T @ upstream, upstream.sum(axis=0)


def relu_forward(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(upstream, x):
    # subgradient at exactly 0 is 0
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape:
        raise DimensionError(f"relu_backward: upstream{upstream.shape} vs x{x.shape}")
    return np.where(x > 0.0, upstream, 0.0)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} out of range for {k} classes")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    return float(loss), d / n


def cosine_sim(u, v):
    """Cosine similarity of two vectors with its gradients ``(value, du, dv)``."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim: u{u.shape} vs v{v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= COSINE_EPS or nv <= COSINE_EPS:
        raise DegenerateVectorError(
            f"cosine of near-zero vector (|u|={nu:.3g}, |v|={nv:.3g})")
    uh, vh = u / nu, v / nv
    c = float(np.clip(uh @ vh, -1.0, 1.0))
    return c, (vh - c * uh) / nu, (uh - c * vh) / nv


def normalize_rows(F):
    """Row-normalize ``F``; returns ``(unit_rows, norms)``."""
    norms = np.linalg.norm(F, axis=1)
    if norms.size and norms.min() <= COSINE_EPS:
        i = int(np.argmin(norms))
        raise DegenerateVectorError(f"row {i} has near-zero norm {norms[i]:.3g}")
    return F / norms[:, None], norms


def normalize_rows_backward(dU, U, norms):
    """Backprop through ``U = F / |F|`` row-wise."""
    proj = (dU * U).sum(axis=1, keepdims=True)
    return (dU - proj * U) / norms[:, None]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def sgd_step(params, grads, velocity, lr, momentum=0.9, weight_decay=5e-4):
    """In-place SGD with momentum and L2 weight decay.

    ``v <- momentum * v + (g + weight_decay * p)``; ``p <- p - lr * v``.
    All three sequences are updated in place and returned.
    """
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericalError(
                f"non-finite gradient in parameter {i} ({bad} entries)",
                {"param_index": i, "shape": list(np.shape(g))})
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v
    return params, velocity


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


@dataclass
class GradCheckReport:
    max_relative_error: float
    errors: list = field(default_factory=list)

    def passed(self, tol):
        return self.max_relative_error <= tol


def grad_check(loss_fn: Callable[[Sequence[np.ndarray]], float], params, analytic,
               h=1e-6, max_coords=200, rng=None):
    """Compare analytic gradients against central differences.

    ``loss_fn`` receives a list of arrays shaped like ``params``.  At most
    ``max_coords`` coordinates per tensor are probed; the subsample is drawn
    from ``rng`` (default seed 0).
    """
    params = [np.array(p, dtype=np.float64, copy=True) for p in params]
    rng = rng or Rng(0, ("gradcheck",))
    errors = []
    for pi, (p, g) in enumerate(zip(params, analytic)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"param {pi}: gradient {g.shape} vs param {p.shape}")
        n = p.size
        if n == 0:
            errors.append(0.0)
            continue
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords))
        flat = p.reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = loss_fn(params)
            flat[c] = orig - h
            fm = loss_fn(params)
            flat[c] = orig
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, float(relative_error(g.reshape(-1)[c], num)))
        errors.append(worst)
    return GradCheckReport(max(errors) if errors else 0.0, errors)
