"""MLP feature extractor with an expandable linear or cosine classification head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .exceptions import ConfigError, DimensionError, FormatVersionError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    hidden_dims: tuple = (128, 128)
    feature_dim: int = 64
    activation: str = "relu"
    relu_features: bool = True
    head: str = "linear"  # or "cosine": logits = head_scale * cos(feature, column)
    head_scale: float = 16.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ConfigError("hidden_dims must be nonempty")
        if self.input_dim < 1 or min(self.hidden_dims) < 1:
            raise ConfigError("layer widths must be positive")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.head not in ("linear", "cosine"):
            raise ConfigError(f"head must be 'linear' or 'cosine', got {self.head!r}")
        if self.head_scale <= 0:
            raise ConfigError("head_scale must be > 0")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.feature_dim)

    def to_dict(self):
        return {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims),
                "feature_dim": self.feature_dim, "activation": self.activation,
                "relu_features": self.relu_features, "head": self.head,
                "head_scale": self.head_scale}


@dataclass
class ModelParams:
    config: ModelConfig
    layers: list  # [(W, b), ...] for the extractor
    head_W: np.ndarray
    head_b: np.ndarray

    @property
    def num_classes(self):
        return self.head_W.shape[1]

    def arrays(self):
        """Flat list of parameter arrays (views, not copies)."""
        out = []
        for W, b in self.layers:
            out += [W, b]
        return out + [self.head_W, self.head_b]

    @classmethod
    def from_arrays(cls, config, arrays):
        arrays = list(arrays)
        layers = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays) - 2, 2)]
        return cls(config, layers, arrays[-2], arrays[-1])

    def copy(self):
        return ModelParams.from_arrays(self.config, [a.copy() for a in self.arrays()])


@dataclass(frozen=True)
class ModelSnapshot:
    """Read-only copy of the parameters taken after ``task_index``."""

    params: ModelParams = field(compare=False)
    task_index: int = 0

    @property
    def num_classes(self):
        return self.params.num_classes

    def __eq__(self, other):
        if not isinstance(other, ModelSnapshot):
            return NotImplemented
        return self.task_index == other.task_index and params_equal(self.params, other.params)


def params_equal(a, b):
    xs, ys = a.arrays(), b.arrays()
    return (a.config == b.config and len(xs) == len(ys)
            and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(xs, ys)))


def _fan_in_uniform(rng, fan_in, shape):
    # He-uniform: std = sqrt(2 / fan_in)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config, seed, num_classes=0):
    rng = nc.Rng(seed, ("init",))
    dims = config.layer_dims
    layers = []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        W = _fan_in_uniform(rng.child("layer", i), din, (din, dout))
        layers.append((W, np.zeros(dout)))
    params = ModelParams(config, layers, np.zeros((config.feature_dim, 0)), np.zeros(0))
    if num_classes:
        params = expand_head(params, num_classes, seed)
    return params


def expand_head(params, n_new, seed):
    """Append ``n_new`` freshly initialized head columns; old columns are copied bit-exactly."""
    if n_new < 1:
        raise ValueError("expand_head needs n_new >= 1")
    K, d = params.num_classes, params.config.feature_dim
    rng = nc.Rng(seed, ("head", K, n_new))
    W_new = _fan_in_uniform(rng, d, (d, n_new))
    out = params.copy()
    out.head_W = np.concatenate([out.head_W, W_new], axis=1)
    out.head_b = np.concatenate([out.head_b, np.zeros(n_new)])
    return out


def snapshot(params, task_index=None):
    if isinstance(params, ModelSnapshot):
        return params if task_index is None else ModelSnapshot(params.params, task_index)
    frozen = params.copy()
    for a in frozen.arrays():
        a.setflags(write=False)
    return ModelSnapshot(frozen, 0 if task_index is None else task_index)


def _unwrap(params):
    return params.params if isinstance(params, ModelSnapshot) else params


def forward(params, x, with_logits=True):
    """Forward pass; returns ``(features, logits_or_None, cache)``."""
    params = _unwrap(params)
    x = nc.as_matrix(x)
    if x.shape[1] != params.config.input_dim:
        raise DimensionError(
            f"input has {x.shape[1]} columns, model expects {params.config.input_dim}")
    cache = []
    h = x
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        z = nc.affine_forward(h, W, b)
        cache.append((h, z))
        h = z if (i == last and not params.config.relu_features) else nc.relu_forward(z)
    out = None
    if with_logits:
        if params.num_classes == 0:
            raise ValueError("model has no classes yet")
        if params.config.head == "cosine":
            out = params.config.head_scale * (_unit_rows(h)[0] @ _unit_rows(params.head_W.T)[0].T)
        else:
            out = nc.affine_forward(h, params.head_W, params.head_b)
    return h, out, cache


def _unit_rows(A):
    # all-zero rows (dead relu features) stay zero instead of raising
    n = np.maximum(np.linalg.norm(A, axis=1, keepdims=True), nc.COSINE_EPS)
    return A / n, n


def _unit_rows_backward(dU, U, n):
    return (dU - U * (dU * U).sum(axis=1, keepdims=True)) / n


def _cosine_head_backward(dlogits, feats, W, scale):
    U, un = _unit_rows(feats)
    V, vn = _unit_rows(W.T)
    g = scale * dlogits
    dx = _unit_rows_backward(g @ V, U, un)
    dW = _unit_rows_backward(g.T @ U, V, vn).T
    return dx, dW, np.zeros(W.shape[1])


def backward(params, feats, cache, dfeat=None, dlogits=None):
    """Gradients for every array in ``params.arrays()`` order.

    ``dfeat`` is the gradient arriving directly at the features (e.g. from a
    representation loss); ``dlogits`` comes through the head.
    """
    params = _unwrap(params)
    grads_head_W = np.zeros_like(params.head_W)
    grads_head_b = np.zeros_like(params.head_b)
    dh = np.zeros_like(feats) if dfeat is None else np.array(dfeat, dtype=np.float64)
    if dlogits is not None:
        if params.config.head == "cosine":
            dx, grads_head_W, grads_head_b = _cosine_head_backward(
                dlogits, feats, params.head_W, params.config.head_scale)
        else:
            dx, grads_head_W, grads_head_b = nc.affine_backward(dlogits, feats, params.head_W)
        dh = dh + dx
    layer_grads = []
    last = len(params.layers) - 1
    for i, ((W, _), (h_in, z)) in enumerate(zip(reversed(params.layers), reversed(cache))):
        linear = i == 0 and not params.config.relu_features and last >= 0
        dz = dh if linear else nc.relu_backward(dh, z)
        dh, dW, db = nc.affine_backward(dz, h_in, W)
        layer_grads.append((dW, db))
    out = []
    for dW, db in reversed(layer_grads):
        out += [dW, db]
    return out + [grads_head_W, grads_head_b]


def features(params, x):
    return forward(params, x, with_logits=False)[0]


def logits(params, x):
    return forward(params, x)[1]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _arr(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}


def _unarr(d):
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def params_to_dict(params, task_index=0):
    params = _unwrap(params)
    return {
        "format_version": CHECKPOINT_VERSION,
        "model_config": params.config.to_dict(),
        "task_index": task_index,
        "layers": [{"W": _arr(W), "b": _arr(b)} for W, b in params.layers],
        "head": {"W": _arr(params.head_W), "b": _arr(params.head_b)},
    }


def params_from_dict(d):
    version = d.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise FormatVersionError(
            f"checkpoint format_version {version!r} not supported (expected {CHECKPOINT_VERSION})")
    config = ModelConfig(**d["model_config"])
    layers = [(_unarr(layer["W"]), _unarr(layer["b"])) for layer in d["layers"]]
    head = d["head"]
    W = _unarr(head["W"]).reshape(config.feature_dim, -1)
    return ModelParams(config, layers, W, _unarr(head["b"]).reshape(-1)), d.get("task_index", 0)

