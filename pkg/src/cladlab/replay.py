"""Exemplar memory filled by greedy herding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .exceptions import ConsistencyError
from .model import features

TIE_TOL = 1e-12

def herding_select(class_features, R, normalize=True):
    """Greedy herding (iCaRL): indices whose running mean tracks the class mean.

    At step ``k`` the unchosen row minimizing
    ``|mu - (sum_chosen + f_x) / k|`` is picked; distances within ``TIE_TOL``
    count as ties, which go to the lowest index.
    Returns ``min(R, n)`` indices in selection order.
    """
    F = np.asarray(class_features, dtype=np.float64)
    n = F.shape[0]
    if n == 0:
        raise ValueError("herding on an empty class")
    if R < 1:
        raise ValueError("herding needs R >= 1")
    if normalize:
        norms = np.linalg.norm(F, axis=1, keepdims=True)
        F = F / np.where(norms > 0, norms, 1.0)
    mu = F.mean(axis=0)
    available = np.ones(n, dtype=bool)
    running = np.zeros(F.shape[1])
    chosen = []
    for k in range(1, min(R, n) + 1):
        dist = np.linalg.norm(mu - (running + F) / k, axis=1)
        dist[~available] = np.inf
        best = dist.min()
        # exact ties (e.g. two points mirrored about the mean) round either way; lowest index wins
        i = int(np.flatnonzero(dist <= best + TIE_TOL * max(1.0, best))[0])
        chosen.append(i)
        available[i] = False
        running += F[i]
    return chosen


@dataclass
class ReplayBuffer:
    """Per-class exemplars, stored in herding order."""

    R: int
    per_class: dict = field(default_factory=dict)  # class -> (X, source_indices)

    def __len__(self):
        return sum(x.shape[0] for x, _ in self.per_class.values())

    @property
    def classes(self):
        return sorted(self.per_class)

    def exemplars(self, c):
        return self.per_class[c][0]

    def as_dataset(self, classes=None):
        classes = self.classes if classes is None else [c for c in classes if c in self.per_class]
        if not classes:
            return None
        X = np.concatenate([self.per_class[c][0] for c in classes])
        y = np.concatenate([np.full(self.per_class[c][0].shape[0], c) for c in classes])
        return LabeledDataset(X, y)

    def copy(self):
        return ReplayBuffer(self.R, {c: (x.copy(), i.copy()) for c, (x, i) in self.per_class.items()})

    def to_dict(self):
        return {
            "format_version": 1,
            "R": self.R,
            "classes": {
                str(c): {"source_indices": [int(i) for i in idx],
                         "features": [[float(v) for v in row] for row in x]}
                for c, (x, idx) in sorted(self.per_class.items())
            },
        }

    @classmethod
    def from_dict(cls, d):
        per_class = {}
        for c, entry in d["classes"].items():
            x = np.array(entry["features"], dtype=np.float64)
            per_class[int(c)] = (x.reshape(len(entry["source_indices"]), -1),
                                 np.array(entry["source_indices"], dtype=np.int64))
        return cls(int(d["R"]), per_class)


def update_buffer(buffer, task_train, params, R=None, normalize=True):
    """Add herding-selected exemplars for every class in ``task_train``.

    Existing classes keep their lists untouched. ``R == 0`` stores nothing.
    Returns a new buffer.
    """
    R = buffer.R if R is None else R
    out = buffer.copy()
    out.R = R
    for c in np.unique(task_train.y):
        c = int(c)
        if c in out.per_class:
            raise ConsistencyError(f"class {c} already has exemplars in the buffer")
        if R == 0:
            continue
        idx = np.flatnonzero(task_train.y == c)
        X = task_train.X[idx]
        order = herding_select(features(params, X), R, normalize=normalize)
        out.per_class[c] = (X[order].copy(), idx[order])
    return out


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray
    is_exemplar: np.ndarray


def joint_batches(task_data, buffer, batch_size, rng):
    """One epoch over ``D_t ∪ B``, uniformly shuffled, in batches."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    mem = buffer.as_dataset() if buffer is not None else None
    if mem is None:
        X, y = task_data.X, task_data.y
        tag = np.zeros(len(task_data), dtype=bool)
    else:
        X = np.concatenate([task_data.X, mem.X])
        y = np.concatenate([task_data.y, mem.y])
        tag = np.concatenate([np.zeros(len(task_data), bool), np.ones(len(mem), bool)])
    perm = rng.permutation(y.shape[0])
    for start in range(0, perm.shape[0], batch_size):
        sel = perm[start: start + batch_size]
        yield Batch(X[sel], y[sel], tag[sel])
