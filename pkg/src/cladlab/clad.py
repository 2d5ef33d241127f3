"""Class-aware disentanglement.

Forgetting prediction ranks old classes by the mean logit a new class
receives from the frozen previous-task model.  The top-ranked old classes
become the new class's conflict classes, and the representation loss pushes
new-class features away (in cosine) from conflict-class features, both live
ones in the current batch and frozen ones of the buffer exemplars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .model import features, logits

MEASUREMENTS = ("logits", "cosine", "oracle_logits")
STRATEGIES = ("top", "smallest", "random")
PAIRINGS = ("text", "literal")


@dataclass
class SimilarityVector:
    new_class: int
    old_classes: list
    scores: np.ndarray
    measurement: str = "logits"

    def to_dict(self):
        return {"new_class": int(self.new_class),
                "old_classes": [int(c) for c in self.old_classes],
                "scores": [float(s) for s in self.scores],
                "measurement": self.measurement}

    @classmethod
    def from_dict(cls, d):
        return cls(d["new_class"], list(d["old_classes"]),
                   np.array(d["scores"], dtype=np.float64), d["measurement"])


@dataclass
class ConflictMap:
    conflicts: dict = field(default_factory=dict)  # new class -> [old classes]
    proportion: float = 0.1
    strategy: str = "top"
    similarities: dict = field(default_factory=dict)  # new class -> SimilarityVector

    def __bool__(self):
        return bool(self.conflicts)

    def matrix(self, num_classes):
        """Boolean ``(K, K)`` table: ``M[new, old]`` is True for conflict pairs."""
        M = np.zeros((num_classes, num_classes), dtype=bool)
        for new, olds in self.conflicts.items():
            M[new, olds] = True
        return M

    def to_dict(self):
        return {
            "format_version": 1,
            "proportion": self.proportion,
            "strategy": self.strategy,
            "conflicts": {str(k): [int(c) for c in v] for k, v in sorted(self.conflicts.items())},
            "similarities": [s.to_dict() for _, s in sorted(self.similarities.items())],
        }

    @classmethod
    def from_dict(cls, d):
        sims = [SimilarityVector.from_dict(s) for s in d.get("similarities", [])]
        return cls({int(k): list(v) for k, v in d["conflicts"].items()},
                   d["proportion"], d["strategy"], {s.new_class: s for s in sims})


def forgetting_prediction(frozen, class_samples, old_class_ids, measurement="logits",
                          buffer=None, columns=None, new_class=-1):
    """Similarity of one new class to every old class under a frozen model.

    ``logits`` / ``oracle_logits``: mean raw logit vector over the class
    samples, restricted to the old classes (``columns`` gives their logit
    indices in ``frozen`` when they differ from the class ids).  ``cosine``:
    cosine between the class's mean frozen feature and each old class's mean
    frozen buffer-exemplar feature.
    """
    X = nc.as_matrix(class_samples)
    if X.shape[0] == 0:
        raise ValueError("forgetting prediction on an empty class")
    old = [int(c) for c in old_class_ids]
    if measurement in ("logits", "oracle_logits"):
        cols = old if columns is None else list(columns)
        scores = logits(frozen, X).mean(axis=0)[cols]
    elif measurement == "cosine":
        if buffer is None:
            raise ValueError("cosine measurement needs buffer exemplars")
        mean_new = features(frozen, X).mean(axis=0)
        scores = np.empty(len(old))
        for j, c in enumerate(old):
            if c not in buffer.per_class or buffer.exemplars(c).shape[0] == 0:
                raise ValueError(f"no buffer exemplars for old class {c}")
            mean_old = features(frozen, buffer.exemplars(c)).mean(axis=0)
            if min(np.linalg.norm(mean_new), np.linalg.norm(mean_old)) <= nc.COSINE_EPS:
                # all-dead features carry no direction; treat as unrelated
                scores[j] = 0.0
            else:
                scores[j] = nc.cosine_sim(mean_new, mean_old)[0]
    else:
        raise ValueError(f"unknown measurement {measurement!r}")
    return SimilarityVector(int(new_class), old, np.asarray(scores, dtype=np.float64), measurement)


def conflict_count(proportion, n_old):
    # guard against 0.1 * 30 == 3.0000000000000004
    return max(1, math.ceil(proportion * n_old - 1e-9))


def select_conflicts(sim, proportion=0.1, strategy="top", rng=None):
    if not 0.0 < proportion <= 1.0:
        raise ValueError(f"conflict proportion {proportion} outside (0, 1]")
    old = list(sim.old_classes)
    if not old:
        return []
    k = conflict_count(proportion, len(old))
    scores = np.asarray(sim.scores)
    ids = np.asarray(old)
    if strategy == "top":
        order = np.lexsort((ids, -scores))
    elif strategy == "smallest":
        order = np.lexsort((ids, scores))
    elif strategy == "random":
        if rng is None:
            raise ValueError("random strategy needs an rng")
        order = rng.choice(len(old), k, replace=False)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return [int(old[i]) for i in order[:k]]


def build_conflict_map(sims, proportion=0.1, strategy="top", rng=None):
    cmap = ConflictMap(proportion=proportion, strategy=strategy)
    for sim in sims:
        chosen = select_conflicts(sim, proportion, strategy, rng)
        if chosen:
            cmap.conflicts[sim.new_class] = chosen
            cmap.similarities[sim.new_class] = sim
    return cmap


# ---------------------------------------------------------------------------
# Per-sample losses (reference form)
# ---------------------------------------------------------------------------


def loss_online(x_feat, conflict_feats, stop_exemplar_grad=False):
    """Mean of ``1 + cos(x, e)`` over live conflict features ``e``.

    Returns ``(loss, dx, dE)``.  An empty conflict set gives ``(0, 0, empty)``.
    """
    x = np.asarray(x_feat, dtype=np.float64).reshape(-1)
    E = np.asarray(conflict_feats, dtype=np.float64).reshape(-1, x.shape[0])
    dx, dE = np.zeros_like(x), np.zeros_like(E)
    if E.shape[0] == 0:
        return 0.0, dx, dE
    total = 0.0
    for j, e in enumerate(E):
        c, du, dv = nc.cosine_sim(x, e)
        total += 1.0 + c
        dx += du
        if not stop_exemplar_grad:
            dE[j] = dv
    m = E.shape[0]
    return total / m, dx / m, dE / m


def loss_offline(x_feat, frozen_conflict_feats):
    """Mean of ``1 + cos(x, z)`` over frozen features ``z``; returns ``(loss, dx)``."""
    loss, dx, _ = loss_online(x_feat, frozen_conflict_feats, stop_exemplar_grad=True)
    return loss, dx


# ---------------------------------------------------------------------------
# Batched loss used by the trainer
# ---------------------------------------------------------------------------


def _pair_term(U, V, mask):
    """Pooled mean over anchor rows of ``mean_{b in mask[a]} (1 + U[a]·V[b])``.

    Anchors with an empty partner set are left out of the average.  Returns
    ``(loss, dU, dV, n_valid)`` w.r.t. the unit vectors.
    """
    counts = mask.sum(axis=1)
    valid = counts > 0
    nv = int(valid.sum())
    if nv == 0:
        return 0.0, np.zeros_like(U), np.zeros_like(V), 0
    Wt = np.where(valid[:, None], mask / np.maximum(counts, 1)[:, None], 0.0) / nv
    C = U @ V.T
    loss = float((Wt * (1.0 + C)).sum())
    return loss, Wt @ V, Wt.T @ U, nv


def _nonzero_rows(F):
    return np.linalg.norm(F, axis=1) > nc.COSINE_EPS


@dataclass
class CladTerms:
    loss: float
    online: float
    offline: float
    n_online: int
    n_offline: int


def frozen_buffer_cache(snapshot, buffer, classes=None):
    """Unit-normalized frozen features of buffer exemplars, as ``(Z, labels)``."""
    classes = buffer.classes if classes is None else [c for c in classes if c in buffer.per_class]
    if not classes:
        return np.zeros((0, snapshot.params.config.feature_dim)), np.zeros(0, dtype=np.int64)
    Z = np.concatenate([features(snapshot, buffer.exemplars(c)) for c in classes])
    labels = np.concatenate([np.full(buffer.exemplars(c).shape[0], c) for c in classes])
    keep = _nonzero_rows(Z)
    Zn, _ = nc.normalize_rows(Z[keep])
    return Zn, labels[keep]


def clad_loss(feats, labels, new_mask, conflict_matrix, online_feats, online_labels,
              offline_feats, offline_labels, online_is_batch=True, stop_exemplar_grad=False):
    """Batched representation-disentanglement loss.

    ``feats``: live features of the batch; anchors are rows where ``new_mask``.
    Online partners are live features (``online_feats``; when
    ``online_is_batch`` they are ``feats`` itself).  Offline partners are
    frozen and must already be unit-normalized.  ``conflict_matrix[new, old]``
    marks conflict pairs.

    Returns ``(CladTerms, dfeats, donline)``; ``donline`` is None when the
    online partners are the batch itself (its gradient is folded into
    ``dfeats``).
    """
    n, d = feats.shape
    dfeats = np.zeros_like(feats)
    anchors = np.flatnonzero(new_mask)
    n_online_rows = 0 if online_feats is None else online_feats.shape[0]
    donline = None if online_is_batch else np.zeros((n_online_rows, d))
    if anchors.size == 0 or not conflict_matrix.any():
        return CladTerms(0.0, 0.0, 0.0, 0, 0), dfeats, donline

    # zero feature rows (all units off) have no direction and sit out
    anchors = anchors[_nonzero_rows(feats[anchors])]
    if anchors.size == 0:
        return CladTerms(0.0, 0.0, 0.0, 0, 0), dfeats, donline
    rows = conflict_matrix[labels[anchors]]
    U, un = nc.normalize_rows(feats[anchors])
    dU = np.zeros_like(U)

    on_mask = rows[:, online_labels] if n_online_rows else np.zeros((anchors.size, 0), bool)
    if n_online_rows:
        on_mask = on_mask & _nonzero_rows(online_feats)[None, :]
    partners = np.flatnonzero(on_mask.any(axis=0))
    on_loss, n_on = 0.0, 0
    if partners.size:
        V, vn = nc.normalize_rows(online_feats[partners])
        on_loss, dUa, dV, n_on = _pair_term(U, V, on_mask[:, partners])
        dU += dUa
        if not stop_exemplar_grad:
            dpart = nc.normalize_rows_backward(dV, V, vn)
            if online_is_batch:
                dfeats[partners] += dpart
            else:
                donline[partners] += dpart

    off_loss, n_off = 0.0, 0
    if offline_feats is not None and offline_feats.shape[0]:
        off_mask = rows[:, offline_labels]
        off_loss, dUb, _, n_off = _pair_term(U, offline_feats, off_mask)
        dU += dUb

    dfeats[anchors] += nc.normalize_rows_backward(dU, U, un)
    return CladTerms(on_loss + off_loss, on_loss, off_loss, n_on, n_off), dfeats, donline
