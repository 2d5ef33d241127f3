"""Replay training: cross-entropy, optional logit distillation, optional CLAD term."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .clad import MEASUREMENTS, PAIRINGS, STRATEGIES, clad_loss
from .exceptions import ConfigError, NumericalError
from .model import backward, features, forward, logits
from .replay import joint_batches


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    milestones: tuple = (0.5, 0.75)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    distill_weight: float = 0.0  # lambda
    temperature: float = 2.0
    eta: float = 0.0
    proportion: float = 0.1
    strategy: str = "top"
    rd_pairing: str = "text"
    measurement: str = "logits"
    stop_exemplar_grad: bool = False

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.eta < 0 or self.distill_weight < 0:
            raise ConfigError("eta and distill_weight must be >= 0")
        if not 0.0 < self.proportion <= 1.0:
            raise ConfigError("proportion must lie in (0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        for name, value, allowed in (("strategy", self.strategy, STRATEGIES),
                                     ("rd_pairing", self.rd_pairing, PAIRINGS),
                                     ("measurement", self.measurement, MEASUREMENTS)):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")

    def lr_at(self, epoch):
        # a milestone never lands on epoch 0
        passed = sum(epoch >= max(1, round(m * self.epochs)) for m in self.milestones)
        return self.lr * self.lr_decay ** passed

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def loss_ce(params, X, y):
    feats, out, cache = forward(params, X)
    loss, dlog = nc.softmax_cross_entropy(out, y)
    return loss, backward(params, feats, cache, dlogits=dlog)


def distill_term(live_old_logits, teacher_logits, temperature):
    """Soft-target cross-entropy; returns ``(loss, d live_old_logits)``."""
    n = live_old_logits.shape[0]
    p = nc.softmax(teacher_logits / temperature)
    logq = nc.log_softmax(live_old_logits / temperature)
    loss = float(-(p * logq).sum() / n)
    return loss, (np.exp(logq) - p) / (temperature * n)


def loss_distill(params, snapshot, X, temperature=2.0):
    """Logit distillation on the snapshot's classes; gradient on the live branch only."""
    k_old = snapshot.num_classes
    feats, out, cache = forward(params, X)
    loss, d_old = distill_term(out[:, :k_old], logits(snapshot, X), temperature)
    dlog = np.zeros_like(out)
    dlog[:, :k_old] = d_old
    return loss, backward(params, feats, cache, dlogits=dlog)


@dataclass
class TaskContext:
    """Everything fixed for one task that the per-batch loss needs."""

    n_old: int = 0
    snapshot: object = None
    conflict_matrix: np.ndarray = None
    frozen_feats: np.ndarray = None  # unit rows, text pairing
    frozen_labels: np.ndarray = None
    buffer_X: np.ndarray = None  # conflict exemplars, literal pairing
    buffer_y: np.ndarray = None

    @property
    def clad_active(self):
        return self.conflict_matrix is not None and bool(self.conflict_matrix.any())


@dataclass
class LossParts:
    total: float
    ce: float
    distill: float = 0.0
    clad: float = 0.0
    online: float = 0.0
    offline: float = 0.0


def batch_loss(params, X, y, ctx, config):
    """Fused ``L_ce + lambda * L_distill + eta * L_clad`` with gradients."""
    feats, out, cache = forward(params, X)
    ce, dlog = nc.softmax_cross_entropy(out, y)
    parts = LossParts(ce, ce)
    dfeat = None
    extra = None

    if config.distill_weight > 0 and ctx.n_old > 0:
        dist, d_old = distill_term(out[:, :ctx.n_old], logits(ctx.snapshot, X), config.temperature)
        dlog[:, :ctx.n_old] += config.distill_weight * d_old
        parts.distill = dist
        parts.total += config.distill_weight * dist

    if config.eta > 0 and ctx.clad_active:
        new_mask = y >= ctx.n_old
        if config.rd_pairing == "text":
            terms, dF, _ = clad_loss(
                feats, y, new_mask, ctx.conflict_matrix, feats, y,
                ctx.frozen_feats, ctx.frozen_labels, online_is_batch=True,
                stop_exemplar_grad=config.stop_exemplar_grad)
        else:
            # literal pairing: live buffer exemplars online, frozen batch offline
            bfeats, _, bcache = forward(params, ctx.buffer_X, with_logits=False)
            olds = np.flatnonzero(ctx.conflict_matrix.any(axis=0))
            rows = np.flatnonzero(np.isin(y, olds))
            zf = features(ctx.snapshot, X[rows])
            keep = np.linalg.norm(zf, axis=1) > nc.COSINE_EPS
            rows, zf = rows[keep], zf[keep]
            zn = nc.normalize_rows(zf)[0] if rows.size else None
            terms, dF, dB = clad_loss(
                feats, y, new_mask, ctx.conflict_matrix, bfeats, ctx.buffer_y,
                zn, y[rows], online_is_batch=False,
                stop_exemplar_grad=config.stop_exemplar_grad)
            extra = (bfeats, bcache, config.eta * dB)
        dfeat = config.eta * dF
        parts.clad, parts.online, parts.offline = terms.loss, terms.online, terms.offline
        parts.total += config.eta * terms.loss

    grads = backward(params, feats, cache, dfeat=dfeat, dlogits=dlog)
    if extra is not None:
        bfeats, bcache, dB = extra
        for g, gb in zip(grads, backward(params, bfeats, bcache, dfeat=dB)):
            g += gb
    return parts, grads


@dataclass
class TaskTrace:
    epochs: list = field(default_factory=list)  # per-epoch mean LossParts as dicts
    steps: int = 0


def train_task(params, task_data, buffer, ctx, config, rng):
    """Train in place on ``task_data ∪ buffer`` for ``config.epochs`` epochs."""
    arrays = params.arrays()
    velocity = [np.zeros_like(a) for a in arrays]
    trace = TaskTrace()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        sums, count = {}, 0
        for batch in joint_batches(task_data, buffer, config.batch_size, rng):
            parts, grads = batch_loss(params, batch.X, batch.y, ctx, config)
            if not np.isfinite(parts.total):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, step {trace.steps}",
                    {"epoch": epoch, "step": trace.steps, "parts": asdict(parts),
                     "trace": trace.epochs})
            nc.sgd_step(arrays, grads, velocity, lr, config.momentum, config.weight_decay)
            trace.steps += 1
            for k, v in asdict(parts).items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        trace.epochs.append({"epoch": epoch, "lr": lr, **{k: v / count for k, v in sums.items()}})
    return params, trace
