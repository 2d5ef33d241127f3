"""scikit-learn style class-incremental classifier.

``fit`` learns the first task from scratch; each ``partial_fit`` call learns
a task of unseen classes on top of the exemplar memory.  Internally classes
are addressed by head column (order of arrival); ``classes_`` maps columns
back to the caller's labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import numcore as nc
from .clad import ConflictMap, build_conflict_map, forgetting_prediction, frozen_buffer_cache
from .data import LabeledDataset
from .model import (ModelConfig, expand_head, features, init_model, logits,
                    params_from_dict, params_to_dict, snapshot)
from .replay import ReplayBuffer, update_buffer
from .train import TaskContext, TrainConfig, train_task


class IncrementalClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """MLP classifier trained task by task with exemplar replay and optional CLAD.

    ``eta=0`` and ``distill_weight=0`` give naive replay.  ``transform``
    returns the penultimate features.
    """

    def __init__(self, hidden_dims=(128, 128), feature_dim=64, epochs=60, batch_size=128,
                 lr=0.1, milestones=(0.5, 0.75), lr_decay=0.1, momentum=0.9,
                 weight_decay=5e-4, memory_per_class=20, herding_normalize=True,
                 distill_weight=0.0, temperature=2.0, eta=0.0, proportion=0.1,
                 strategy="top", measurement="logits", rd_pairing="text",
                 stop_exemplar_grad=False, relu_features=True, head="linear", head_scale=16.0,
                 random_state=0):
        self.hidden_dims = hidden_dims
        self.feature_dim = feature_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.milestones = milestones
        self.lr_decay = lr_decay
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.memory_per_class = memory_per_class
        self.herding_normalize = herding_normalize
        self.distill_weight = distill_weight
        self.temperature = temperature
        self.eta = eta
        self.proportion = proportion
        self.strategy = strategy
        self.measurement = measurement
        self.rd_pairing = rd_pairing
        self.stop_exemplar_grad = stop_exemplar_grad
        self.relu_features = relu_features
        self.head = head
        self.head_scale = head_scale
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            milestones=tuple(self.milestones), lr_decay=self.lr_decay,
            momentum=self.momentum, weight_decay=self.weight_decay,
            distill_weight=self.distill_weight, temperature=self.temperature,
            eta=self.eta, proportion=self.proportion, strategy=self.strategy,
            rd_pairing=self.rd_pairing, measurement=self.measurement,
            stop_exemplar_grad=self.stop_exemplar_grad)

    @property
    def _seed(self):
        return 0 if self.random_state is None else int(self.random_state)

    # -- fitting ---------------------------------------------------------

    def fit(self, X, y):
        """Forget everything and learn ``(X, y)`` as the first task."""
        for attr in ("params_", "classes_", "buffer_", "n_tasks_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(X, y)

    def partial_fit(self, X, y, oracle=None):
        """Learn one new task; ``y`` must contain only unseen classes.

        ``oracle`` (a fitted IncrementalClassifier over all classes) is used
        only when ``measurement == "oracle_logits"``.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        config = self._train_config()
        first = not hasattr(self, "params_")
        if first:
            self.model_config_ = ModelConfig(X.shape[1], tuple(self.hidden_dims), self.feature_dim,
                                            relu_features=self.relu_features, head=self.head,
                                            head_scale=self.head_scale)
            self.params_ = init_model(self.model_config_, self._seed)
            self.classes_ = np.array([], dtype=y.dtype)
            self.buffer_ = ReplayBuffer(self.memory_per_class)
            self.n_tasks_ = 0
            self.task_traces_ = []
            self.conflict_maps_ = []
        elif X.shape[1] != self.model_config_.input_dim:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.model_config_.input_dim}")

        new_labels = np.unique(y)
        seen = np.isin(new_labels, self.classes_)
        if seen.any():
            raise ValueError(f"classes {new_labels[seen].tolist()} were learned in an earlier task")
        n_old = len(self.classes_)
        prev = None if first else snapshot(self.params_, self.n_tasks_)
        self.classes_ = np.concatenate([self.classes_, new_labels])
        cols = np.searchsorted(new_labels, y) + n_old
        task = LabeledDataset(X, cols)
        task_index = self.n_tasks_

        self.params_ = expand_head(self.params_, len(new_labels), self._seed)
        ctx = TaskContext(n_old=n_old, snapshot=prev)
        cmap = ConflictMap(proportion=self.proportion, strategy=self.strategy)
        if prev is not None:
            cmap = self._predict_conflicts(prev, task, n_old, task_index, oracle)
            if self.eta > 0 and cmap:
                self._fill_clad_context(ctx, prev, cmap)
        self.conflict_maps_.append(cmap)

        rng = nc.Rng(self._seed, ("batch", task_index))
        _, trace = train_task(self.params_, task, self.buffer_, ctx, config, rng)
        self.task_traces_.append(trace.epochs)
        self.buffer_ = update_buffer(self.buffer_, task, self.params_, self.memory_per_class,
                                     normalize=self.herding_normalize)
        self.snapshot_ = prev
        self.n_tasks_ = task_index + 1
        return self

    def _predict_conflicts(self, prev, task, n_old, task_index, oracle):
        old = list(range(n_old))
        sims = []
        for c in np.unique(task.y):
            Xc = task.X[task.y == c]
            if self.measurement == "oracle_logits":
                if oracle is None:
                    raise ValueError("measurement='oracle_logits' needs an oracle model")
                lookup = {lab: j for j, lab in enumerate(oracle.classes_.tolist())}
                columns = [lookup[lab] for lab in self.classes_[:n_old].tolist()]
                sim = forgetting_prediction(oracle.params_, Xc, old, "oracle_logits",
                                            columns=columns, new_class=c)
            else:
                sim = forgetting_prediction(prev, Xc, old, self.measurement,
                                            buffer=self.buffer_, new_class=c)
            sims.append(sim)
        rng = nc.Rng(self._seed, ("conflict", task_index))
        return build_conflict_map(sims, self.proportion, self.strategy, rng)

    def _fill_clad_context(self, ctx, prev, cmap):
        K = self.params_.num_classes
        ctx.conflict_matrix = cmap.matrix(K)
        olds = sorted({c for v in cmap.conflicts.values() for c in v})
        if self.rd_pairing == "text":
            ctx.frozen_feats, ctx.frozen_labels = frozen_buffer_cache(prev, self.buffer_, olds)
        else:
            mem = self.buffer_.as_dataset(olds)
            if mem is not None:
                ctx.buffer_X, ctx.buffer_y = mem.X, mem.y
            else:
                ctx.buffer_X = np.zeros((0, self.model_config_.input_dim))
                ctx.buffer_y = np.zeros(0, dtype=np.int64)

    # -- inference -------------------------------------------------------

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return logits(self.params_, X)

    def predict_proba(self, X):
        return nc.softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        check_is_fitted(self, "params_")
        return features(self.params_, check_array(X, dtype=np.float64))

    # -- persistence -----------------------------------------------------

    def get_state(self):
        """JSON-ready dict with everything needed to continue the sequence."""
        check_is_fitted(self, "params_")
        return {
            "model": params_to_dict(self.params_, self.n_tasks_),
            "classes": [c.item() if hasattr(c, "item") else c for c in self.classes_],
            "buffer": self.buffer_.to_dict(),
            "n_tasks": self.n_tasks_,
            "estimator_params": _jsonable(self.get_params()),
            "conflict_maps": [m.to_dict() for m in self.conflict_maps_],
        }

    @classmethod
    def from_state(cls, state):
        est = cls(**{k: tuple(v) if isinstance(v, list) else v
                     for k, v in state["estimator_params"].items()})
        est.params_, _ = params_from_dict(state["model"])
        est.model_config_ = est.params_.config
        est.classes_ = np.array(state["classes"])
        est.buffer_ = ReplayBuffer.from_dict(state["buffer"])
        est.n_tasks_ = int(state["n_tasks"])
        est.task_traces_ = []
        est.conflict_maps_ = [ConflictMap.from_dict(m) for m in state["conflict_maps"]]
        est.snapshot_ = None
        return est


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
