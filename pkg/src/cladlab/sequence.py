"""Run an estimator over a task sequence and record per-class accuracies."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .clad import SimilarityVector, forgetting_prediction
from .data import LabeledDataset
from .estimator import IncrementalClassifier
from .metrics import avg_incremental_accuracy, overall_accuracy, per_class_accuracy
from .model import snapshot

RECORD_VERSION = 1


@dataclass
class RunRecord:
    class_order: list
    task_classes: list
    accuracy: list = field(default_factory=list)  # per task: {label: acc}
    overall: list = field(default_factory=list)
    similarity_f1: list = field(default_factory=list)  # SimilarityVector dicts, label space
    conflict_maps: list = field(default_factory=list)  # per task: {new: [old, ...]}
    traces: list = field(default_factory=list)
    timings: list = field(default_factory=list)

    @property
    def avg_incremental_accuracy(self):
        return avg_incremental_accuracy(self.overall)

    @property
    def base_classes(self):
        return list(self.task_classes[0])

    def to_dict(self, include_timings=True):
        d = {
            "format_version": RECORD_VERSION,
            "class_order": self.class_order,
            "task_classes": self.task_classes,
            "accuracy": [{str(k): v for k, v in row.items()} for row in self.accuracy],
            "overall": self.overall,
            "avg_incremental_accuracy": (self.avg_incremental_accuracy if self.overall else None),
            "similarity_f1": self.similarity_f1,
            "conflict_maps": [{str(k): v for k, v in m.items()} for m in self.conflict_maps],
            "traces": self.traces,
        }
        if include_timings:
            d["timings"] = self.timings
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            class_order=list(d["class_order"]),
            task_classes=[list(t) for t in d["task_classes"]],
            accuracy=[{int(k): v for k, v in row.items()} for row in d["accuracy"]],
            overall=list(d["overall"]),
            similarity_f1=list(d["similarity_f1"]),
            conflict_maps=[{int(k): v for k, v in m.items()} for m in d["conflict_maps"]],
            traces=list(d.get("traces", [])),
            timings=list(d.get("timings", [])),
        )

    def similarity_vectors(self):
        return [SimilarityVector.from_dict(s) for s in self.similarity_f1]

    def metrics_csv(self):
        """Per-task, per-class accuracy table; timing-free so runs compare bitwise."""
        lines = ["label,task,accuracy"]
        for t, row in enumerate(self.accuracy):
            for c in sorted(row):
                lines.append(f"{c},{t},{row[c]!r}")
        for t, a in enumerate(self.overall):
            lines.append(f"all,{t},{a!r}")
        return "\n".join(lines) + "\n"


def _f1_similarities(est, seq):
    """Mean logits of every later class under the model after the base task."""
    f1 = snapshot(est.params_, 1)
    old_cols = list(range(len(est.classes_)))
    old_labels = [int(c) for c in est.classes_]
    out = []
    for task in seq.tasks[1:]:
        for c in task.classes:
            sv = forgetting_prediction(f1, task.train.of_class(c), old_cols, "logits", new_class=c)
            sv.old_classes = old_labels
            out.append(sv.to_dict())
    return out


def make_estimator(params):
    return IncrementalClassifier(**params)


def fit_oracle(seq, params):
    joint = LabeledDataset.concat([t.train for t in seq.tasks])
    oracle_params = dict(params, eta=0.0, distill_weight=0.0, measurement="logits")
    return IncrementalClassifier(**oracle_params).fit(joint.X, joint.y)


def run_sequence(seq, params=None, state=None, stop_after=None):
    """Train ``IncrementalClassifier(**params)`` on each task in turn.

    ``state`` (from a previous call's returned state) resumes mid-sequence;
    ``stop_after`` ends after that many tasks.  Returns ``(record, estimator)``.
    """
    params = dict(params or {})
    if state is not None:
        est = IncrementalClassifier.from_state(state["estimator"])
        record = RunRecord.from_dict(state["record"])
    else:
        est = make_estimator(params)
        record = RunRecord(list(seq.class_order), [list(t.classes) for t in seq.tasks])
    oracle = fit_oracle(seq, est.get_params()) if est.measurement == "oracle_logits" else None

    start = len(record.accuracy)
    end = len(seq.tasks) if stop_after is None else min(stop_after, len(seq.tasks))
    for t in range(start, end):
        tic = time.perf_counter()
        task = seq.tasks[t]
        est.partial_fit(task.train.X, task.train.y, oracle=oracle)
        if t == 0 and len(seq.tasks) > 1:
            record.similarity_f1 = _f1_similarities(est, seq)
        cmap = est.conflict_maps_[-1]
        record.conflict_maps.append({int(est.classes_[n]): [int(est.classes_[o]) for o in olds]
                                     for n, olds in cmap.conflicts.items()})
        record.traces.append(est.task_traces_[-1])

        seen = LabeledDataset.concat([x.test for x in seq.tasks[: t + 1]])
        pred = est.predict(seen.X)
        record.accuracy.append(per_class_accuracy(pred, seen.y))
        record.overall.append(overall_accuracy(pred, seen.y))
        record.timings.append(time.perf_counter() - tic)
    return record, est


def sequence_state(record, est):
    return {"format_version": RECORD_VERSION, "record": record.to_dict(),
            "estimator": est.get_state()}
