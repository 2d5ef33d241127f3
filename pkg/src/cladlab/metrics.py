"""Accuracy, forgetting and similarity-forgetting correlation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .numcore import Rng


def per_class_accuracy(predictions, labels):
    """``{class: fraction correct}`` over the classes present in ``labels``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    out = {}
    for c in np.unique(labels):
        mask = labels == c
        out[int(c)] = float(np.mean(predictions[mask] == c))
    return out


def overall_accuracy(predictions, labels):
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def normalized_forgetting(a_base, a_all):
    """``(a_base - a_all) / a_base``; None when ``a_base == 0`` (undefined)."""
    if a_base <= 0:
        return None
    return (a_base - a_all) / a_base


def avg_incremental_accuracy(accuracies):
    accuracies = list(accuracies)
    if not accuracies:
        raise ValueError("average incremental accuracy of an empty list")
    return float(np.mean(accuracies))


def similarity_level(similarity_vectors, old_class_ids, aggregation="max"):
    """Aggregate each old class's entry across the later classes' similarity vectors."""
    if aggregation not in ("max", "mean"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    reduce = np.max if aggregation == "max" else np.mean
    out = {}
    for c in old_class_ids:
        vals = []
        for sv in similarity_vectors:
            olds = list(sv.old_classes)
            if c in olds:
                vals.append(sv.scores[olds.index(c)])
        if vals:
            out[int(c)] = float(reduce(vals))
    return out


@dataclass
class CorrelationReport:
    pearson_r: float
    permutation_p: float
    n: int
    pairs: list = field(default_factory=list)
    n_permutations: int = 0

    def to_dict(self):
        return {"pearson_r": self.pearson_r, "permutation_p": self.permutation_p,
                "n": self.n, "n_permutations": self.n_permutations,
                "pairs": [[float(a), float(b)] for a, b in self.pairs]}


def pearson_r(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc * xc).sum()), np.sqrt((yc * yc).sum())
    if sx == 0 or sy == 0:
        raise ValueError("correlation undefined: zero variance")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def pearson(xs, ys, n_permutations=10_000, seed=0):
    """Pearson r with a two-sided permutation p-value.

    ``p`` is the fraction of permutations of ``ys`` with ``|r'| >= |r|``.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and equally long")
    if x.size < 3:
        raise ValueError("need at least 3 pairs")
    r = pearson_r(x, y)
    xc = (x - x.mean()) / np.sqrt(((x - x.mean()) ** 2).sum())
    yc = (y - y.mean()) / np.sqrt(((y - y.mean()) ** 2).sum())
    gen = Rng(seed, ("permutation",)).generator
    hits, done, chunk = 0, 0, 2000
    while done < n_permutations:
        m = min(chunk, n_permutations - done)
        perms = gen.permuted(np.tile(yc, (m, 1)), axis=1)
        # tolerance keeps exact ties counted despite summation-order rounding
        hits += int((np.abs(perms @ xc) >= abs(r) - 1e-12).sum())
        done += m
    p = hits / n_permutations if n_permutations else float("nan")
    return CorrelationReport(r, p, int(x.size), list(zip(x.tolist(), y.tolist())), n_permutations)


@dataclass
class ForgettingProfile:
    rows: list  # dicts: class, a_base, a_all, delta, s_max, s_mean
    excluded: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "a_base", "a_all", "delta", "s_max", "s_mean"])
        for r in self.rows:
            w.writerow([r["class"]] + [repr(float(r[k])) for k in ("a_base", "a_all", "delta", "s_max", "s_mean")])
        return buf.getvalue()

    def to_dict(self):
        return {"format_version": 1, "rows": self.rows, "excluded": self.excluded}


def forgetting_profile(acc_base, acc_final, s_max, s_mean):
    rows, excluded = [], []
    for c in sorted(acc_base):
        delta = normalized_forgetting(acc_base[c], acc_final[c])
        if delta is None or c not in s_max:
            excluded.append(int(c))
            continue
        rows.append({"class": int(c), "a_base": acc_base[c], "a_all": acc_final[c],
                     "delta": delta, "s_max": s_max[c], "s_mean": s_mean[c]})
    return ForgettingProfile(rows, excluded)


def scatter_text(pairs, header="# similarity delta"):
    lines = [header] + [f"{a!r} {b!r}" for a, b in pairs]
    return "\n".join(lines) + "\n"


def report_json(profile, reports):
    return json.dumps({"profile": profile.to_dict(),
                       "correlation": {k: v.to_dict() for k, v in reports.items()}}, indent=1)
