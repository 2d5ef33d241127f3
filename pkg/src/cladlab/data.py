"""Synthetic class-incremental benchmarks, CSV ingestion and task splitting.

Class semantics are modelled by unit prototypes: each sample is its class
prototype plus isotropic Gaussian noise.  "Similar" classes are produced by
placing a new prototype at a prescribed cosine from an older one.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, FeasibilityError, ParseError
from .numcore import Rng

MAX_FREE_COSINE = 0.5
COLLISION_TOL = 0.02


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X{self.X.shape} and y{self.y.shape} are not row-aligned")

    def __len__(self):
        return self.y.shape[0]

    @property
    def classes(self):
        return np.unique(self.y)

    def subset(self, classes):
        mask = np.isin(self.y, np.asarray(list(classes)))
        return LabeledDataset(self.X[mask], self.y[mask])

    def of_class(self, c):
        return self.X[self.y == c]

    @staticmethod
    def concat(parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return LabeledDataset(np.concatenate([p.X for p in parts]),
                              np.concatenate([p.y for p in parts]))


@dataclass
class ClassPrototypeSet:
    prototypes: np.ndarray  # (n_classes, dim), unit rows
    collisions: list = field(default_factory=list)  # [(new, old, target_cos)]

    def realized_cosines(self):
        P = self.prototypes
        return [(n, o, t, float(P[n] @ P[o])) for n, o, t in self.collisions]

    def to_dict(self):
        return {
            "format_version": 1,
            "prototypes": self.prototypes.tolist(),
            "collisions": [
                {"new_class": n, "old_class": o, "target_cosine": t, "realized_cosine": r}
                for n, o, t, r in self.realized_cosines()
            ],
        }


@dataclass
class Task:
    index: int
    classes: list
    train: LabeledDataset
    test: LabeledDataset


@dataclass
class TaskSequence:
    class_order: list
    base_size: int
    increment: int
    tasks: list

    def __len__(self):
        return len(self.tasks)

    def classes_up_to(self, t):
        """Classes introduced in tasks ``0..t`` (0-based)."""
        return [c for task in self.tasks[: t + 1] for c in task.classes]


# ---------------------------------------------------------------------------
# Prototypes
# ---------------------------------------------------------------------------


def _collision_order(n_classes, collisions):
    anchor = {}
    for new, old, target in collisions:
        if not (0 <= new < n_classes and 0 <= old < n_classes) or new == old:
            raise FeasibilityError(f"bad collision pair ({new}, {old})")
        if not 0.0 <= target < 1.0:
            raise ConfigError(f"collision target cosine {target} outside [0, 1)")
        if new in anchor:
            raise FeasibilityError(f"class {new} is the new side of two collisions")
        anchor[new] = (old, float(target))
    order, state = [], {}

    def visit(c):
        if state.get(c) == 1:
            raise FeasibilityError(f"collision cycle through class {c}")
        if state.get(c) == 2:
            return
        state[c] = 1
        if c in anchor:
            visit(anchor[c][0])
        state[c] = 2
        order.append(c)

    for c in range(n_classes):
        visit(c)
    return order, anchor


def generate_prototypes(n_classes, dim, collisions=(), seed=0, max_retries=2000):
    """Unit prototypes with all unspecified pairs at ``|cos| <= 0.5``.

    Each collision ``(new, old, target)`` places ``new`` by rotating ``old``
    toward a random orthogonal direction so that the cosine equals ``target``.
    """
    if dim < 4:
        raise ConfigError("prototype dim must be >= 4")
    collisions = [(int(n), int(o), float(t)) for n, o, t in collisions]
    order, anchor = _collision_order(n_classes, collisions)
    partners = {c: set() for c in range(n_classes)}
    for n, o, _ in collisions:
        partners[n].add(o)
        partners[o].add(n)

    rng = Rng(seed, ("prototypes",))
    P = np.zeros((n_classes, dim))
    placed = []
    for c in order:
        for _ in range(max_retries):
            w = rng.normal(size=dim)
            if c in anchor:
                old, target = anchor[c]
                w -= (w @ P[old]) * P[old]
                w /= np.linalg.norm(w)
                cand = target * P[old] + np.sqrt(1.0 - target * target) * w
            else:
                cand = w
            cand /= np.linalg.norm(cand)
            others = [p for p in placed if p not in partners[c]]
            if not others or np.max(np.abs(P[others] @ cand)) <= MAX_FREE_COSINE:
                break
        else:
            raise FeasibilityError(
                f"could not place class {c} after {max_retries} attempts; "
                "collision spec too dense for dim={dim}")
        P[c] = cand
        placed.append(c)
    out = ClassPrototypeSet(P, collisions)
    for n, o, t, r in out.realized_cosines():
        if abs(r - t) > COLLISION_TOL:
            raise FeasibilityError(f"collision ({n},{o}) realized {r:.4f}, target {t}")
    return out


def positional_collisions(class_order, base_size, increment, count, cosine):
    """Pair the first ``count`` base classes with new classes spread over later tasks.

    New classes are taken round-robin from the later tasks so each task
    brings some colliding classes.  Returns ``[(new, old, cosine), ...]``.
    """
    n_later = (len(class_order) - base_size) // increment
    if count > base_size or count > n_later * increment:
        raise ConfigError(f"cannot place {count} collisions")
    out = []
    for i in range(count):
        task, slot = i % n_later, i // n_later
        new = class_order[base_size + task * increment + slot]
        out.append((int(new), int(class_order[i]), float(cosine)))
    return out


def sample_dataset(protos, n_train_per_class, n_test_per_class, noise_sigma, seed):
    if noise_sigma <= 0:
        raise ConfigError("noise_sigma must be > 0")
    P = protos.prototypes if isinstance(protos, ClassPrototypeSet) else np.asarray(protos)
    n_classes, dim = P.shape
    out = []
    for split, n in (("train", n_train_per_class), ("test", n_test_per_class)):
        rng = Rng(seed, ("data", split))
        noise = rng.normal(0.0, noise_sigma, size=(n_classes, n, dim))
        X = (P[:, None, :] + noise).reshape(-1, dim)
        y = np.repeat(np.arange(n_classes), n)
        out.append(LabeledDataset(X, y))
    return tuple(out)


def class_order(n_classes, shuffle_seed):
    return [int(c) for c in Rng(shuffle_seed, ("shuffle",)).permutation(n_classes)]


def split_tasks(train, test, n_classes, base_size, increment, shuffle_seed=1993):
    rest = n_classes - base_size
    if base_size < 1 or increment < 1 or rest < 0 or rest % increment:
        raise ConfigError(
            f"cannot split {n_classes} classes into a base of {base_size} "
            f"plus tasks of {increment}")
    order = class_order(n_classes, shuffle_seed)
    groups = [order[:base_size]] + [
        order[i: i + increment] for i in range(base_size, n_classes, increment)]
    tasks = [Task(t, g, train.subset(g), test.subset(g)) for t, g in enumerate(groups)]
    return TaskSequence(order, base_size, increment, tasks)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def save_csv(path, dataset):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(dataset.X.shape[1])])
        for x, y in zip(dataset.X, dataset.y):
            w.writerow([int(y)] + [repr(float(v)) for v in x])


def _label_key(tok):
    try:
        return int(tok)
    except ValueError:
        return tok


def load_csv(path):
    """Read ``label,f0,f1,...`` rows.

    Returns ``(dataset, label_map)`` where labels are re-indexed densely in
    first-appearance order and ``label_map`` maps original label -> dense id.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "label" or len(header) < 2:
        raise ParseError("header must start with 'label' followed by feature columns", line=1)
    width = len(header)
    label_map, X, y = {}, [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} columns, got {len(row)}", line=lineno)
        key = _label_key(row[0].strip())
        try:
            feats = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric cell ({exc})", line=lineno) from None
        if not np.all(np.isfinite(feats)):
            raise ParseError("non-finite feature value", line=lineno)
        y.append(label_map.setdefault(key, len(label_map)))
        X.append(feats)
    if not X:
        raise ParseError("no data rows", line=2)
    return LabeledDataset(np.array(X), np.array(y)), label_map


def save_prototypes_json(path, protos):
    Path(path).write_text(json.dumps(protos.to_dict(), indent=1))


def make_benchmark(n_classes=20, dim=32, base_size=10, increment=5, n_train=200, n_test=100,
                   noise_sigma=0.2, n_collisions=0, collision_cosine=0.9, collisions=None,
                   seed=0, shuffle_seed=1993):
    """Prototypes, data and task split in one call.

    ``n_collisions`` positional collisions (first base classes paired with
    classes of later tasks) are added to any explicit ``collisions``.
    Returns ``(TaskSequence, ClassPrototypeSet)``.
    """
    order = class_order(n_classes, shuffle_seed)
    spec = list(collisions or [])
    if n_collisions:
        spec += positional_collisions(order, base_size, increment, n_collisions, collision_cosine)
    protos = generate_prototypes(n_classes, dim, spec, seed)
    train, test = sample_dataset(protos, n_train, n_test, noise_sigma, seed)
    return split_tasks(train, test, n_classes, base_size, increment, shuffle_seed), protos
