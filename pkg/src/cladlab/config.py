"""Experiment configuration: nested JSON sections with strict key checking.

Every section is a dataclass whose defaults are the documented desk-scale
protocol.  Loading rejects unknown keys and wrong types before any work starts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .clad import MEASUREMENTS, PAIRINGS, STRATEGIES
from .exceptions import ConfigError

CONFIG_VERSION = 1
HEADLINE_SEEDS = (0, 1, 2, 3, 4)
ABLATION_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"  # or "csv"
    n_classes: int = 20
    dim: int = 32
    n_train: int = 200
    n_test: int = 100
    noise_sigma: float = 0.2
    n_collisions: int = 0
    collision_cosine: float = 0.9
    seed: int | None = None  # None: each replicate draws its own data from its seed
    train_csv: str | None = None
    test_csv: str | None = None

    def check(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'")
        if self.source == "csv" and not (self.train_csv and self.test_csv):
            raise ConfigError("data.source 'csv' needs data.train_csv and data.test_csv")
        if self.noise_sigma <= 0:
            raise ConfigError("data.noise_sigma must be > 0")
        if min(self.n_classes, self.dim, self.n_train, self.n_test) < 1:
            raise ConfigError("data sizes must be positive")
        if not -1.0 <= self.collision_cosine <= 1.0:
            raise ConfigError("data.collision_cosine must lie in [-1, 1]")


@dataclass(frozen=True)
class SplitSection:
    base_size: int = 10
    increment: int = 5
    shuffle_seed: int = 1993

    def check(self):
        if self.base_size < 1 or self.increment < 1:
            raise ConfigError("split sizes must be >= 1")


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple = (128, 128)
    feature_dim: int = 64
    relu_features: bool = True
    head: str = "linear"
    head_scale: float = 16.0

    def check(self):
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ConfigError("model.hidden_dims must be nonempty and positive")
        if self.feature_dim < 2:
            raise ConfigError("model.feature_dim must be >= 2")
        if self.head not in ("linear", "cosine"):
            raise ConfigError("model.head must be 'linear' or 'cosine'")


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    milestones: tuple = (0.5, 0.75)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    distill_weight: float = 0.0
    temperature: float = 2.0
    eta: float = 0.0
    proportion: float = 0.1
    strategy: str = "top"
    rd_pairing: str = "text"
    measurement: str = "logits"
    stop_exemplar_grad: bool = False

    def check(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("train.epochs must be >= 1 and train.batch_size >= 2")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.eta < 0 or self.distill_weight < 0:
            raise ConfigError("train.eta and train.distill_weight must be >= 0")
        if not 0.0 < self.proportion <= 1.0:
            raise ConfigError("train.proportion must lie in (0, 1]")
        for name, allowed in (("strategy", STRATEGIES), ("rd_pairing", PAIRINGS),
                              ("measurement", MEASUREMENTS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"train.{name} must be one of {list(allowed)}")


@dataclass(frozen=True)
class MemorySection:
    per_class: int = 20
    herding_normalize: bool = True

    def check(self):
        if self.per_class < 0:
            raise ConfigError("memory.per_class must be >= 0")


@dataclass(frozen=True)
class MetricsSection:
    aggregation: str = "max"
    n_permutations: int = 10_000

    def check(self):
        if self.aggregation not in ("max", "mean"):
            raise ConfigError("metrics.aggregation must be 'max' or 'mean'")
        if self.n_permutations < 1:
            raise ConfigError("metrics.n_permutations must be >= 1")


SECTIONS = {"data": DataSection, "split": SplitSection, "model": ModelSection,
            "train": TrainSection, "memory": MemorySection, "metrics": MetricsSection}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    memory: MemorySection = field(default_factory=MemorySection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    output_dir: str = "runs"
    seeds: tuple = HEADLINE_SEEDS

    def __post_init__(self):
        for name in SECTIONS:
            getattr(self, name).check()
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")

    def to_dict(self):
        d = {"format_version": CONFIG_VERSION}
        for name in SECTIONS:
            d[name] = _plain(asdict(getattr(self, name)))
        d["output_dir"] = self.output_dir
        d["seeds"] = list(self.seeds)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def with_overrides(self, **sections):
        """``with_overrides(train={"eta": 2.0}, memory={"per_class": 5})``."""
        out = self
        for name, values in sections.items():
            if name in SECTIONS:
                out = replace(out, **{name: _section(SECTIONS[name], name,
                                                     {**asdict(getattr(out, name)), **values})})
            elif name in ("output_dir", "seeds"):
                out = replace(out, **{name: _top(name, values)})
            else:
                raise ConfigError(f"unknown config key {name!r}")
        return out

    def estimator_params(self, seed):
        t, mo, me = self.train, self.model, self.memory
        return dict(
            hidden_dims=tuple(mo.hidden_dims), feature_dim=mo.feature_dim,
            relu_features=mo.relu_features, head=mo.head, head_scale=mo.head_scale,
            epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, milestones=tuple(t.milestones),
            lr_decay=t.lr_decay, momentum=t.momentum, weight_decay=t.weight_decay,
            distill_weight=t.distill_weight, temperature=t.temperature, eta=t.eta,
            proportion=t.proportion, strategy=t.strategy, measurement=t.measurement,
            rd_pairing=t.rd_pairing, stop_exemplar_grad=t.stop_exemplar_grad,
            memory_per_class=me.per_class, herding_normalize=me.herding_normalize,
            random_state=int(seed))


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


_NUMBER = (int, float)


def _coerce(cls_name, f, value):
    """Type-check one field against its default's type."""
    default = f.default
    where = f"{cls_name}.{f.name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, _NUMBER) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a list of numbers")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if default is None:
        if value is None:
            return None
        want = int if str(f.type).startswith("int") else str
        if isinstance(value, bool) or not isinstance(value, want):
            raise ConfigError(f"{where} must be {want.__name__} or null")
        return value
    if isinstance(value, bool) or not isinstance(value, _NUMBER):
        raise ConfigError(f"{where} must be a number")
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{where} must be an integer")
        return int(value)
    return float(value)


def _section(cls, name, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    kwargs = {k: _coerce(name, known[k], v) for k, v in values.items()}
    return cls(**kwargs)


def _top(name, value):
    if name == "output_dir":
        if not isinstance(value, str):
            raise ConfigError("output_dir must be a string")
        return value
    if not isinstance(value, (list, tuple)) or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in value):
        raise ConfigError("seeds must be a list of non-negative integers")
    return tuple(value)


def config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    d = dict(d)
    version = d.pop("format_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config format_version {version} is not supported (expected {CONFIG_VERSION})")
    unknown = sorted(set(d) - set(SECTIONS) - {"output_dir", "seeds"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _section(cls, name, d[name]) for name, cls in SECTIONS.items() if name in d}
    for name in ("output_dir", "seeds"):
        if name in d:
            kwargs[name] = _top(name, d[name])
    return ExperimentConfig(**kwargs)


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(raw)


def collision_benchmark(**train):
    """The imbalanced-forgetting benchmark: 4 collisions at cosine 0.9, R=5, naive replay."""
    base = ExperimentConfig().with_overrides(data={"n_collisions": 4, "collision_cosine": 0.9},
                                             memory={"per_class": 5})
    return base.with_overrides(train=train) if train else base
