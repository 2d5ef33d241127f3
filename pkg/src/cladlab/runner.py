"""Experiment orchestration shared by the CLI and the acceptance suite.

A run is one (config, seed) pair.  Its ``ResultBundle`` is a JSON-ready dict
holding the config echo, the run record, the forgetting profile and the
correlation reports.  Wall-clock timings are kept out of the bundle so equal
inputs give byte-identical bundles.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import data as d
from .config import ExperimentConfig, config_from_dict
from .exceptions import ConfigError, FormatVersionError, ParseError
from .metrics import forgetting_profile, pearson, scatter_text, similarity_level
from .numcore import Rng
from .sequence import RunRecord, run_sequence, sequence_state

BUNDLE_VERSION = 1
CHECKPOINT_VERSION = 1

SWEEPS = {
    "strategy": ("train", "strategy", ["top", "smallest", "random"]),
    "proportion": ("train", "proportion", [0.1, 0.2, 0.3, 0.5]),
    "eta": ("train", "eta", [1.0, 2.0, 4.0, 8.0]),
    "exemplars": ("memory", "per_class", [5, 10, 20, 30, 40]),
    "measurement": ("train", "measurement", ["logits", "cosine", "oracle_logits"]),
}


def dumps(obj):
    """Canonical JSON used for every artifact."""
    return json.dumps(obj, indent=1, sort_keys=True)


def _remap_test(test, test_map, train_map):
    inverse = {v: k for k, v in test_map.items()}
    try:
        y = np.array([train_map[inverse[int(c)]] for c in test.y])
    except KeyError as exc:
        raise ParseError(f"test label {exc.args[0]!r} never appears in the training file") from None
    return d.LabeledDataset(test.X, y)


def build_sequence(config, seed):
    """``(TaskSequence, ClassPrototypeSet or None)`` for one replicate."""
    dc, sc = config.data, config.split
    if dc.source == "csv":
        train, train_map = d.load_csv(dc.train_csv)
        test, test_map = d.load_csv(dc.test_csv)
        test = _remap_test(test, test_map, train_map)
        n = len(train_map)
        return d.split_tasks(train, test, n, sc.base_size, sc.increment, sc.shuffle_seed), None
    data_seed = seed if dc.seed is None else dc.seed
    return d.make_benchmark(
        n_classes=dc.n_classes, dim=dc.dim, base_size=sc.base_size, increment=sc.increment,
        n_train=dc.n_train, n_test=dc.n_test, noise_sigma=dc.noise_sigma,
        n_collisions=dc.n_collisions, collision_cosine=dc.collision_cosine,
        seed=data_seed, shuffle_seed=sc.shuffle_seed)


def analyze_record(record, n_permutations=10_000, seed=0):
    """Forgetting profile over the base classes plus Pearson reports per aggregation."""
    base = record.base_classes
    if len(record.accuracy) < 2:
        raise ValueError("analysis needs a run with at least two tasks")
    acc_base = {c: record.accuracy[0][c] for c in base}
    acc_final = {c: record.accuracy[-1][c] for c in base}
    svs = record.similarity_vectors()
    s_max = similarity_level(svs, base, "max")
    s_mean = similarity_level(svs, base, "mean")
    profile = forgetting_profile(acc_base, acc_final, s_max, s_mean)
    reports = {}
    deltas = [r["delta"] for r in profile.rows]
    for agg in ("max", "mean"):
        xs = [r["s_" + agg] for r in profile.rows]
        try:
            reports[agg] = pearson(xs, deltas, n_permutations, seed)
        except ValueError:
            reports[agg] = None
    return profile, reports


def collision_stats(record, collisions):
    """Mean forgetting of colliding vs non-colliding base classes, plus final accuracies."""
    profile, _ = analyze_record(record, n_permutations=1)
    colliding = {int(old) for _, old, _ in collisions}
    col = [r for r in profile.rows if r["class"] in colliding]
    non = [r for r in profile.rows if r["class"] not in colliding]
    final = record.accuracy[-1]
    base = record.base_classes

    def mean(xs):
        return float(np.mean(xs)) if xs else None

    return {
        "delta_colliding": mean([r["delta"] for r in col]),
        "delta_noncolliding": mean([r["delta"] for r in non]),
        "final_acc_colliding": mean([final[c] for c in base if c in colliding]),
        "final_acc_noncolliding": mean([final[c] for c in base if c not in colliding]),
    }


def make_bundle(config, seed, record, protos, n_permutations=None):
    n_perm = config.metrics.n_permutations if n_permutations is None else n_permutations
    profile, reports = analyze_record(record, n_perm, seed) if len(record.accuracy) > 1 else (None, {})
    collisions = [list(c) for c in protos.collisions] if protos is not None else []
    bundle = {
        "format_version": BUNDLE_VERSION,
        "kind": "result_bundle",
        # echo the single replicate so the bundle does not depend on the seed list it came from
        "config": config.with_overrides(seeds=[int(seed)]).to_dict(),
        "seed": int(seed),
        "record": record.to_dict(include_timings=False),
        "profile": profile.to_dict() if profile else None,
        "correlation": {k: (v.to_dict() if v else None) for k, v in reports.items()},
        "collisions": collisions,
        "avg_incremental_accuracy": record.avg_incremental_accuracy,
        "final_accuracy": record.overall[-1],
    }
    if collisions and profile is not None:
        bundle["collision_stats"] = collision_stats(record, protos.collisions)
    return bundle


def run_experiment(config, seed, state=None, stop_after=None):
    """One replicate.  Returns ``(bundle, record, estimator, timings)``."""
    seq, protos = build_sequence(config, seed)
    tic = time.perf_counter()
    record, est = run_sequence(seq, config.estimator_params(seed), state=state, stop_after=stop_after)
    elapsed = time.perf_counter() - tic
    bundle = make_bundle(config, seed, record, protos)
    return bundle, record, est, {"per_task": record.timings, "total": elapsed}


def bundle_config(bundle):
    return config_from_dict(bundle["config"])


# ---------------------------------------------------------------------------
# Summaries and sweeps
# ---------------------------------------------------------------------------


def _mean_std(xs):
    xs = [x for x in xs if x is not None]
    if not xs:
        return {"mean": None, "std": None, "n": 0}
    a = np.asarray(xs, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if a.size > 1 else 0.0, "n": int(a.size)}


def summarize(bundles, n_permutations=10_000):
    """Mean/std over replicate bundles, plus a Pearson test on the pooled profile pairs."""
    out = {
        "format_version": BUNDLE_VERSION,
        "kind": "summary",
        "seeds": [b["seed"] for b in bundles],
        "avg_incremental_accuracy": _mean_std([b["avg_incremental_accuracy"] for b in bundles]),
        "final_accuracy": _mean_std([b["final_accuracy"] for b in bundles]),
    }
    if all("collision_stats" in b for b in bundles) and bundles:
        out["collision_stats"] = {
            k: _mean_std([b["collision_stats"][k] for b in bundles])
            for k in bundles[0]["collision_stats"]}
    for agg in ("max", "mean"):
        rs = [b["correlation"].get(agg, {}) for b in bundles]
        out[f"pearson_{agg}"] = _mean_std([r["pearson_r"] if r else None for r in rs])
        pooled = [(row["s_" + agg], row["delta"]) for b in bundles if b["profile"]
                  for row in b["profile"]["rows"]]
        if len(pooled) >= 3:
            try:
                rep = pearson([p[0] for p in pooled], [p[1] for p in pooled], n_permutations, 0)
                out[f"pooled_{agg}"] = {"pearson_r": rep.pearson_r, "permutation_p": rep.permutation_p,
                                        "n": rep.n}
            except ValueError:
                out[f"pooled_{agg}"] = None
    return out


def sweep_values(sweep):
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; choose from {sorted(SWEEPS)}")
    return SWEEPS[sweep]


def run_ablation(config, sweep, values=None, progress=None):
    """Grid over one knob, averaged over ``config.seeds``; rows ordered by (value, seed)."""
    section, key, default_values = sweep_values(sweep)
    rows = []
    for value in (default_values if values is None else values):
        cfg = config.with_overrides(**{section: {key: value}})
        bundles = []
        for seed in cfg.seeds:
            bundle, *_ = run_experiment(cfg, seed)
            bundles.append(bundle)
            if progress:
                progress(sweep, value, seed, bundle)
        aia = _mean_std([b["avg_incremental_accuracy"] for b in bundles])
        fin = _mean_std([b["final_accuracy"] for b in bundles])
        rows.append({"sweep": sweep, "value": value, "aia_mean": aia["mean"], "aia_std": aia["std"],
                     "final_mean": fin["mean"], "final_std": fin["std"], "n_seeds": aia["n"]})
    return rows


def ablation_csv(rows):
    lines = ["label,value,aia_mean,aia_std,final_mean,final_std,n_seeds"]
    for i, r in enumerate(rows):
        # leading integer column keeps the table readable by the package's CSV loader
        lines.append(f"{i},{r['value']},{r['aia_mean']!r},{r['aia_std']!r},"
                     f"{r['final_mean']!r},{r['final_std']!r},{r['n_seeds']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def write_run(out_dir, bundle, record, timings):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bundle.json").write_text(dumps(bundle))
    (out / "timings.json").write_text(dumps(timings))
    (out / "metrics.csv").write_text(record.metrics_csv())
    write_analysis(out, bundle)
    return out


def write_analysis(out, bundle):
    out = Path(out)
    if not bundle.get("profile"):
        return
    rows = bundle["profile"]["rows"]
    header = "label,a_base,a_all,delta,s_max,s_mean"
    body = [f"{r['class']},{r['a_base']!r},{r['a_all']!r},{r['delta']!r},{r['s_max']!r},{r['s_mean']!r}"
            for r in rows]
    (out / "profile.csv").write_text("\n".join([header] + body) + "\n")
    for agg in ("max", "mean"):
        pairs = [(r["s_" + agg], r["delta"]) for r in rows]
        (out / f"scatter_{agg}.dat").write_text(scatter_text(pairs, f"# s_{agg} delta"))
    (out / "correlation.json").write_text(dumps({"profile": bundle["profile"],
                                                 "correlation": bundle["correlation"]}))


def analyze_bundle(bundle, n_permutations=None):
    """Recompute profile and correlation from a bundle's record alone."""
    record = RunRecord.from_dict(bundle["record"])
    n_perm = bundle["config"]["metrics"]["n_permutations"] if n_permutations is None else n_permutations
    profile, reports = analyze_record(record, n_perm, bundle["seed"])
    return {"format_version": BUNDLE_VERSION, "kind": "analysis", "seed": bundle["seed"],
            "profile": profile.to_dict(),
            "correlation": {k: (v.to_dict() if v else None) for k, v in reports.items()}}


def save_checkpoint(path, config, seed, record, est):
    """Model, buffer, record and the next batch-stream state in one JSON file."""
    next_task = len(record.accuracy)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "checkpoint",
        "config": config.to_dict(),
        "seed": int(seed),
        "next_task": next_task,
        # per-task streams are derived from (seed, task); this is the one the next task will use
        "rng": Rng(int(seed), ("batch", next_task)).get_state(),
        "state": sequence_state(record, est),
    }
    text = dumps(doc)
    Path(path).write_text(text)
    return text


def load_checkpoint(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint is not valid JSON: {exc}") from None
    if doc.get("kind") != "checkpoint":
        raise ParseError("not a checkpoint file")
    if doc.get("format_version", 0) > CHECKPOINT_VERSION:
        raise FormatVersionError(
            f"checkpoint format_version {doc['format_version']} is newer than supported {CHECKPOINT_VERSION}")
    return doc


def resume_experiment(doc, stop_after=None):
    config = config_from_dict(doc["config"])
    return run_experiment(config, doc["seed"], state=doc["state"], stop_after=stop_after)


__all__ = ["ExperimentConfig", "build_sequence", "run_experiment", "make_bundle", "summarize",
           "run_ablation", "analyze_record", "analyze_bundle", "save_checkpoint", "load_checkpoint",
           "resume_experiment", "collision_stats", "write_run", "dumps"]
