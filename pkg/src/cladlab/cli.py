"""Command-line entry point: ``python3 -m cladlab <command>``.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 numerical abort.
The output directory is ``--out``, else ``$CLADLAB_OUTPUT_DIR``, else the config's
``output_dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as d
from . import runner
from .config import ABLATION_SEEDS, ExperimentConfig, config_from_dict, load_config
from .exceptions import (CladLabError, ConfigError, DegenerateVectorError, FeasibilityError,
                         NumericalError)
from .gradcheck import TOLERANCE, run_gradchecks

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_NUMERICAL = 4
OUTPUT_ENV = "CLADLAB_OUTPUT_DIR"

log = logging.getLogger("cladlab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_overrides(p):
    p.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--eta", type=float)
    p.add_argument("--proportion", type=float)
    p.add_argument("--strategy", choices=["top", "smallest", "random"])
    p.add_argument("--exemplars", type=int, help="exemplars per class R")
    p.add_argument("--seed", type=int, help="run a single replicate seed")
    p.add_argument("--seeds", help="comma-separated replicate seeds")
    p.add_argument("--measurement", choices=["logits", "cosine", "oracle_logits"])
    p.add_argument("--rd-pairing", dest="rd_pairing", choices=["text", "literal"])
    p.add_argument("--method", choices=["naive", "clad"],
                   help="naive forces eta=0; clad keeps the configured eta")
    p.add_argument("--epochs", type=int)


def build_parser():
    parser = _Parser(prog="cladlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write the synthetic dataset as CSV plus prototype JSON")
    _add_overrides(p)

    p = sub.add_parser("train", help="run every replicate seed and summarize")
    _add_overrides(p)
    p.add_argument("--stop-after", type=int, help="stop after this many tasks and write a checkpoint")
    p.add_argument("--resume", help="continue from a checkpoint file")

    p = sub.add_parser("ablate", help="sweep one knob over the replicate seeds")
    _add_overrides(p)
    p.add_argument("--sweep", required=True, choices=sorted(runner.SWEEPS))
    p.add_argument("--values", help="comma-separated grid overriding the default one")

    p = sub.add_parser("analyze", help="recompute forgetting profile and correlation for a run")
    p.add_argument("run_dir")
    p.add_argument("--permutations", type=int)
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("selftest", help="tiny end-to-end run plus gradient audit")
    return parser


def resolve_config(args):
    config = load_config(args.config) if args.config else ExperimentConfig()
    train, memory = {}, {}
    for name in ("eta", "proportion", "strategy", "measurement", "rd_pairing", "epochs"):
        value = getattr(args, name, None)
        if value is not None:
            train[name] = value
    if getattr(args, "method", None) == "naive":
        train["eta"] = 0.0
    if getattr(args, "exemplars", None) is not None:
        memory["per_class"] = args.exemplars
    overrides = {}
    if train:
        overrides["train"] = train
    if memory:
        overrides["memory"] = memory
    if getattr(args, "seeds", None):
        try:
            overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = [args.seed]
    return config.with_overrides(**overrides) if overrides else config


def output_dir(args, config):
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV) or config.output_dir)


def _parse_values(text, sweep):
    section, key, defaults = runner.sweep_values(sweep)
    kind = type(defaults[0])
    try:
        return [kind(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--values for sweep {sweep!r} must be {kind.__name__}s") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    config = resolve_config(args)
    if config.data.source != "synthetic":
        raise ConfigError("generate needs data.source = 'synthetic'")
    out = output_dir(args, config)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.seeds[0]
    seq, protos = runner.build_sequence(config, seed)
    train = d.LabeledDataset.concat([t.train for t in seq.tasks])
    test = d.LabeledDataset.concat([t.test for t in seq.tasks])
    d.save_csv(out / "train.csv", train)
    d.save_csv(out / "test.csv", test)
    d.save_prototypes_json(out / "prototypes.json", protos)
    audit = [{"new": n, "old": o, "target": t, "realized": r}
             for n, o, t, r in protos.realized_cosines()]
    (out / "collisions.json").write_text(runner.dumps({"format_version": 1, "collisions": audit}))
    print(f"wrote {len(train)} train / {len(test)} test rows to {out}")
    return EXIT_OK


def cmd_train(args):
    if args.resume:
        doc = runner.load_checkpoint(args.resume)
        config = config_from_dict(doc["config"])
        seeds = [doc["seed"]]
    else:
        config = resolve_config(args)
        seeds = list(config.seeds)
    out = output_dir(args, config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    bundles = []
    for seed in seeds:
        if args.resume:
            bundle, record, est, timings = runner.resume_experiment(doc, args.stop_after)
        else:
            bundle, record, est, timings = runner.run_experiment(config, seed, stop_after=args.stop_after)
        run_dir = runner.write_run(out / f"seed_{seed}", bundle, record, timings)
        if args.stop_after is not None:
            runner.save_checkpoint(run_dir / "checkpoint.json", config, seed, record, est)
        bundles.append(bundle)
        print(f"seed {seed}: avg incremental acc {bundle['avg_incremental_accuracy']:.4f}, "
              f"final acc {bundle['final_accuracy']:.4f}")
    summary = runner.summarize(bundles, config.metrics.n_permutations)
    (out / "summary.json").write_text(runner.dumps(summary))
    aia = summary["avg_incremental_accuracy"]
    print(f"summary over {aia['n']} seed(s): {aia['mean']:.4f} +- {aia['std']:.4f}")
    return EXIT_OK


def cmd_ablate(args):
    config = resolve_config(args)
    if not args.seeds and args.seed is None and not (args.config and _has_seeds(args.config)):
        config = config.with_overrides(seeds=list(ABLATION_SEEDS))
    values = _parse_values(args.values, args.sweep) if args.values else None
    out = output_dir(args, config)
    out.mkdir(parents=True, exist_ok=True)

    def progress(sweep, value, seed, bundle):
        log.info("%s=%s seed %d: aia %.4f", sweep, value, seed, bundle["avg_incremental_accuracy"])

    rows = runner.run_ablation(config, args.sweep, values, progress)
    (out / f"ablation_{args.sweep}.csv").write_text(runner.ablation_csv(rows))
    (out / f"ablation_{args.sweep}.json").write_text(
        runner.dumps({"format_version": 1, "config": config.to_dict(), "rows": rows}))
    for r in rows:
        print(f"{args.sweep}={r['value']}: aia {r['aia_mean']:.4f} +- {r['aia_std']:.4f}")
    return EXIT_OK


def _has_seeds(path):
    with open(path) as fh:
        return "seeds" in json.load(fh)


def cmd_analyze(args):
    root = Path(args.run_dir)
    paths = sorted(root.glob("seed_*/bundle.json")) or ([root / "bundle.json"] if (root / "bundle.json").exists() else [])
    if not paths:
        raise FileNotFoundError(f"no bundle.json under {root}")
    out = Path(args.out) if args.out else root
    bundles = []
    for path in paths:
        bundle = json.loads(path.read_text())
        if bundle.get("kind") != "result_bundle":
            raise CladLabError(f"{path} is not a result bundle")
        analysis = runner.analyze_bundle(bundle, args.permutations)
        target = out / path.parent.relative_to(root)
        target.mkdir(parents=True, exist_ok=True)
        (target / "analysis.json").write_text(runner.dumps(analysis))
        runner.write_analysis(target, {**bundle, **analysis})
        bundles.append({**bundle, **analysis})
        rep = analysis["correlation"]["max"]
        excl = analysis["profile"]["excluded"]
        if rep:
            print(f"seed {bundle['seed']}: r={rep['pearson_r']:.3f} p={rep['permutation_p']:.4f} "
                  f"(n={rep['n']}, excluded {excl})")
        else:
            print(f"seed {bundle['seed']}: correlation undefined (excluded {excl})")
    n_perm = args.permutations or bundles[0]["config"]["metrics"]["n_permutations"]
    (out / "analysis_summary.json").write_text(runner.dumps(runner.summarize(bundles, n_perm)))
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_gradchecks(args.instances, args.seed)
    worst = 0.0
    for name, errs in results.items():
        worst = max(worst, max(errs))
        status = "ok" if max(errs) <= TOLERANCE else "FAIL"
        print(f"{name:14s} instances={len(errs):3d} max_rel_err={max(errs):.2e} {status}")
    return EXIT_OK if worst <= TOLERANCE else EXIT_NUMERICAL


def cmd_selftest(args):
    code = cmd_gradcheck(argparse.Namespace(instances=3, seed=0))
    if code:
        return code
    config = ExperimentConfig().with_overrides(
        data={"n_classes": 6, "dim": 8, "n_train": 30, "n_test": 10, "n_collisions": 1},
        split={"base_size": 4, "increment": 2},
        model={"hidden_dims": [16], "feature_dim": 8},
        train={"epochs": 3, "batch_size": 16, "eta": 1.0},
        memory={"per_class": 3}, metrics={"n_permutations": 50}, seeds=[0])
    a, *_ = runner.run_experiment(config, 0)
    b, *_ = runner.run_experiment(config, 0)
    if runner.dumps(a) != runner.dumps(b):
        print("selftest: repeated run differs")
        return EXIT_RUNTIME
    print(f"selftest: end-to-end run ok (avg incremental acc {a['avg_incremental_accuracy']:.3f})")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "ablate": cmd_ablate,
            "analyze": cmd_analyze, "gradcheck": cmd_gradcheck, "selftest": cmd_selftest}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FeasibilityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, DegenerateVectorError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps({k: v for k, v in diag.items() if k != "trace"}, default=str), file=sys.stderr)
        return EXIT_NUMERICAL
    except (CladLabError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
