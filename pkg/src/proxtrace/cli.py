"""Command-line entry point.

Exit codes: 0 success, 1 failed check, 2 schema error, 3 data quality,
4 empty stratum, 5 invalid configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    EmptyStratum,
    ExcessiveMalformedRows,
    SchemaError,
    SchemaMap,
    build_windows,
    dumps_samples,
    parse_files,
    split,
)
from .experiments import (
    ConfigError,
    dumps_report,
    format_table2,
    load_config,
    load_datasets,
    run_table2,
    sweep,
    table2_report,
)
from .sim import ConfigInvalid, load_scenario, run_scenario
from .tracing.payload import Mode
from .tracing.worlds import random_world, run_world
from .tree import dumps_tree, evaluate, evaluate_baseline, loads_tree, train_tree

EXIT_OK, EXIT_CHECK_FAILED, EXIT_SCHEMA, EXIT_DATA, EXIT_EMPTY, EXIT_CONFIG = 0, 1, 2, 3, 4, 5


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Collects inputs for the manifest and writes outputs under ``--out``."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.started = datetime.now(timezone.utc).isoformat()
        self.inputs: dict[str, str] = {}
        self.config_digest = ""

    def track(self, *paths) -> None:
        for p in paths:
            self.inputs[str(p)] = _sha256(p)

    def write(self, name: str, text: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        return path

    def finish(self, seed) -> None:
        manifest = {
            "command": self.args.command,
            "argv": sys.argv[1:],
            "config_digest": self.config_digest,
            "dataset_digests": dict(sorted(self.inputs.items())),
            "seed": seed,
            "tool_version": __version__,
            "started_at": self.started,
            "finished_at": datetime.now(timezone.utc).isoformat(),
        }
        self.write("manifest.json", json.dumps(manifest, indent=2) + "\n")


def _experiment_config(run: Run):
    cfg = load_config(run.args.config)
    if run.args.seed is not None:
        cfg.split_seed = run.args.seed
    run.config_digest = cfg.digest()
    return cfg


def _load_labeled(run: Run, cfg):
    schema = SchemaMap.load(run.args.schema)
    run.track(run.args.schema, *run.args.dataset)
    samples = parse_files(run.args.dataset, schema).samples
    if run.args.position:
        samples = [s for s in samples if s.position_pair in run.args.position]
    return build_windows(samples, cfg.window_s, window_n=cfg.window_n, cutoff_m=cfg.cutoff_m)


def cmd_ingest(run: Run) -> int:
    schema = SchemaMap.load(run.args.schema)
    run.track(run.args.schema, *run.args.dataset)
    result = parse_files(run.args.dataset, schema)
    run.write("samples.csv", dumps_samples(result.samples))
    strata = result.stratum_counts()
    summary = {
        "total": len(result.samples),
        "rows_read": result.n_rows,
        "malformed": len(result.malformed),
        "strata": [{"position_pair": p, "distance_m": d, "count": n} for (p, d), n in strata.items()],
    }
    run.write("ingest_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"total {len(result.samples)} samples ({len(result.malformed)} malformed rows skipped)")
    for (p, d), n in strata.items():
        print(f"  {p} {d:>4} m  {n}")
    run.finish(None)
    return EXIT_OK


def cmd_train(run: Run) -> int:
    cfg = _experiment_config(run)
    windows = _load_labeled(run, cfg)
    halves = split(windows, cfg.train_fraction, cfg.split_seed)
    tree = train_tree(halves.train, cfg.tree)
    path = run.write("tree.json", dumps_tree(tree))
    print(f"trained on {len(halves.train)} windows -> {path}")
    run.finish(cfg.split_seed)
    return EXIT_OK


def cmd_eval(run: Run) -> int:
    cfg = _experiment_config(run)
    tree = loads_tree(Path(run.args.tree).read_text(encoding="utf-8"))
    run.track(run.args.tree)
    windows = _load_labeled(run, cfg)
    test = windows if run.args.all else split(windows, cfg.train_fraction, cfg.split_seed).test
    name = ",".join(run.args.position or []) or "all"
    report = {
        "tree": evaluate(tree, test).to_dict(name),
        "baseline": evaluate_baseline(test, cfg.baseline_cutoff_dbm).to_dict(name),
    }
    run.write("eval.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"accuracy {report['tree']['accuracy']:.4f}  fn_rate {report['tree']['fn_rate']:.4f}  n_test {len(test)}")
    run.finish(cfg.split_seed)
    return EXIT_OK


def cmd_table2(run: Run) -> int:
    if run.args.config is None:
        raise ConfigError("table2 needs --config naming the dataset files")
    cfg = _experiment_config(run)
    for ds in cfg.datasets:
        run.track(ds.schema, *ds.files)
    data = load_datasets(cfg)
    rows = run_table2(cfg, data)
    sweep_result = sweep(cfg, data) if run.args.sweep or not all(r.passed for r in rows) else None
    run.write("table2.json", dumps_report(table2_report(rows, data, cfg, sweep_result)))
    text = format_table2(rows)
    run.write("table2.txt", text)
    print(text, end="")
    run.finish(cfg.split_seed)
    return EXIT_OK


def cmd_simulate(run: Run) -> int:
    cfg = load_scenario(run.args.scenario)
    run.track(run.args.scenario)
    run.config_digest = _sha256(run.args.scenario)
    if run.args.seed is not None:
        cfg.rng_seed = run.args.seed
    modes = [Mode.CENTRALIZED, Mode.DECENTRALIZED] if run.args.mode == "both" else [Mode(run.args.mode or cfg.mode)]
    results = {}
    for mode in modes:
        metrics = run_scenario(cfg, mode=mode)
        results[mode] = metrics
        metrics.write(run.out, prefix=f"{mode.value}_" if len(modes) > 1 else "")
        print(f"{mode.value}: sensitivity {metrics.sensitivity:.4f} specificity {metrics.specificity:.4f}")
    if len(modes) > 1:
        same = results[Mode.CENTRALIZED].alerted_pairs == results[Mode.DECENTRALIZED].alerted_pairs
        line = f"equivalence: {'PASS' if same else 'FAIL'}\n"
        run.write("equivalence.txt", line)
        print(line, end="")
    run.finish(cfg.rng_seed)
    return EXIT_OK


def cmd_protocol_check(run: Run) -> int:
    seed = 0 if run.args.seed is None else run.args.seed
    rng = np.random.default_rng(seed)
    failures = []
    for trial in range(run.args.trials):
        world = random_world(rng)
        cen = run_world(world, Mode.CENTRALIZED, with_oracle=True)
        dec = run_world(world, Mode.DECENTRALIZED)
        oracle = {k for k, v in cen.oracle.items() if v >= world.params.risk_threshold_s}
        if not cen.triggered == dec.triggered == oracle:
            failures.append(trial)
    report = {"seed": seed, "trials": run.args.trials, "failures": failures, "verdict": "FAIL" if failures else "PASS"}
    run.write("protocol_check.json", json.dumps(report, indent=2) + "\n")
    print(f"protocol equivalence over {run.args.trials} worlds: {report['verdict']}")
    run.finish(seed)
    return EXIT_CHECK_FAILED if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config (TOML)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the run seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    parser = argparse.ArgumentParser(prog="proxtrace", parents=[common], description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("dataset", nargs="+", type=Path)
        p.add_argument("--schema", required=True, type=Path)
        p.add_argument("--position", action="append", help="restrict to a position pair (repeatable)")

    p = sub.add_parser("ingest", parents=[common], help="parse datasets into the canonical dump")
    p.add_argument("dataset", nargs="+", type=Path)
    p.add_argument("--schema", required=True, type=Path)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="train a tree on the train split")
    data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a tree on the test split")
    data_args(p)
    p.add_argument("--tree", required=True, type=Path)
    p.add_argument("--all", action="store_true", help="evaluate on every window, not just the test split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("table2", parents=[common], help="per-combination accuracies against the reference table")
    p.add_argument("--sweep", action="store_true", help="always run the hyperparameter sweep")
    p.set_defaults(func=cmd_table2)

    p = sub.add_parser("simulate", parents=[common], help="run a contact scenario")
    p.add_argument("scenario", type=Path)
    p.add_argument("--mode", choices=["centralized", "decentralized", "both"])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("protocol-check", parents=[common], help="randomized centralized/decentralized equivalence")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_protocol_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", "out")):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(Run(args))
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ExcessiveMalformedRows as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EmptyStratum as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (ConfigInvalid, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
