"""Per-combination training/evaluation reproducing the smartphone vs smartwatch table."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import (
    DEFAULT_CUTOFF_M,
    EmptyStratum,
    LabeledWindow,
    RssSample,
    SchemaMap,
    build_windows,
    parse_files,
    split,
)
from .tree import EvalReport, TreeParams, baseline_false_negatives, evaluate, evaluate_baseline, train_tree

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

ACCURACY_TOLERANCE_PP = 3.0

# (approach, combination, positions, reference accuracy %)
TABLE2_ROWS = (
    ("smartphone", "hand-to-hand", ("HH",), 85.82),
    ("smartphone", "hand-to-pocket", ("HP",), 90.75),
    ("smartphone", "hand-to-backpack", ("HB",), 81.44),
    ("smartphone", "pocket-to-backpack", ("PB",), 87.51),
    ("smartphone", "pocket-to-pocket", ("PP",), 87.26),
    ("smartphone", "backpack-to-backpack", ("BB",), 90.85),
    ("smartwatch", "direct", ("LR", "RL"), 94.16),
    ("smartwatch", "crosswise", ("LL", "RR"), 90.59),
)

EXPECTED_ROWS = {"smartphone": 123_718, "smartwatch": 37_644}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSource:
    name: str
    schema: Path
    files: list[Path]
    role: str = "all"  # "all", "train" or "test"
    expected_rows: int | None = None


@dataclass
class ExperimentConfig:
    cutoff_m: float = DEFAULT_CUTOFF_M
    tree: TreeParams = field(default_factory=TreeParams)
    window_s: float | None = 5.0
    window_n: int = 5
    train_fraction: float = 0.8
    split_seed: int = 7
    baseline_cutoff_dbm: float = -80.0
    datasets: list[DatasetSource] = field(default_factory=list)
    source: Path | None = None

    def digest(self) -> str:
        if self.source is None:
            return ""
        return hashlib.sha256(self.source.read_bytes()).hexdigest()


_SECTIONS = {
    "tree": {"max_depth", "min_leaf", "min_impurity_decrease"},
    "features": {"window_s", "window_n", "per_sample"},
    "split": {"train_fraction", "seed"},
    "baseline": {"cutoff_dbm"},
}


def config_from_dict(doc: dict, base: Path = Path(".")) -> ExperimentConfig:
    unknown = set(doc) - set(_SECTIONS) - {"cutoff_m", "dataset"}
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
    for name, allowed in _SECTIONS.items():
        extra = set(doc.get(name, {})) - allowed
        if extra:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(extra))}")
    tree = doc.get("tree", {})
    feats = doc.get("features", {})
    sp = doc.get("split", {})
    cfg = ExperimentConfig(
        cutoff_m=float(doc.get("cutoff_m", DEFAULT_CUTOFF_M)),
        tree=TreeParams(
            int(tree.get("max_depth", 8)), int(tree.get("min_leaf", 5)), float(tree.get("min_impurity_decrease", 0.0))
        ),
        window_s=None if feats.get("per_sample") else float(feats.get("window_s", 5.0)),
        window_n=1 if feats.get("per_sample") else int(feats.get("window_n", 5)),
        train_fraction=float(sp.get("train_fraction", 0.8)),
        split_seed=int(sp.get("seed", 7)),
        baseline_cutoff_dbm=float(doc.get("baseline", {}).get("cutoff_dbm", -80.0)),
    )
    for i, ds in enumerate(doc.get("dataset", [])):
        extra = set(ds) - {"name", "schema", "files", "role", "expected_rows"}
        if extra:
            raise ConfigError(f"unknown key(s) in dataset[{i}]: {', '.join(sorted(extra))}")
        role = ds.get("role", "all")
        if role not in ("all", "train", "test"):
            raise ConfigError(f"dataset[{i}]: role must be all, train or test")
        files = sorted({p for pattern in ds["files"] for p in base.glob(pattern)})
        cfg.datasets.append(
            DatasetSource(ds["name"], base / ds["schema"], files, role, ds.get("expected_rows"))
        )
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = config_from_dict(doc, path.parent)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    cfg.source = path
    return cfg


@dataclass
class LoadedData:
    """Samples per dataset role: ``all`` for data still to be split."""

    samples: dict[str, list[RssSample]]
    row_counts: dict[str, int]

    def by_positions(self, positions) -> dict[str, list[RssSample]]:
        return {role: [s for s in ss if s.position_pair in positions] for role, ss in self.samples.items()}


def load_datasets(cfg: ExperimentConfig) -> LoadedData:
    samples: dict[str, list[RssSample]] = {"all": [], "train": [], "test": []}
    counts: dict[str, int] = {}
    for ds in cfg.datasets:
        result = parse_files(ds.files, SchemaMap.load(ds.schema))
        samples[ds.role].extend(result.samples)
        counts[ds.name] = counts.get(ds.name, 0) + len(result.samples)
    return LoadedData(samples, counts)


@dataclass
class RowResult:
    approach: str
    combination: str
    reference: float
    report: EvalReport
    baseline: EvalReport
    n_train: int

    @property
    def accuracy_pct(self) -> float:
        return 100.0 * self.report.accuracy

    @property
    def passed(self) -> bool:
        return abs(self.accuracy_pct - self.reference) <= ACCURACY_TOLERANCE_PP

    def to_dict(self) -> dict:
        d = self.report.to_dict(self.combination)
        d.update(
            approach=self.approach,
            accuracy_pct=round(self.accuracy_pct, 6),
            reference_pct=self.reference,
            tolerance_pp=ACCURACY_TOLERANCE_PP,
            verdict="PASS" if self.passed else "FAIL",
            n_train=self.n_train,
            baseline_accuracy=self.baseline.accuracy,
            baseline_fn_rate=self.baseline.false_negative_rate,
        )
        return d


def combination_split(cfg: ExperimentConfig, data: LoadedData, positions) -> tuple[list[LabeledWindow], list[LabeledWindow]]:
    """Train/test windows for one combination, using shipped splits when present."""
    parts = data.by_positions(positions)

    def win(samples):
        return build_windows(samples, cfg.window_s, window_n=cfg.window_n, cutoff_m=cfg.cutoff_m)

    if parts["train"] or parts["test"]:
        train, test = win(parts["train"]), win(parts["test"])
    else:
        windows = win(parts["all"])
        if not windows:
            raise EmptyStratum(tuple(positions), 0)
        halves = split(windows, cfg.train_fraction, cfg.split_seed)
        train, test = halves.train, halves.test
    if not train or not test:
        raise EmptyStratum(tuple(positions), len(train) + len(test))
    return train, test


def run_table2(cfg: ExperimentConfig, data: LoadedData, params: TreeParams | None = None) -> list[RowResult]:
    params = params or cfg.tree
    rows = []
    for approach, combination, positions, reference in TABLE2_ROWS:
        train, test = combination_split(cfg, data, positions)
        tree = train_tree(train, params)
        rows.append(
            RowResult(
                approach, combination, reference, evaluate(tree, test),
                evaluate_baseline(test, cfg.baseline_cutoff_dbm), len(train),
            )
        )
    return rows


SWEEP_DEPTHS = (1, 2, 3, 4, 6, 8, 10, 12, 16)
SWEEP_MIN_LEAF = (1, 5, 20, 50)


def sweep(cfg: ExperimentConfig, data: LoadedData) -> dict[str, dict]:
    """Best test accuracy per combination over a small hyperparameter grid."""
    best: dict[str, dict] = {}
    splits = {c: combination_split(cfg, data, p) for _, c, p, _ in TABLE2_ROWS}
    for depth in SWEEP_DEPTHS:
        for min_leaf in SWEEP_MIN_LEAF:
            params = TreeParams(depth, min_leaf, 0.0)
            for combination, (train, test) in splits.items():
                acc = 100.0 * evaluate(train_tree(train, params), test).accuracy
                if combination not in best or acc > best[combination]["accuracy_pct"]:
                    best[combination] = {"accuracy_pct": round(acc, 6), "max_depth": depth, "min_leaf": min_leaf}
    return best


def table2_report(rows: list[RowResult], data: LoadedData, cfg: ExperimentConfig, sweep_result=None) -> dict:
    phone = [s for ss in data.samples.values() for s in ss if s.device_kind.value == "smartphone"]
    report = {
        "rows": [r.to_dict() for r in rows],
        "passed": sum(r.passed for r in rows),
        "row_counts": dict(sorted(data.row_counts.items())),
        "smartphone_threshold_false_negatives": baseline_false_negatives(
            phone, cfg.baseline_cutoff_dbm, cfg.cutoff_m
        ),
        "params": {
            "max_depth": cfg.tree.max_depth,
            "min_leaf": cfg.tree.min_leaf,
            "min_impurity_decrease": cfg.tree.min_impurity_decrease,
            "window_s": cfg.window_s,
            "window_n": cfg.window_n,
            "train_fraction": cfg.train_fraction,
            "split_seed": cfg.split_seed,
        },
    }
    if sweep_result is not None:
        report["sweep"] = sweep_result
    return report


def format_table2(rows: list[RowResult]) -> str:
    lines = [f"{'Approach':<11} {'Combination':<21} {'Accuracy':>9} {'Target':>7}  Verdict"]
    for r in rows:
        lines.append(
            f"{r.approach:<11} {r.combination:<21} {r.accuracy_pct:8.2f}% {r.reference:6.2f}%  "
            f"{'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines) + "\n"


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
