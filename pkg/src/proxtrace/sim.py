"""Discrete-time contact simulation over scripted agent trajectories."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .channel import PathLossModel, fit_path_loss, rss_at_many
from .dataset import POSITION_CODES, FeatureVector, ProximityLabel, SchemaMap, parse_files
from .tracing.deployment import Deployment, ProtocolParams
from .tracing.ids import SECONDS_PER_DAY, day_of
from .tracing.matching import window_days
from .tracing.payload import Mode
from .tree import Leaf, Split, loads_tree, predict, threshold_baseline

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

DEFAULT_CHANNEL = PathLossModel(p0_dbm=-65.0, n_exp=2.0, sigma_dbm=4.0)
MIN_SEPARATION_M = 0.05  # co-located agents would otherwise sit at log10(0)


class ConfigInvalid(ValueError):
    pass


@dataclass(frozen=True)
class Agent:
    id: str
    waypoints: tuple[tuple[float, float, float], ...]  # (t, x, y)

    def __post_init__(self):
        if not self.waypoints:
            raise ValueError(f"agent {self.id} has no waypoints")
        times = [w[0] for w in self.waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"agent {self.id}: waypoint times must be strictly increasing")

    def positions(self, t: np.ndarray) -> np.ndarray:
        """Linear interpolation between waypoints, held constant outside them."""
        w = np.asarray(self.waypoints, dtype=float)
        return np.column_stack([np.interp(t, w[:, 0], w[:, 1]), np.interp(t, w[:, 0], w[:, 2])])


@dataclass(frozen=True)
class DiagnosisEvent:
    agent: str
    time_s: float
    consent: bool = True


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str = "threshold"  # "threshold" or "tree"
    threshold_dbm: float | None = None
    tree_path: str | None = None
    position: str = "HH"


@dataclass
class ScenarioConfig:
    duration_s: float
    scan_interval_s: float = 1.0
    cutoff_m: float = 2.0
    retention_days: int = 14
    risk_threshold_s: float = 900.0
    channel: PathLossModel = DEFAULT_CHANNEL
    rng_seed: int = 0
    mode: Mode = Mode.DECENTRALIZED
    agents: list[Agent] = field(default_factory=list)
    diagnoses: list[DiagnosisEvent] = field(default_factory=list)
    rotation_period_s: int = 900
    merge_gap_s: float = 300.0
    radio_range_m: float = 25.0
    device_offset_sigma_db: float = 0.0
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)

    def validate(self) -> None:
        for name in ("duration_s", "scan_interval_s", "cutoff_m", "risk_threshold_s", "radio_range_m", "merge_gap_s"):
            if not getattr(self, name) > 0:
                raise ConfigInvalid(f"{name} must be positive")
        if not 14 <= self.retention_days <= 21:
            raise ConfigInvalid("retention_days must be within 14..21")
        if SECONDS_PER_DAY % self.rotation_period_s:
            raise ConfigInvalid("rotation_period_s must divide a day")
        if self.device_offset_sigma_db < 0:
            raise ConfigInvalid("device_offset_sigma_db must be non-negative")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ConfigInvalid("agent ids must be unique")
        for dx in self.diagnoses:
            if dx.agent not in ids:
                raise ConfigInvalid(f"diagnosis names unknown agent {dx.agent!r}")
            if not 0 <= dx.time_s <= self.duration_s:
                raise ConfigInvalid(f"diagnosis time {dx.time_s} outside the scenario")
        if self.classifier.kind not in ("threshold", "tree"):
            raise ConfigInvalid(f"unknown classifier kind {self.classifier.kind!r}")
        if self.classifier.kind == "tree" and not self.classifier.tree_path:
            raise ConfigInvalid("tree classifier needs classifier.tree")
        if self.classifier.position not in POSITION_CODES:
            raise ConfigInvalid(f"unknown position {self.classifier.position!r}")

    def protocol_params(self) -> ProtocolParams:
        return ProtocolParams(
            self.retention_days, self.risk_threshold_s, self.rotation_period_s, self.merge_gap_s, self.scan_interval_s
        )


# --------------------------------------------------------------------------
# scenario files
# --------------------------------------------------------------------------

_SCENARIO_KEYS = {
    "duration_s", "scan_interval_s", "cutoff_m", "retention_days", "risk_threshold_s", "rng_seed", "mode",
    "rotation_period_s", "merge_gap_s", "radio_range_m", "device_offset_sigma_db",
}
_CHANNEL_KEYS = {"p0_dbm", "n_exp", "sigma_dbm", "fit_files", "fit_schema", "fit_position"}
_CLASSIFIER_KEYS = {"kind", "threshold_dbm", "tree", "position"}
_TOP_KEYS = {"scenario", "channel", "classifier", "agents", "diagnoses"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigInvalid(f"{where} must be a table")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _channel_from(section: dict, base: Path) -> PathLossModel:
    if "fit_files" in section:
        if "fit_schema" not in section:
            raise ConfigInvalid("channel.fit_files needs channel.fit_schema")
        schema = SchemaMap.load(base / section["fit_schema"])
        paths = sorted(p for pattern in section["fit_files"] for p in base.glob(pattern))
        samples = parse_files(paths, schema).samples
        position = section.get("fit_position")
        if position:
            samples = [s for s in samples if s.position_pair == position]
        return fit_path_loss(samples)
    return PathLossModel(
        float(section.get("p0_dbm", DEFAULT_CHANNEL.p0_dbm)),
        float(section.get("n_exp", DEFAULT_CHANNEL.n_exp)),
        float(section.get("sigma_dbm", DEFAULT_CHANNEL.sigma_dbm)),
    )


def scenario_from_dict(doc: dict, base: Path = Path(".")) -> ScenarioConfig:
    """Build a scenario from a parsed document; any unknown key is an error."""
    try:
        _check_keys(doc, _TOP_KEYS, "document")
        sc = doc.get("scenario", {})
        _check_keys(sc, _SCENARIO_KEYS, "[scenario]")
        if "duration_s" not in sc:
            raise ConfigInvalid("[scenario] needs duration_s")
        ch = doc.get("channel", {})
        _check_keys(ch, _CHANNEL_KEYS, "[channel]")
        cl = doc.get("classifier", {})
        _check_keys(cl, _CLASSIFIER_KEYS, "[classifier]")
        agents = []
        for i, a in enumerate(doc.get("agents", [])):
            _check_keys(a, {"id", "waypoints"}, f"agents[{i}]")
            agents.append(Agent(str(a["id"]), tuple(tuple(float(v) for v in w) for w in a["waypoints"])))
        diagnoses = []
        for i, d in enumerate(doc.get("diagnoses", [])):
            _check_keys(d, {"agent", "time_s", "consent"}, f"diagnoses[{i}]")
            diagnoses.append(DiagnosisEvent(str(d["agent"]), float(d["time_s"]), bool(d.get("consent", True))))
        tree_path = cl.get("tree")
        cfg = ScenarioConfig(
            duration_s=float(sc["duration_s"]),
            scan_interval_s=float(sc.get("scan_interval_s", 1.0)),
            cutoff_m=float(sc.get("cutoff_m", 2.0)),
            retention_days=int(sc.get("retention_days", 14)),
            risk_threshold_s=float(sc.get("risk_threshold_s", 900.0)),
            channel=_channel_from(ch, base),
            rng_seed=int(sc.get("rng_seed", 0)),
            mode=Mode(sc.get("mode", "decentralized")),
            agents=agents,
            diagnoses=diagnoses,
            rotation_period_s=int(sc.get("rotation_period_s", 900)),
            merge_gap_s=float(sc.get("merge_gap_s", 300.0)),
            radio_range_m=float(sc.get("radio_range_m", 25.0)),
            device_offset_sigma_db=float(sc.get("device_offset_sigma_db", 0.0)),
            classifier=ClassifierSpec(
                kind=str(cl.get("kind", "threshold")),
                threshold_dbm=None if cl.get("threshold_dbm") is None else float(cl["threshold_dbm"]),
                tree_path=str(base / tree_path) if tree_path else None,
                position=str(cl.get("position", "HH")),
            ),
        )
    except ConfigInvalid:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"invalid scenario: {exc}") from exc
    cfg.validate()
    return cfg


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigInvalid(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_dict(doc, path.parent)


# --------------------------------------------------------------------------
# classifiers
# --------------------------------------------------------------------------

Verdict = Callable[[float], ProximityLabel]


@dataclass(frozen=True)
class ThresholdClassifier:
    cutoff_dbm: float

    def __call__(self, rss_dbm: float) -> ProximityLabel:
        return threshold_baseline(rss_dbm, self.cutoff_dbm)

    @classmethod
    def for_channel(cls, channel: PathLossModel, cutoff_m: float) -> "ThresholdClassifier":
        """Threshold at the mean RSS of the cutoff distance: exact when there is no shadowing."""
        return cls(channel.mean_rss(cutoff_m))


def verdict_fn(classifier, cfg: ScenarioConfig) -> Verdict:
    """Adapt a tree, threshold classifier or plain callable to ``rss -> label``."""
    if classifier is None:
        spec = cfg.classifier
        if spec.kind == "tree":
            classifier = loads_tree(Path(spec.tree_path).read_text(encoding="utf-8"))
        elif spec.threshold_dbm is not None:
            classifier = ThresholdClassifier(spec.threshold_dbm)
        else:
            classifier = ThresholdClassifier.for_channel(cfg.channel, cfg.cutoff_m)
    if isinstance(classifier, (Leaf, Split)):
        tree, code = classifier, POSITION_CODES[cfg.classifier.position]
        # one sighting per scan, so the tree sees single-sample windows
        return lambda rss: predict(tree, FeatureVector(rss, 0.0, rss, rss, 1, code))
    if callable(classifier):
        return classifier
    raise TypeError(f"cannot use {classifier!r} as a classifier")


# --------------------------------------------------------------------------
# ground truth and metrics
# --------------------------------------------------------------------------

PairDay = tuple[str, str, int]


def _sample_times(duration_s: float, scan_interval_s: float) -> np.ndarray:
    n = int(math.floor(duration_s / scan_interval_s + 1e-9)) + 1
    return np.arange(n) * scan_interval_s


def _close_seconds(agents, cutoff_m, duration_s, scan_interval_s, until_s=None) -> dict[PairDay, float]:
    times = _sample_times(duration_s, scan_interval_s)
    if until_s is not None:
        times = times[times <= until_s]
    ids = [a.id for a in agents]
    pos = [a.positions(times) for a in agents]
    days = (times // SECONDS_PER_DAY).astype(int)
    out: dict[PairDay, float] = {}
    for i in range(len(agents)):
        for j in range(i + 1, len(agents)):
            close = np.hypot(*(pos[i] - pos[j]).T) <= cutoff_m
            for day in np.unique(days[close]):
                a, b = sorted((ids[i], ids[j]))
                out[(a, b, int(day))] = float(np.count_nonzero(close & (days == day))) * scan_interval_s
    return out


def ground_truth_contacts(
    agents, cutoff_m: float, min_duration_s: float, *, duration_s: float, scan_interval_s: float, until_s=None
) -> set[PairDay]:
    """Unordered pair-days whose sampled time within ``cutoff_m`` reaches ``min_duration_s``."""
    seconds = _close_seconds(agents, cutoff_m, duration_s, scan_interval_s, until_s)
    return {k for k, v in seconds.items() if v >= min_duration_s}


@dataclass(frozen=True)
class PairRow:
    agent_a: str  # diagnosed
    agent_b: str  # potentially exposed
    day: int
    true_contact: bool
    alerted: bool
    cumulative_close_s: float


@dataclass
class SimMetrics:
    mode: str
    true_contact_pairs: set[PairDay]
    alerted_pairs: set[PairDay]
    rows: list[PairRow]

    @property
    def sensitivity(self) -> float:
        if not self.true_contact_pairs:
            return 1.0
        return len(self.alerted_pairs & self.true_contact_pairs) / len(self.true_contact_pairs)

    @property
    def specificity(self) -> float:
        negatives = {(r.agent_a, r.agent_b, r.day) for r in self.rows} - self.true_contact_pairs
        if not negatives:
            return 1.0
        return len(negatives - self.alerted_pairs) / len(negatives)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "n_true_contacts": len(self.true_contact_pairs),
            "n_alerted": len(self.alerted_pairs),
            "true_contact_pairs": [list(p) for p in sorted(self.true_contact_pairs)],
            "alerted_pairs": [list(p) for p in sorted(self.alerted_pairs)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["agent_a", "agent_b", "day", "true_contact", "alerted", "cumulative_close_s"])
        for r in self.rows:
            w.writerow([r.agent_a, r.agent_b, r.day, int(r.true_contact), int(r.alerted), repr(r.cumulative_close_s)])
        return buf.getvalue()

    def write(self, out_dir: str | Path, prefix: str = "") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / f"{prefix}metrics.json", out_dir / f"{prefix}pairs.csv"]
        paths[0].write_text(self.to_json(), encoding="utf-8")
        paths[1].write_text(self.rows_csv(), encoding="utf-8")
        return paths


# --------------------------------------------------------------------------
# the run loop
# --------------------------------------------------------------------------


def run_scenario(cfg: ScenarioConfig, classifier=None, mode: Mode | str | None = None) -> SimMetrics:
    """Step the world at ``scan_interval_s`` and score alerts against ground truth.

    At every step each receiver within radio range of a sender draws one RSS
    from the channel, classifies it and logs the sender's current token.
    Diagnoses are processed before the first step strictly after their time.
    Randomness comes only from ``cfg.rng_seed``; protocol mode does not touch
    the generator, so both modes see the same radio history.
    """
    cfg.validate()
    mode = Mode(mode or cfg.mode)
    classify = verdict_fn(classifier, cfg)
    rng = np.random.default_rng(cfg.rng_seed)
    agents = sorted(cfg.agents, key=lambda a: a.id)
    ids = [a.id for a in agents]
    dep = Deployment(mode, ids, cfg.protocol_params(), namespace=f"seed-{cfg.rng_seed}")

    offsets = np.zeros(len(agents))
    if cfg.device_offset_sigma_db > 0:
        offsets = rng.normal(0.0, cfg.device_offset_sigma_db, size=len(agents))

    times = _sample_times(cfg.duration_s, cfg.scan_interval_s)
    pos = np.stack([a.positions(times) for a in agents], axis=1) if agents else np.zeros((len(times), 0, 2))
    pending = sorted(cfg.diagnoses, key=lambda d: (d.time_s, d.agent))
    notifications = []

    def flush(upto: float | None):
        while pending and (upto is None or pending[0].time_s < upto):
            dx = pending.pop(0)
            notifications.extend(dep.diagnose(dx.agent, dx.time_s, dx.consent))

    rx_idx, tx_idx = np.nonzero(~np.eye(len(agents), dtype=bool))
    for k, t in enumerate(times):
        flush(t)
        if not len(rx_idx):
            continue
        d = np.hypot(*(pos[k, rx_idx] - pos[k, tx_idx]).T)
        in_range = d <= cfg.radio_range_m
        if not in_range.any():
            continue
        rx, tx = rx_idx[in_range], tx_idx[in_range]
        rss = rss_at_many(cfg.channel, np.maximum(d[in_range], MIN_SEPARATION_M), rng) + offsets[rx]
        t = float(t)
        for r, s, value in zip(rx.tolist(), tx.tolist(), rss.tolist()):
            dep.observe(ids[r], ids[s], t, value, classify(value))
    flush(None)

    return _score(cfg, agents, mode, notifications)


def _score(cfg: ScenarioConfig, agents, mode: Mode, notifications) -> SimMetrics:
    measured: dict[PairDay, float] = {}
    alerted: set[PairDay] = set()
    for n in notifications:
        key = (n.diagnosed, n.device, n.alert.day)
        measured[key] = n.alert.cumulative_close_s
        if n.alert.triggered:
            alerted.add(key)

    truth: set[PairDay] = set()
    universe: set[PairDay] = set()
    ids = [a.id for a in agents]
    for dx in cfg.diagnoses:
        days = [d for d in window_days(dx.time_s, cfg.retention_days) if 0 <= d <= day_of(dx.time_s)]
        universe.update((dx.agent, other, d) for other in ids if other != dx.agent for d in days)
        contacts = ground_truth_contacts(
            agents, cfg.cutoff_m, cfg.risk_threshold_s,
            duration_s=cfg.duration_s, scan_interval_s=cfg.scan_interval_s, until_s=dx.time_s,
        )
        for a, b, d in contacts:
            if dx.agent in (a, b) and d in days:
                truth.add((dx.agent, b if a == dx.agent else a, d))

    rows = [
        PairRow(a, b, d, (a, b, d) in truth, (a, b, d) in alerted, measured.get((a, b, d), 0.0))
        for a, b, d in sorted(universe)
    ]
    return SimMetrics(mode.value, truth, alerted, rows)
