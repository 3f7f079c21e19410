"""Ingestion of the smartphone and smartwatch BLE RSS corpora.

Rows are mapped onto :class:`RssSample` through a small ``key=value`` schema
file so that the column layout of the published CSV files never has to be
hard-coded.  The same module turns samples into labeled feature windows and
produces stratified train/test splits.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

SMARTPHONE_POSITIONS = ("HH", "HP", "HB", "PB", "PP", "BB")
SMARTWATCH_POSITIONS = ("LR", "RL", "LL", "RR")
POSITION_CODES = {p: i for i, p in enumerate(SMARTPHONE_POSITIONS + SMARTWATCH_POSITIONS)}

# 0.2 m steps up to 2 m, then 1 m steps up to 5 m
SMARTPHONE_DISTANCES = tuple(round(0.2 * k, 1) for k in range(1, 11)) + (3.0, 4.0, 5.0)
SMARTWATCH_RANGE = (0.5, 5.0)

POSITION_GROUPS = {"LR": "direct", "RL": "direct", "LL": "crosswise", "RR": "crosswise"}

DEFAULT_CUTOFF_M = 2.0
MAX_MALFORMED_FRACTION = 0.01

CANONICAL_HEADER = ("rss_dbm", "distance_m", "position_pair", "device_kind", "session_id", "t_offset_s")


class DatasetError(Exception):
    pass


class SchemaError(DatasetError, ValueError):
    pass


class MissingColumn(SchemaError):
    def __init__(self, column: str, header: Sequence[str]):
        super().__init__(f"column {column!r} not found in header {list(header)}")
        self.column = column


class ExcessiveMalformedRows(DatasetError):
    def __init__(self, malformed: list["MalformedRow"], n_rows: int):
        first = malformed[0]
        super().__init__(
            f"{len(malformed)} of {n_rows} rows malformed "
            f"(limit {MAX_MALFORMED_FRACTION:.0%}); first at line {first.line}: {first.reason}"
        )
        self.malformed = malformed
        self.n_rows = n_rows


class MixedStrata(DatasetError):
    pass


class EmptyStratum(DatasetError):
    def __init__(self, stratum, size: int):
        super().__init__(f"stratum {stratum} has {size} element(s); at least 2 are needed to split")
        self.stratum = stratum


class ProximityLabel(str, enum.Enum):
    CLOSE = "close"
    FAR = "far"


class DeviceKind(str, enum.Enum):
    SMARTPHONE = "smartphone"
    SMARTWATCH = "smartwatch"


def device_kind_for(position: str) -> DeviceKind:
    if position in SMARTPHONE_POSITIONS:
        return DeviceKind.SMARTPHONE
    if position in SMARTWATCH_POSITIONS:
        return DeviceKind.SMARTWATCH
    raise ValueError(f"unknown position pair {position!r}")


def position_group(position: str) -> str:
    """Map a smartwatch hand combination onto ``direct`` or ``crosswise``."""
    return POSITION_GROUPS[position]


@dataclass(frozen=True)
class RssSample:
    rss_dbm: float
    distance_m: float
    position_pair: str
    device_kind: DeviceKind
    session_id: str = ""
    t_offset_s: float | None = None

    def __post_init__(self):
        if not self.distance_m > 0:
            raise ValueError(f"distance must be positive, got {self.distance_m}")
        if device_kind_for(self.position_pair) is not self.device_kind:
            raise ValueError(f"position {self.position_pair} does not belong to {self.device_kind.value}")
        if self.device_kind is DeviceKind.SMARTPHONE:
            if not any(math.isclose(self.distance_m, d, abs_tol=1e-6) for d in SMARTPHONE_DISTANCES):
                raise ValueError(f"{self.distance_m} m is not one of the smartphone measurement points")
        else:
            lo, hi = SMARTWATCH_RANGE
            if not lo - 1e-9 <= self.distance_m <= hi + 1e-9:
                raise ValueError(f"smartwatch distance {self.distance_m} m outside [{lo}, {hi}]")


@dataclass(frozen=True)
class FeatureVector:
    rss_mean_dbm: float
    rss_std_dbm: float
    rss_min_dbm: float
    rss_max_dbm: float
    sample_count: int
    position_code: int

    NAMES = ("rss_mean_dbm", "rss_std_dbm", "rss_min_dbm", "rss_max_dbm", "sample_count", "position_code")

    def as_tuple(self) -> tuple[float, ...]:
        return (
            self.rss_mean_dbm,
            self.rss_std_dbm,
            self.rss_min_dbm,
            self.rss_max_dbm,
            float(self.sample_count),
            float(self.position_code),
        )

    @classmethod
    def from_values(cls, rss: Sequence[float], position_code: int) -> "FeatureVector":
        arr = np.asarray(rss, dtype=float)
        if arr.size == 0:
            raise ValueError("cannot summarise an empty window")
        mean = float(arr.mean())
        lo, hi = float(arr.min()), float(arr.max())
        # guard against mean drifting outside [min, max] by rounding
        mean = min(max(mean, lo), hi)
        return cls(mean, float(arr.std()), lo, hi, int(arr.size), position_code)


@dataclass(frozen=True)
class LabeledWindow:
    """A feature vector plus the ground truth it was cut from."""

    features: FeatureVector
    label: ProximityLabel
    distance_m: float
    position_pair: str
    session_id: str = ""

    @property
    def stratum(self) -> tuple[float, str]:
        return (self.distance_m, self.position_pair)


@dataclass
class SplitDataset:
    train: list[LabeledWindow]
    test: list[LabeledWindow]
    split_seed: int
    train_fraction: float


# --------------------------------------------------------------------------
# schema mapping
# --------------------------------------------------------------------------


@dataclass
class SchemaMap:
    """Column mapping for one family of source files.

    Recognised keys: ``col.rss``, ``col.distance``, ``col.position``,
    ``col.time``, ``col.session``, ``delimiter``; ``fixed.<field>`` for values
    constant across a file; ``path.<field>`` regexes with one group matched
    against the file path; ``alias.<raw>=<code>`` to rename position labels;
    ``distance.scale`` to convert units (e.g. 0.01 for centimetres).
    """

    columns: dict[str, str] = field(default_factory=dict)
    fixed: dict[str, str] = field(default_factory=dict)
    path_patterns: dict[str, str] = field(default_factory=dict)
    aliases: dict[str, str] = field(default_factory=dict)
    delimiter: str | None = None
    distance_scale: float = 1.0

    FIELDS = ("rss", "distance", "position", "time", "session", "device_kind")

    @classmethod
    def parse(cls, text: str) -> "SchemaMap":
        schema = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SchemaError(f"schema line {lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            prefix, _, name = key.partition(".")
            if prefix == "col" and name in cls.FIELDS:
                schema.columns[name] = value
            elif prefix == "fixed" and name in cls.FIELDS:
                schema.fixed[name] = value
            elif prefix == "path" and name in cls.FIELDS:
                try:
                    re.compile(value)
                except re.error as exc:
                    raise SchemaError(f"schema line {lineno}: bad pattern: {exc}") from exc
                schema.path_patterns[name] = value
            elif prefix == "alias" and name:
                schema.aliases[name] = value
            elif key == "delimiter":
                schema.delimiter = {"tab": "\t", "\\t": "\t", "comma": ","}.get(value, value)
            elif key == "distance.scale":
                try:
                    schema.distance_scale = float(value)
                except ValueError as exc:
                    raise SchemaError(f"schema line {lineno}: {exc}") from exc
            else:
                raise SchemaError(f"schema line {lineno}: unknown key {key!r}")
        for required in ("rss", "distance", "position"):
            if required not in schema.columns and required not in schema.fixed and required not in schema.path_patterns:
                raise SchemaError(f"schema does not say where to find {required!r}")
        return schema

    @classmethod
    def load(cls, path: str | Path) -> "SchemaMap":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


CANONICAL_SCHEMA = SchemaMap(
    columns={
        "rss": "rss_dbm",
        "distance": "distance_m",
        "position": "position_pair",
        "device_kind": "device_kind",
        "session": "session_id",
        "time": "t_offset_s",
    },
    delimiter=",",
)


@dataclass(frozen=True)
class MalformedRow:
    line: int
    reason: str


@dataclass
class ParseResult:
    samples: list[RssSample]
    malformed: list[MalformedRow]
    n_rows: int

    def stratum_counts(self) -> dict[tuple[str, float], int]:
        counts: dict[tuple[str, float], int] = defaultdict(int)
        for s in self.samples:
            counts[(s.position_pair, s.distance_m)] += 1
        return dict(sorted(counts.items()))


def _sniff_delimiter(header_line: str) -> str:
    return "\t" if "\t" in header_line else ","


def _path_values(schema: SchemaMap, path: str | None) -> dict[str, str]:
    values = {}
    for name, pattern in schema.path_patterns.items():
        m = re.search(pattern, path or "")
        if m is None:
            raise SchemaError(f"path pattern for {name!r} does not match {path!r}")
        values[name] = m.group(1)
    return values


def _snap_distance(d: float) -> float:
    # source files write 0.2 m steps as e.g. 0.6000000001 or "60" cm after scaling
    return round(d, 6)


def parse_dataset(
    source: IO[bytes] | IO[str] | bytes | str,
    schema: SchemaMap,
    *,
    path: str | None = None,
    strict: bool = True,
) -> ParseResult:
    """Parse one delimited-text table into samples.

    ``source`` may be a binary or text stream, or the raw content.  Rows whose
    RSS/distance cannot be parsed, or which violate the sample invariants, are
    recorded as :class:`MalformedRow` and skipped.  With ``strict`` the call
    raises :class:`ExcessiveMalformedRows` when more than 1% of rows are bad.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8-sig")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8-sig") if isinstance(data, bytes) else data
    stream = io.StringIO(text)
    header_line = stream.readline()
    if not header_line.strip():
        return ParseResult([], [], 0)
    delimiter = schema.delimiter or _sniff_delimiter(header_line)
    header = [h.strip() for h in next(csv.reader([header_line], delimiter=delimiter))]

    index = {}
    for name, column in schema.columns.items():
        if column not in header:
            raise MissingColumn(column, header)
        index[name] = header.index(column)

    constants = dict(schema.fixed)
    constants.update(_path_values(schema, path))
    default_session = constants.get("session", Path(path).stem if path else "")

    samples: list[RssSample] = []
    malformed: list[MalformedRow] = []
    n_rows = 0
    for lineno, row in enumerate(csv.reader(stream, delimiter=delimiter), 2):
        if not row or all(not cell.strip() for cell in row):
            continue
        n_rows += 1

        def get(name):
            if name in index:
                i = index[name]
                if i >= len(row):
                    raise ValueError(f"row has {len(row)} fields, {name!r} is field {i + 1}")
                return row[i].strip()
            return constants.get(name)

        try:
            rss = float(get("rss"))
            distance = _snap_distance(float(get("distance")) * schema.distance_scale)
            if not (math.isfinite(rss) and math.isfinite(distance)):
                raise ValueError("non-finite value")
            position = get("position")
            position = schema.aliases.get(position, position)
            kind_raw = get("device_kind")
            kind = DeviceKind(kind_raw) if kind_raw else device_kind_for(position)
            t_raw = get("time")
            t_offset = float(t_raw) if t_raw not in (None, "") else None
            session = get("session") if "session" in index else default_session
            samples.append(RssSample(rss, distance, position, kind, session, t_offset))
        except (TypeError, ValueError) as exc:
            malformed.append(MalformedRow(lineno, str(exc)))

    if strict and n_rows and len(malformed) > MAX_MALFORMED_FRACTION * n_rows:
        raise ExcessiveMalformedRows(malformed, n_rows)
    return ParseResult(samples, malformed, n_rows)


def parse_files(paths: Iterable[str | Path], schema: SchemaMap, *, strict: bool = True) -> ParseResult:
    """Parse several files sharing a schema; the malformed budget applies to the total."""
    samples, malformed, n_rows = [], [], 0
    for p in paths:
        with open(p, "rb") as fh:
            res = parse_dataset(fh, schema, path=str(p), strict=False)
        samples.extend(res.samples)
        malformed.extend(MalformedRow(r.line, f"{p}: {r.reason}") for r in res.malformed)
        n_rows += res.n_rows
    if strict and n_rows and len(malformed) > MAX_MALFORMED_FRACTION * n_rows:
        raise ExcessiveMalformedRows(malformed, n_rows)
    return ParseResult(samples, malformed, n_rows)


def _fmt(x: float | None) -> str:
    if x is None:
        return ""
    return repr(float(x))


def dump_samples(samples: Iterable[RssSample], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CANONICAL_HEADER)
    for s in samples:
        writer.writerow(
            [_fmt(s.rss_dbm), _fmt(s.distance_m), s.position_pair, s.device_kind.value, s.session_id, _fmt(s.t_offset_s)]
        )


def dumps_samples(samples: Iterable[RssSample]) -> str:
    buf = io.StringIO()
    dump_samples(samples, buf)
    return buf.getvalue()


# --------------------------------------------------------------------------
# labels, windows, splits
# --------------------------------------------------------------------------


def label_distance(distance_m: float, cutoff_m: float = DEFAULT_CUTOFF_M) -> ProximityLabel:
    if not cutoff_m > 0:
        raise ValueError("cutoff must be positive")
    # boundary counts as close: a missed contact is worse than a false alarm
    return ProximityLabel.CLOSE if distance_m <= cutoff_m else ProximityLabel.FAR


def label_sample(sample: RssSample, cutoff_m: float = DEFAULT_CUTOFF_M) -> ProximityLabel:
    return label_distance(sample.distance_m, cutoff_m)


def group_sessions(samples: Iterable[RssSample]) -> dict[tuple[str, float, str], list[RssSample]]:
    """Group samples by (session, distance, position), keeping file order."""
    groups: dict[tuple[str, float, str], list[RssSample]] = {}
    for s in samples:
        groups.setdefault((s.session_id, s.distance_m, s.position_pair), []).append(s)
    return groups


def window_features(
    samples: Sequence[RssSample],
    window_s: float | None = 5.0,
    *,
    window_n: int = 5,
    cutoff_m: float = DEFAULT_CUTOFF_M,
) -> list[LabeledWindow]:
    """Summarise one (session, distance, position) run into labeled windows.

    Windows are non-overlapping ``[k*window_s, (k+1)*window_s)`` slices of the
    session clock.  When ``window_s`` is None, or any sample lacks a time
    offset, consecutive chunks of ``window_n`` samples are used instead
    (``window_n=1`` gives per-sample features).
    """
    if not samples:
        return []
    first = samples[0]
    key = (first.session_id, first.distance_m, first.position_pair)
    if any((s.session_id, s.distance_m, s.position_pair) != key for s in samples):
        raise MixedStrata("window_features needs samples from a single session, distance and position")
    label = label_distance(first.distance_m, cutoff_m)
    code = POSITION_CODES[first.position_pair]

    if window_s is not None and all(s.t_offset_s is not None for s in samples):
        if not window_s > 0:
            raise ValueError("window_s must be positive")
        buckets: dict[int, list[float]] = {}
        for s in samples:
            buckets.setdefault(math.floor(s.t_offset_s / window_s), []).append(s.rss_dbm)
        chunks = [buckets[k] for k in sorted(buckets)]
    else:
        if window_n < 1:
            raise ValueError("window_n must be at least 1")
        values = [s.rss_dbm for s in samples]
        chunks = [values[i : i + window_n] for i in range(0, len(values), window_n)]

    return [
        LabeledWindow(FeatureVector.from_values(chunk, code), label, first.distance_m, first.position_pair, first.session_id)
        for chunk in chunks
    ]


def build_windows(
    samples: Iterable[RssSample],
    window_s: float | None = 5.0,
    *,
    window_n: int = 5,
    cutoff_m: float = DEFAULT_CUTOFF_M,
) -> list[LabeledWindow]:
    out: list[LabeledWindow] = []
    for group in group_sessions(samples).values():
        out.extend(window_features(group, window_s, window_n=window_n, cutoff_m=cutoff_m))
    return out


def split(data: Sequence[LabeledWindow], train_fraction: float = 0.8, seed: int = 7) -> SplitDataset:
    """Stratified, seeded train/test split over (distance, position) strata."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    strata: dict[tuple[float, str], list[int]] = defaultdict(list)
    for i, item in enumerate(data):
        strata[item.stratum].append(i)

    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for key in sorted(strata):
        members = strata[key]
        if len(members) < 2:
            raise EmptyStratum(key, len(members))
        order = rng.permutation(len(members))
        n_train = min(max(int(round(train_fraction * len(members))), 1), len(members) - 1)
        train_idx.extend(members[j] for j in order[:n_train])
        test_idx.extend(members[j] for j in order[n_train:])
    train_idx.sort()
    test_idx.sort()
    return SplitDataset([data[i] for i in train_idx], [data[i] for i in test_idx], seed, train_fraction)
