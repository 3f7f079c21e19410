"""On-device encounter storage with retention purging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..dataset import FeatureVector, ProximityLabel
from .ids import DEFAULT_ROTATION_S, SECONDS_PER_DAY, day_of, day_tokens

DEFAULT_RETENTION_DAYS = 14
DEFAULT_MERGE_GAP_S = 300.0
DEFAULT_SCAN_INTERVAL_S = 1.0


class ClockRegression(ValueError):
    pass


@dataclass
class EncounterRecord:
    token: bytes
    first_seen: float
    last_seen: float
    close_duration_s: float = 0.0
    n: int = 0
    rss_sum: float = 0.0
    rss_sumsq: float = 0.0
    rss_min: float = math.inf
    rss_max: float = -math.inf

    def add_rss(self, rss: float) -> None:
        self.n += 1
        self.rss_sum += rss
        self.rss_sumsq += rss * rss
        self.rss_min = min(self.rss_min, rss)
        self.rss_max = max(self.rss_max, rss)

    @property
    def day(self) -> int:
        return day_of(self.first_seen)

    @property
    def rss_stats(self) -> FeatureVector:
        mean = self.rss_sum / self.n
        var = max(self.rss_sumsq / self.n - mean * mean, 0.0)
        mean = min(max(mean, self.rss_min), self.rss_max)
        return FeatureVector(mean, math.sqrt(var), self.rss_min, self.rss_max, self.n, -1)


@dataclass
class LocalStore:
    retention_days: int = DEFAULT_RETENTION_DAYS
    merge_gap_s: float = DEFAULT_MERGE_GAP_S
    scan_interval_s: float = DEFAULT_SCAN_INTERVAL_S
    rotation_period_s: int = DEFAULT_ROTATION_S
    records: list[EncounterRecord] = field(default_factory=list)
    own_seeds: dict[int, bytes] = field(default_factory=dict)
    last_t: float = -math.inf
    _latest: dict[bytes, EncounterRecord] = field(default_factory=dict, repr=False)
    _own_tokens: set[bytes] = field(default_factory=set, repr=False)

    def __post_init__(self):
        if not 14 <= self.retention_days <= 21:
            raise ValueError(f"retention must be 14..21 days, got {self.retention_days}")

    def add_own_seed(self, day: int, seed: bytes) -> None:
        if day not in self.own_seeds:
            self.own_seeds[day] = seed
            self._own_tokens.update(day_tokens(seed, self.rotation_period_s))

    def is_own(self, token: bytes) -> bool:
        return token in self._own_tokens

    def record(self, token: bytes, rss_dbm: float, t: float, verdict: ProximityLabel) -> EncounterRecord | None:
        """Log one sighting; returns the record it landed in (None for our own token)."""
        if t < self.last_t:
            raise ClockRegression(f"sighting at {t} precedes previous sighting at {self.last_t}")
        self.last_t = t
        if token in self._own_tokens:
            return None
        rec = self._latest.get(token)
        if rec is not None and t - rec.last_seen <= self.merge_gap_s:
            if verdict is ProximityLabel.CLOSE:
                rec.close_duration_s += min(self.scan_interval_s, t - rec.last_seen)
            rec.last_seen = t
        else:
            rec = EncounterRecord(token, t, t)
            self.records.append(rec)
            self._latest[token] = rec
        rec.add_rss(rss_dbm)
        return rec

    def purge(self, now: float) -> int:
        """Drop records and seeds outside the retention window; returns records removed."""
        cutoff = now - self.retention_days * SECONDS_PER_DAY
        kept = [r for r in self.records if r.last_seen >= cutoff]
        purged = len(self.records) - len(kept)
        if purged:
            self.records = kept
            self._latest = {}
            for r in kept:
                self._latest[r.token] = r
        first_day = day_of(now) - self.retention_days + 1
        for day in [d for d in self.own_seeds if d < first_day]:
            seed = self.own_seeds.pop(day)
            self._own_tokens.difference_update(day_tokens(seed, self.rotation_period_s))
        return purged

    def window_seeds(self, now: float) -> list[tuple[int, bytes]]:
        first_day = day_of(now) - self.retention_days + 1
        return sorted((d, s) for d, s in self.own_seeds.items() if first_day <= d <= day_of(now))


def record_encounter(
    store: LocalStore, token: bytes, rss_dbm: float, t: float, classifier_verdict: ProximityLabel
) -> LocalStore:
    store.record(token, rss_dbm, t, classifier_verdict)
    return store


def purge_expired(store: LocalStore, now: float) -> tuple[LocalStore, int]:
    return store, store.purge(now)
