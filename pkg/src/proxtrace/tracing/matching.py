"""Exposure matching: on the server (centralized) or on the device (decentralized)."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .ids import DEFAULT_ROTATION_S, daily_seed, day_of, day_tokens
from .payload import DEFAULT_SEAL_KEY, DiagnosisPayload, Mode, PayloadError, unseal_log
from .store import EncounterRecord, LocalStore

DEFAULT_RISK_THRESHOLD_S = 900.0


class UnknownDevice(KeyError):
    pass


@dataclass(frozen=True)
class ExposureAlert:
    day: int
    cumulative_close_s: float
    triggered: bool


def risk_score(matched: Iterable[EncounterRecord], day: int, threshold_s: float = DEFAULT_RISK_THRESHOLD_S) -> ExposureAlert:
    total = float(sum(r.close_duration_s for r in matched))
    return ExposureAlert(day, total, total >= threshold_s)


def token_days(seeds: Iterable[tuple[int, bytes]], rotation_period: int = DEFAULT_ROTATION_S) -> dict[bytes, int]:
    """Expand daily seeds into every token they generate, keyed to the seed's day."""
    out = {}
    for day, seed in seeds:
        for token in day_tokens(seed, rotation_period):
            out[token] = day
    return out


def match_records(
    records: Iterable[EncounterRecord], tokens: Mapping[bytes, int], threshold_s: float
) -> list[ExposureAlert]:
    by_day: dict[int, list[EncounterRecord]] = defaultdict(list)
    for r in records:
        day = tokens.get(r.token)
        if day is not None:
            by_day[day].append(r)
    return [risk_score(by_day[d], d, threshold_s) for d in sorted(by_day)]


def client_match(
    store: LocalStore,
    payload: DiagnosisPayload,
    threshold_s: float = DEFAULT_RISK_THRESHOLD_S,
    rotation_period: int = DEFAULT_ROTATION_S,
) -> list[ExposureAlert]:
    """Match a broadcast seed list against this device's own encounter records."""
    if payload.mode is not Mode.DECENTRALIZED:
        raise PayloadError("client matching needs a decentralized payload")
    return match_records(store.records, token_days(payload.seeds, rotation_period), threshold_s)


def window_days(now: float, retention_days: int) -> range:
    today = day_of(now)
    return range(today - retention_days + 1, today + 1)


def server_match_centralized(
    server_db: Mapping[str, bytes],
    registry: Mapping[str, bytes],
    diagnosed: str,
    diagnosis: DiagnosisPayload,
    now: float,
    *,
    retention_days: int = 14,
    threshold_s: float = DEFAULT_RISK_THRESHOLD_S,
    rotation_period: int = DEFAULT_ROTATION_S,
    key: bytes = DEFAULT_SEAL_KEY,
) -> dict[str, list[ExposureAlert]]:
    """Find every uploaded log holding a token of the diagnosed device.

    ``server_db`` maps device id to its latest sealed upload and ``registry``
    maps device id to the secret the server issued it, which lets the server
    regenerate the diagnosed device's tokens for the retention window.
    Returns alerts (triggered or not) for matched devices only.
    """
    if diagnosis.mode is not Mode.CENTRALIZED:
        raise PayloadError("server matching needs a centralized payload")
    if diagnosed not in registry:
        raise UnknownDevice(diagnosed)
    unseal_log(diagnosis.sealed_log, key)  # reject tampered uploads before acting on them
    secret = registry[diagnosed]
    tokens = token_days(((d, daily_seed(secret, d)) for d in window_days(now, retention_days)), rotation_period)
    result = {}
    for device in sorted(server_db):
        if device == diagnosed:
            continue
        alerts = match_records(unseal_log(server_db[device], key), tokens, threshold_s)
        if alerts:
            result[device] = alerts
    return result


def brute_force_matches(
    logs: Mapping[str, Sequence[EncounterRecord]], diagnosed_tokens: Sequence[tuple[int, bytes]]
) -> dict[tuple[str, int], float]:
    """Reference matcher: compare every record against every diagnosed token, no indexing."""
    out: dict[tuple[str, int], float] = {}
    for device, records in logs.items():
        for r in records:
            for day, token in diagnosed_tokens:
                if r.token == token:
                    out[(device, day)] = out.get((device, day), 0.0) + r.close_duration_s
    return out

