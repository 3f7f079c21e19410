"""Scripted encounter histories for checking that both data flows agree."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dataset import ProximityLabel
from .deployment import Deployment, ProtocolParams
from .ids import SECONDS_PER_DAY, daily_seed, rotate_id, slots_per_day
from .matching import brute_force_matches, window_days
from .payload import Mode

AlertKey = tuple[str, str, int]  # (diagnosed, exposed, day)


@dataclass(frozen=True)
class Episode:
    observer: str
    observed: str
    start_s: float
    interval_s: float
    close: tuple[bool, ...]

    def sightings(self):
        for k, is_close in enumerate(self.close):
            yield self.start_s + k * self.interval_s, is_close


@dataclass(frozen=True)
class Diagnosis:
    device: str
    t: float
    consent: bool = True


@dataclass(frozen=True)
class World:
    devices: tuple[str, ...]
    episodes: tuple[Episode, ...]
    diagnoses: tuple[Diagnosis, ...]
    params: ProtocolParams = field(default_factory=ProtocolParams)


@dataclass
class WorldOutcome:
    mode: Mode
    alerts: dict[AlertKey, float]
    triggered: set[AlertKey]
    deployment: Deployment
    oracle: dict[AlertKey, float] | None = None


def _events(world: World):
    events = []
    for i, ep in enumerate(world.episodes):
        for t, is_close in ep.sightings():
            events.append((t, 0, i, ("see", t, ep, is_close)))
    for i, dx in enumerate(world.diagnoses):
        events.append((dx.t, 1, i, ("dx", dx)))
    events.sort(key=lambda e: e[:3])
    return [e[3] for e in events]


def oracle_alerts(deployment: Deployment, diagnosed: str, now: float) -> dict[AlertKey, float]:
    """Exhaustively regenerate the diagnosed device's tokens and scan every other store."""
    p = deployment.params
    secret = deployment.devices[diagnosed].secret
    tokens = [
        (day, rotate_id(daily_seed(secret, day), slot, p.rotation_period_s, day).token)
        for day in window_days(now, p.retention_days)
        for slot in range(slots_per_day(p.rotation_period_s))
    ]
    logs = {d: dev.store.records for d, dev in deployment.devices.items() if d != diagnosed}
    return {(diagnosed, dev, day): total for (dev, day), total in brute_force_matches(logs, tokens).items()}


def run_world(world: World, mode: Mode | str, with_oracle: bool = False) -> WorldOutcome:
    dep = Deployment(mode, world.devices, world.params)
    alerts: dict[AlertKey, float] = {}
    triggered: set[AlertKey] = set()
    oracle: dict[AlertKey, float] | None = {} if with_oracle else None
    for event in _events(world):
        if event[0] == "see":
            _, t, ep, is_close = event
            verdict = ProximityLabel.CLOSE if is_close else ProximityLabel.FAR
            dep.observe(ep.observer, ep.observed, t, -60.0 if is_close else -85.0, verdict)
        else:
            dx = event[1]
            dep.advance(dx.t)
            if oracle is not None and dx.consent:
                oracle.update(oracle_alerts(dep, dx.device, dx.t))
            for n in dep.diagnose(dx.device, dx.t, dx.consent):
                key = (n.diagnosed, n.device, n.alert.day)
                alerts[key] = n.alert.cumulative_close_s
                if n.alert.triggered:
                    triggered.add(key)
    return WorldOutcome(Mode(mode), alerts, triggered, dep, oracle)


def random_world(rng: np.random.Generator, max_devices: int = 6, max_days: int = 3) -> World:
    n_dev = int(rng.integers(2, max_devices + 1))
    n_days = int(rng.integers(1, max_days + 1))
    horizon = n_days * SECONDS_PER_DAY
    devices = tuple(f"d{i}" for i in range(n_dev))
    episodes = []
    for _ in range(int(rng.integers(1, 21))):
        a, b = rng.choice(n_dev, size=2, replace=False)
        interval = float(rng.choice([1, 5, 10, 30, 60, 400]))
        n_scans = int(rng.integers(1, 200))
        p_close = float(rng.random()) ** 0.3
        close = tuple(bool(x) for x in rng.random(n_scans) < p_close)
        start = float(rng.integers(0, horizon - 1))
        episodes.append(Episode(devices[a], devices[b], start, interval, close))
    diagnoses = tuple(
        Diagnosis(devices[int(rng.integers(n_dev))], float(rng.integers(0, horizon + 4 * 3600)), bool(rng.random() < 0.85))
        for _ in range(int(rng.integers(1, 3)))
    )
    params = ProtocolParams(
        retention_days=int(rng.integers(14, 22)),
        risk_threshold_s=float(rng.choice([30, 120, 300, 900])),
        scan_interval_s=float(rng.choice([1, 5, 10])),
    )
    return World(devices, tuple(episodes), diagnoses, params)
