"""A set of devices plus one server, driven by explicit sightings and diagnoses."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from ..dataset import ProximityLabel
from .ids import DEFAULT_ROTATION_S, daily_seed, day_of, derive_token, slot_of
from .matching import DEFAULT_RISK_THRESHOLD_S, ExposureAlert, client_match
from .payload import ConsentDeclined, Mode, build_diagnosis_payload, encode_payload, seal_log
from .server import BroadcastServer, CentralServer
from .store import DEFAULT_MERGE_GAP_S, DEFAULT_SCAN_INTERVAL_S, LocalStore


def device_secret(namespace: str, device_id: str) -> bytes:
    return hashlib.sha256(f"{namespace}/{device_id}".encode()).digest()


@dataclass
class Device:
    device_id: str
    secret: bytes
    store: LocalStore
    _tokens: dict[tuple[int, int], bytes] = field(default_factory=dict, repr=False)

    def token_at(self, t: float) -> bytes:
        day, slot = day_of(t), slot_of(t, self.store.rotation_period_s)
        token = self._tokens.get((day, slot))
        if token is None:
            seed = daily_seed(self.secret, day)
            self.store.add_own_seed(day, seed)
            token = derive_token(seed, slot)
            self._tokens = {k: v for k, v in self._tokens.items() if k[0] >= day - 1}
            self._tokens[(day, slot)] = token
        return token


@dataclass(frozen=True)
class Notification:
    diagnosed: str
    device: str
    alert: ExposureAlert


@dataclass
class ProtocolParams:
    retention_days: int = 14
    risk_threshold_s: float = DEFAULT_RISK_THRESHOLD_S
    rotation_period_s: int = DEFAULT_ROTATION_S
    merge_gap_s: float = DEFAULT_MERGE_GAP_S
    scan_interval_s: float = DEFAULT_SCAN_INTERVAL_S


class Deployment:
    """Runs one data flow end to end.

    Callers feed sightings in time order through :meth:`observe`, call
    :meth:`advance` as the clock moves (daily purge), and :meth:`diagnose`
    when a user tests positive.  ``diagnose`` returns the alerts computed for
    every matched device, triggered or not; only triggered ones count as
    delivered notifications.
    """

    def __init__(self, mode: Mode | str, device_ids, params: ProtocolParams | None = None, namespace: str = "proxtrace"):
        self.mode = Mode(mode)
        self.params = params or ProtocolParams()
        p = self.params
        self.devices: dict[str, Device] = {}
        if self.mode is Mode.CENTRALIZED:
            self.server = CentralServer(p.retention_days, p.risk_threshold_s, p.rotation_period_s)
        else:
            self.server = BroadcastServer(p.retention_days)
        self.day: int | None = None
        self.declined: list[tuple[str, float]] = []
        for device_id in sorted(device_ids):
            self.add_device(device_id, device_secret(namespace, device_id), now=0.0)

    def add_device(self, device_id: str, secret: bytes, now: float = 0.0) -> list[Notification]:
        p = self.params
        store = LocalStore(p.retention_days, p.merge_gap_s, p.scan_interval_s, p.rotation_period_s)
        self.devices[device_id] = Device(device_id, secret, store)
        if isinstance(self.server, CentralServer):
            self.server.register(device_id, secret)
            return []
        replayed = self.server.register(device_id, now)
        return [
            Notification("", device_id, alert)
            for payload in replayed
            for alert in client_match(store, payload, p.risk_threshold_s, p.rotation_period_s)
        ]

    def token_of(self, device_id: str, t: float) -> bytes:
        return self.devices[device_id].token_at(t)

    def advance(self, t: float) -> int:
        """Purge every store once per new day; returns records purged."""
        day = day_of(t)
        if day == self.day:
            return 0
        self.day = day
        return sum(d.store.purge(t) for d in self.devices.values())

    def observe(self, receiver: str, sender: str, t: float, rss_dbm: float, verdict: ProximityLabel) -> None:
        self.advance(t)
        token = self.token_of(sender, t)
        self.devices[receiver].store.record(token, rss_dbm, t, verdict)

    def diagnose(self, device_id: str, t: float, consent: bool = True) -> list[Notification]:
        self.advance(t)
        store = self.devices[device_id].store
        try:
            payload = build_diagnosis_payload(store, self.mode, consent, now=t)
        except ConsentDeclined:
            self.declined.append((device_id, t))
            return []
        frame = encode_payload(payload)
        out = []
        if isinstance(self.server, CentralServer):
            for other in sorted(self.devices):
                if other != device_id:
                    self.server.upload(other, seal_log(self.devices[other].store.records))
            matched = self.server.report_diagnosis(device_id, frame, t)
            for device, alerts in matched.items():
                out.extend(Notification(device_id, device, a) for a in alerts)
        else:
            deliveries = self.server.broadcast(frame, t)
            for device, delivered in deliveries.items():
                if device == device_id:
                    continue
                alerts = client_match(
                    self.devices[device].store, delivered, self.params.risk_threshold_s, self.params.rotation_period_s
                )
                out.extend(Notification(device_id, device, a) for a in alerts)
        return out
