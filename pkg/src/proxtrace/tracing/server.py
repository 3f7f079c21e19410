"""In-process servers for the two data flows.

:class:`CentralServer` holds every device's sealed encounter log and does the
matching itself.  :class:`BroadcastServer` only relays diagnosed seeds; its
state has no place to put an encounter record.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ids import DEFAULT_ROTATION_S, SECONDS_PER_DAY
from .matching import DEFAULT_RISK_THRESHOLD_S, ExposureAlert, UnknownDevice, server_match_centralized
from .payload import DEFAULT_SEAL_KEY, DiagnosisPayload, Mode, PayloadError, decode_payload, encode_payload


@dataclass
class CentralServer:
    retention_days: int = 14
    threshold_s: float = DEFAULT_RISK_THRESHOLD_S
    rotation_period_s: int = DEFAULT_ROTATION_S
    seal_key: bytes = DEFAULT_SEAL_KEY
    registry: dict[str, bytes] = field(default_factory=dict)
    uploads: dict[str, list[bytes]] = field(default_factory=dict)
    outbox: dict[str, list[tuple[str, ExposureAlert]]] = field(default_factory=dict)

    def register(self, device_id: str, secret: bytes) -> None:
        """Record the ID-generation secret issued to ``device_id``."""
        self.registry[device_id] = secret
        self.uploads.setdefault(device_id, [])

    def upload(self, device_id: str, sealed_log: bytes) -> None:
        if device_id not in self.registry:
            raise UnknownDevice(device_id)
        self.uploads[device_id].append(sealed_log)

    def server_db(self) -> dict[str, bytes]:
        """Latest upload per device; each upload is a full snapshot of the device log."""
        return {d: logs[-1] for d, logs in self.uploads.items() if logs}

    def report_diagnosis(self, device_id: str, frame: bytes, now: float) -> dict[str, list[ExposureAlert]]:
        """Match a diagnosed device against all logs; notify only triggered devices."""
        payload = decode_payload(frame)
        if payload.mode is not Mode.CENTRALIZED:
            raise PayloadError("central server accepts centralized payloads only")
        if device_id not in self.registry:
            raise UnknownDevice(device_id)
        self.uploads[device_id].append(payload.sealed_log)
        matched = server_match_centralized(
            self.server_db(),
            self.registry,
            device_id,
            payload,
            now,
            retention_days=self.retention_days,
            threshold_s=self.threshold_s,
            rotation_period=self.rotation_period_s,
            key=self.seal_key,
        )
        for device, alerts in matched.items():
            for alert in alerts:
                if alert.triggered:
                    self.outbox.setdefault(device, []).append((device_id, alert))
        return matched


@dataclass(frozen=True)
class RetainedPayload:
    received_at: float
    frame: bytes


@dataclass
class BroadcastServer:
    retention_days: int = 14
    registry: set[str] = field(default_factory=set)
    payloads: list[RetainedPayload] = field(default_factory=list)

    def _expire(self, now: float) -> None:
        cutoff = now - self.retention_days * SECONDS_PER_DAY
        self.payloads = [p for p in self.payloads if p.received_at >= cutoff]

    def register(self, device_id: str, now: float = 0.0) -> list[DiagnosisPayload]:
        """Add a device and replay every payload still inside the retention window."""
        self._expire(now)
        self.registry.add(device_id)
        return [decode_payload(p.frame) for p in self.payloads]

    def broadcast(self, frame: bytes, now: float) -> dict[str, DiagnosisPayload]:
        payload = decode_payload(frame)
        if payload.mode is not Mode.DECENTRALIZED:
            raise PayloadError("only seed lists may be broadcast")
        self._expire(now)
        # keep the canonical re-encoding, not whatever bytes arrived
        self.payloads.append(RetainedPayload(now, encode_payload(payload)))
        return {device: payload for device in sorted(self.registry)}


def broadcast(server: BroadcastServer, payload: DiagnosisPayload, now: float = 0.0) -> dict[str, DiagnosisPayload]:
    return server.broadcast(encode_payload(payload), now)
