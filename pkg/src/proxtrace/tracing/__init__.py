"""Centralized and decentralized exposure-notification flows."""

from .deployment import Deployment, Device, Notification, ProtocolParams
from .ids import EphemeralId, SlotOutOfRange, daily_seed, rotate_id
from .matching import ExposureAlert, UnknownDevice, client_match, risk_score, server_match_centralized
from .payload import (
    ConsentDeclined,
    DiagnosisPayload,
    Mode,
    build_diagnosis_payload,
    decode_payload,
    encode_payload,
    seal_log,
    unseal_log,
)
from .server import BroadcastServer, CentralServer, broadcast
from .store import ClockRegression, EncounterRecord, LocalStore, purge_expired, record_encounter
