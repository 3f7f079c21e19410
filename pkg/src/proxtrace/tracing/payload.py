"""Diagnosis payloads and their binary framing.

Frame layout (all integers big-endian)::

    u32  body length (bytes after this field)
    u8   mode            1 = centralized, 2 = decentralized
    u32  count           seeds or encounter records that follow
    ...  decentralized:  count x (i32 day_index, 32-byte seed)
         centralized:    count x 76-byte record, then a 32-byte HMAC-SHA256 tag

Centralized record (76 bytes)::

    16s token | f64 first_seen | f64 last_seen | f64 close_duration_s
    u32 n | f64 rss_sum | f64 rss_sumsq | f64 rss_min | f64 rss_max

The tag only authenticates the log.  Nothing is encrypted.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Sequence

from .ids import SEED_BYTES, TOKEN_BYTES
from .store import EncounterRecord, LocalStore

_HEAD = struct.Struct(">BI")
_SEED = struct.Struct(f">i{SEED_BYTES}s")
_RECORD = struct.Struct(f">{TOKEN_BYTES}sdddIdddd")
_LEN = struct.Struct(">I")
TAG_BYTES = 32

DEFAULT_SEAL_KEY = b"proxtrace-demo-seal-key"


class Mode(str, enum.Enum):
    CENTRALIZED = "centralized"
    DECENTRALIZED = "decentralized"


_MODE_BYTE = {Mode.CENTRALIZED: 1, Mode.DECENTRALIZED: 2}
_BYTE_MODE = {v: k for k, v in _MODE_BYTE.items()}


class PayloadError(ValueError):
    pass


class SealError(PayloadError):
    pass


class ConsentDeclined(Exception):
    pass


@dataclass(frozen=True)
class DiagnosisPayload:
    mode: Mode
    seeds: tuple[tuple[int, bytes], ...] = ()
    sealed_log: bytes = b""

    def __post_init__(self):
        if self.mode is Mode.DECENTRALIZED and self.sealed_log:
            raise PayloadError("decentralized payloads carry seeds only")
        if self.mode is Mode.CENTRALIZED and self.seeds:
            raise PayloadError("centralized payloads carry a sealed log only")


def _pack_record(r: EncounterRecord) -> bytes:
    return _RECORD.pack(
        r.token, r.first_seen, r.last_seen, r.close_duration_s, r.n, r.rss_sum, r.rss_sumsq, r.rss_min, r.rss_max
    )


def seal_log(records: Sequence[EncounterRecord], key: bytes = DEFAULT_SEAL_KEY) -> bytes:
    body = struct.pack(">I", len(records)) + b"".join(_pack_record(r) for r in records)
    return body + hmac.new(key, body, hashlib.sha256).digest()


def unseal_log(blob: bytes, key: bytes = DEFAULT_SEAL_KEY) -> list[EncounterRecord]:
    if len(blob) < 4 + TAG_BYTES:
        raise SealError("sealed log too short")
    body, tag = blob[:-TAG_BYTES], blob[-TAG_BYTES:]
    if not hmac.compare_digest(tag, hmac.new(key, body, hashlib.sha256).digest()):
        raise SealError("integrity tag mismatch")
    (count,) = struct.unpack_from(">I", body)
    if len(body) != 4 + count * _RECORD.size:
        raise SealError(f"sealed log declares {count} records but holds {len(body) - 4} bytes")
    records = []
    for i in range(count):
        token, first, last, close, n, s, sq, lo, hi = _RECORD.unpack_from(body, 4 + i * _RECORD.size)
        records.append(EncounterRecord(token, first, last, close, n, s, sq, lo, hi))
    return records


def encode_payload(payload: DiagnosisPayload) -> bytes:
    if payload.mode is Mode.DECENTRALIZED:
        body = _HEAD.pack(_MODE_BYTE[payload.mode], len(payload.seeds))
        body += b"".join(_SEED.pack(day, seed) for day, seed in payload.seeds)
    else:
        (count,) = struct.unpack_from(">I", payload.sealed_log)
        body = _HEAD.pack(_MODE_BYTE[payload.mode], count) + payload.sealed_log[4:]
    return _LEN.pack(len(body)) + body


def decode_payload(frame: bytes) -> DiagnosisPayload:
    if len(frame) < _LEN.size + _HEAD.size:
        raise PayloadError("frame too short")
    (length,) = _LEN.unpack_from(frame)
    if length != len(frame) - _LEN.size:
        raise PayloadError(f"frame length {length} does not match {len(frame) - _LEN.size} bytes")
    mode_byte, count = _HEAD.unpack_from(frame, _LEN.size)
    if mode_byte not in _BYTE_MODE:
        raise PayloadError(f"unknown mode byte {mode_byte}")
    mode = _BYTE_MODE[mode_byte]
    rest = frame[_LEN.size + _HEAD.size :]
    if mode is Mode.DECENTRALIZED:
        if len(rest) != count * _SEED.size:
            raise PayloadError("seed section length mismatch")
        seeds = tuple(_SEED.unpack_from(rest, i * _SEED.size) for i in range(count))
        return DiagnosisPayload(mode, seeds=seeds)
    if len(rest) != count * _RECORD.size + TAG_BYTES:
        raise PayloadError("sealed section length mismatch")
    return DiagnosisPayload(mode, sealed_log=struct.pack(">I", count) + rest)


def build_diagnosis_payload(
    store: LocalStore, mode: Mode, consent: bool, now: float | None = None, key: bytes = DEFAULT_SEAL_KEY
) -> DiagnosisPayload:
    """Package what a diagnosed user uploads.  Without consent nothing leaves the device."""
    if not consent:
        raise ConsentDeclined("user declined to upload diagnosis data")
    mode = Mode(mode)
    if mode is Mode.DECENTRALIZED:
        # without a clock, trust the last purge to have trimmed the seed window
        seeds = sorted(store.own_seeds.items()) if now is None else store.window_seeds(now)
        return DiagnosisPayload(mode, seeds=tuple(seeds))
    return DiagnosisPayload(mode, sealed_log=seal_log(store.records, key))
