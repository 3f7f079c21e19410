"""Daily seeds and rotating ephemeral identifiers."""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

SECONDS_PER_DAY = 86400
DEFAULT_ROTATION_S = 900
TOKEN_BYTES = 16
SEED_BYTES = 32


class SlotOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class EphemeralId:
    token: bytes
    valid_from: float
    valid_to: float


def slots_per_day(rotation_period: int = DEFAULT_ROTATION_S) -> int:
    if rotation_period <= 0 or SECONDS_PER_DAY % rotation_period:
        raise ValueError(f"rotation period {rotation_period}s must divide a day")
    return SECONDS_PER_DAY // rotation_period


def daily_seed(secret: bytes, day: int) -> bytes:
    """Per-day seed; days are independent so uploading one reveals no other."""
    return hmac.new(secret, b"seed" + day.to_bytes(4, "big", signed=True), hashlib.sha256).digest()


def derive_token(seed: bytes, slot: int) -> bytes:
    return hmac.new(seed, b"ephid" + slot.to_bytes(4, "big"), hashlib.sha256).digest()[:TOKEN_BYTES]


def rotate_id(seed: bytes, slot: int, rotation_period: int = DEFAULT_ROTATION_S, day: int = 0) -> EphemeralId:
    n_slots = slots_per_day(rotation_period)
    if not 0 <= slot < n_slots:
        raise SlotOutOfRange(f"slot {slot} outside [0, {n_slots})")
    start = day * SECONDS_PER_DAY + slot * rotation_period
    return EphemeralId(derive_token(seed, slot), start, start + rotation_period)


def day_tokens(seed: bytes, rotation_period: int = DEFAULT_ROTATION_S) -> list[bytes]:
    return [derive_token(seed, slot) for slot in range(slots_per_day(rotation_period))]


def day_of(t: float) -> int:
    return int(t // SECONDS_PER_DAY)


def slot_of(t: float, rotation_period: int = DEFAULT_ROTATION_S) -> int:
    return int((t % SECONDS_PER_DAY) // rotation_period)
