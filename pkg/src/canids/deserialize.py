"""Payload <-> physical signal conversion.

Physical value = raw * scale + offset (standard DBC semantics).
"""

from __future__ import annotations

import functools

import numpy as np

from .dbc import CanDatabase, MessageSpec, SignalSpec


class SignalRangeError(ValueError):
    def __init__(self, aid: int | None, signal: str, value: float, lo: float, hi: float):
        self.aid, self.signal, self.value = aid, signal, value
        where = f"{aid:03X}/{signal}" if aid is not None else signal
        super().__init__(f"{where}: value {value!r} outside [{lo}, {hi}]")


class UnknownAidError(KeyError):
    pass


def range_tolerance(spec: SignalSpec) -> float:
    # DBC bounds are written in decimal; raw * scale is not always bit-exact.
    return abs(spec.scale) * 1e-6


def extract_bits(payload: bytes, spec: SignalSpec) -> int:
    """Raw unsigned bit field of ``spec`` inside ``payload``."""
    nbits = len(payload) * 8
    if spec.little_endian:
        if spec.start_bit + spec.bit_length > nbits:
            raise ValueError(f"{spec.name}: bits {spec.start_bit}..{spec.start_bit + spec.bit_length - 1} "
                             f"outside a {len(payload)}-byte payload")
        return (int.from_bytes(payload, "little") >> spec.start_bit) & ((1 << spec.bit_length) - 1)
    # In the big-endian integer of the payload a Motorola field is contiguous.
    byte, bit = divmod(spec.start_bit, 8)
    msb = (len(payload) - 1 - byte) * 8 + bit
    lsb = msb - spec.bit_length + 1
    if byte >= len(payload) or lsb < 0:
        raise ValueError(f"{spec.name}: big-endian field starting at bit {spec.start_bit} "
                         f"outside a {len(payload)}-byte payload")
    return (int.from_bytes(payload, "big") >> lsb) & ((1 << spec.bit_length) - 1)


def insert_bits(payload: bytearray, spec: SignalSpec, raw: int) -> None:
    """Write ``raw`` (already masked) into ``payload`` in place."""
    mask = (1 << spec.bit_length) - 1
    raw &= mask
    if spec.little_endian:
        word = int.from_bytes(payload, "little")
        word = (word & ~(mask << spec.start_bit)) | (raw << spec.start_bit)
        payload[:] = word.to_bytes(len(payload), "little")
    else:
        byte, bit = divmod(spec.start_bit, 8)
        lsb = (len(payload) - 1 - byte) * 8 + bit - spec.bit_length + 1
        word = int.from_bytes(payload, "big")
        word = (word & ~(mask << lsb)) | (raw << lsb)
        payload[:] = word.to_bytes(len(payload), "big")


def to_signed(raw: int, bits: int) -> int:
    if raw >> (bits - 1):
        return raw - (1 << bits)
    return raw


def decode_and_scale(raw: int, spec: SignalSpec, strict: bool = True, aid: int | None = None) -> float:
    """Two's complement decode (when signed), scale, offset and range check."""
    if not 0 <= raw < (1 << spec.bit_length):
        raise ValueError(f"{spec.name}: raw {raw} does not fit in {spec.bit_length} bits")
    value = to_signed(raw, spec.bit_length) if spec.is_signed else raw
    phys = value * spec.scale + spec.offset
    if strict:
        tol = range_tolerance(spec)
        if not spec.minimum - tol <= phys <= spec.maximum + tol:
            raise SignalRangeError(aid, spec.name, phys, spec.minimum, spec.maximum)
    return phys


def decode_signal(payload: bytes, spec: SignalSpec) -> float:
    """Physical value without range checking."""
    return decode_and_scale(extract_bits(payload, spec), spec, strict=False)


def _message(aid: int, db: CanDatabase) -> MessageSpec:
    try:
        return db.messages[aid]
    except KeyError:
        raise UnknownAidError(f"AID {aid:03X} is not in the database") from None


def deserialize_message(aid: int, payload: bytes, db: CanDatabase, strict: bool = True) -> np.ndarray:
    """All signals of a message, in declaration order."""
    spec = _message(aid, db)
    return np.array([decode_and_scale(extract_bits(payload, s), s, strict, aid) for s in spec.signals],
                    dtype=np.float64)


@functools.lru_cache(maxsize=1024)
def check_overlaps(spec: MessageSpec) -> None:
    owner: dict[int, str] = {}
    for sig in spec.signals:
        for pos in sig.bit_positions():
            if pos in owner:
                raise ValueError(f"{spec.name}: signals {owner[pos]} and {sig.name} overlap at bit {pos}")
            owner[pos] = sig.name


def encode_value(value: float, spec: SignalSpec, aid: int | None = None) -> int:
    """Physical value -> raw bit field (rounded to the nearest count)."""
    tol = range_tolerance(spec)
    if not spec.minimum - tol <= value <= spec.maximum + tol:
        raise SignalRangeError(aid, spec.name, value, spec.minimum, spec.maximum)
    count = int(round((value - spec.offset) / spec.scale))
    if not spec.raw_min <= count <= spec.raw_max:
        raise SignalRangeError(aid, spec.name, value, spec.minimum, spec.maximum)
    return count & ((1 << spec.bit_length) - 1)


def serialize_message(values, spec: MessageSpec, base: bytes | None = None) -> bytes:
    """Encode one value per signal into a ``spec.dlc``-byte payload.

    Bits not covered by a signal are zero unless ``base`` supplies them.
    """
    values = list(values)
    if len(values) != len(spec.signals):
        raise ValueError(f"{spec.name}: expected {len(spec.signals)} values, got {len(values)}")
    check_overlaps(spec)
    payload = bytearray(base if base is not None else bytes(spec.dlc))
    if len(payload) != spec.dlc:
        raise ValueError(f"{spec.name}: base payload has {len(payload)} bytes, DLC is {spec.dlc}")
    for value, sig in zip(values, spec.signals):
        insert_bits(payload, sig, encode_value(float(value), sig, spec.aid))
    return bytes(payload)
