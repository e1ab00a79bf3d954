"""candump-style text logs: reading, writing and per-stream statistics."""

from __future__ import annotations

import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

logger = logging.getLogger(__name__)

US_PER_S = 1_000_000

_LINE_RE = re.compile(r"^\((\d+)\.(\d{6})\) (\S+) ([0-9A-Fa-f]{1,3})#([0-9A-Fa-f]*)$")


class LogFormatError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class CanMessage:
    """One received frame. Timestamps are integer microseconds."""

    timestamp_us: int
    aid: int
    data: bytes
    iface: str = "can0"

    @property
    def timestamp(self) -> float:
        return self.timestamp_us / US_PER_S

    @property
    def dlc(self) -> int:
        return len(self.data)

    @property
    def bits(self) -> np.ndarray:
        """Payload as a 0/1 vector; element k is bit k % 8 of byte k // 8."""
        return np.unpackbits(np.frombuffer(self.data, dtype=np.uint8), bitorder="little")

    def with_data(self, data: bytes) -> "CanMessage":
        return CanMessage(self.timestamp_us, self.aid, bytes(data), self.iface)

    def at(self, timestamp_us: int) -> "CanMessage":
        return CanMessage(timestamp_us, self.aid, self.data, self.iface)


def seconds_to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


def parse_line(line: str, lineno: int | None = None) -> CanMessage | None:
    """Parse one log line; returns None for blank and comment lines."""
    line = line.rstrip("\r\n")
    if not line.strip() or line.lstrip().startswith("#"):
        return None
    m = _LINE_RE.match(line)
    if m is None:
        raise LogFormatError(f"malformed log line: {line!r}", lineno)
    sec, usec, iface, aid_hex, payload = m.groups()
    if len(payload) % 2:
        raise LogFormatError(f"odd number of payload hex digits: {payload!r}", lineno)
    if len(payload) > 16:
        raise LogFormatError(f"payload longer than 8 bytes: {payload!r}", lineno)
    aid = int(aid_hex, 16)
    if aid > 0x7FF:
        raise LogFormatError(f"AID {aid_hex} exceeds 11 bits", lineno)
    return CanMessage(int(sec) * US_PER_S + int(usec), aid, bytes.fromhex(payload), iface)


def read_log(lines: Iterable[str], skip_errors: bool = False) -> Iterator[CanMessage]:
    """Lazily parse candump lines ``(<sec>.<usec>) <iface> <AID>#<hex>``.

    With ``skip_errors`` malformed lines are logged and dropped instead of
    raising :class:`LogFormatError`.
    """
    for lineno, line in enumerate(lines, start=1):
        try:
            msg = parse_line(line, lineno)
        except LogFormatError as exc:
            if not skip_errors:
                raise
            logger.warning("skipping %s", exc)
            continue
        if msg is not None:
            yield msg


def format_message(msg: CanMessage) -> str:
    sec, usec = divmod(msg.timestamp_us, US_PER_S)
    return f"({sec}.{usec:06d}) {msg.iface} {msg.aid:03X}#{msg.data.hex().upper()}\n"


def write_log(messages: Iterable[CanMessage]) -> Iterator[str]:
    """Format messages as log lines. Decreasing timestamps raise."""
    last = None
    for i, msg in enumerate(messages):
        if msg.timestamp_us < 0:
            raise LogFormatError(f"message {i}: negative timestamp")
        if last is not None and msg.timestamp_us < last:
            raise LogFormatError(
                f"message {i}: timestamp {msg.timestamp_us} us precedes {last} us; sort before writing")
        last = msg.timestamp_us
        yield format_message(msg)


def load_log(path, skip_errors: bool = False) -> list[CanMessage]:
    with open(path, encoding="ascii") as fh:
        return list(read_log(fh, skip_errors=skip_errors))


def save_log(path, messages: Iterable[CanMessage]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.writelines(write_log(messages))


# --------------------------------------------------------------------------- statistics


@dataclass(frozen=True)
class StreamStats:
    aid: int
    count: int
    mean_dt: float | None  # seconds; None for single-message streams
    std_dt: float
    dlc: int
    unique_payloads: int
    sender: str | None = None
    signal_count: int | None = None


def stream_stats(log: Iterable[CanMessage], db=None) -> list[StreamStats]:
    """Per-AID timing and payload statistics (population std of intervals)."""
    times: dict[int, list[int]] = defaultdict(list)
    payloads: dict[int, set[bytes]] = defaultdict(set)
    last_dlc: dict[int, int] = {}
    for msg in log:
        times[msg.aid].append(msg.timestamp_us)
        payloads[msg.aid].add(msg.data)
        last_dlc[msg.aid] = msg.dlc
    if not times:
        raise ValueError("empty log")

    out = []
    for aid in sorted(times):
        ts = np.asarray(times[aid], dtype=np.int64)
        if len(ts) > 1:
            dt = np.diff(ts) / US_PER_S
            mean_dt, std_dt = float(dt.mean()), float(dt.std())
        else:
            mean_dt, std_dt = None, 0.0
        sender = signal_count = None
        if db is not None and aid in db.messages:
            sender = db.messages[aid].sender
            signal_count = len(db.messages[aid].signals)
        out.append(StreamStats(aid, len(ts), mean_dt, std_dt, last_dlc[aid],
                               len(payloads[aid]), sender, signal_count))
    return out


@dataclass(frozen=True)
class HammingProfile:
    """Mean bitwise Hamming distance between consecutive payloads of a stream."""

    aid: int
    flip_rate: np.ndarray  # per payload bit, flips per transition
    n: int

    @property
    def flipped_bits(self) -> int:
        return int(np.count_nonzero(self.flip_rate))

    @property
    def total(self) -> float:
        return float(self.flip_rate.sum())


@dataclass(frozen=True)
class PayloadDynamics:
    profiles: dict[int, HammingProfile]

    @property
    def flipped_bits(self) -> int:
        return sum(p.flipped_bits for p in self.profiles.values())

    @property
    def total(self) -> float:
        """Sum of d over all bits of all streams."""
        return float(sum(p.total for p in self.profiles.values()))


def _profile(aid: int, payloads: list[bytes]) -> HammingProfile:
    lengths = {len(p) for p in payloads}
    if len(lengths) > 1:
        raise ValueError(f"AID {aid:03X}: mixed payload lengths {sorted(lengths)}")
    if len(payloads) < 2:
        raise ValueError(f"AID {aid:03X}: need at least 2 messages, got {len(payloads)}")
    arr = np.frombuffer(b"".join(payloads), dtype=np.uint8).reshape(len(payloads), -1)
    bits = np.unpackbits(arr, axis=1, bitorder="little")
    flips = np.count_nonzero(bits[1:] != bits[:-1], axis=0)
    return HammingProfile(aid, flips / (len(payloads) - 1), len(payloads))


def hamming_profile(log: Iterable[CanMessage], aid: int) -> HammingProfile:
    return _profile(aid, [m.data for m in log if m.aid == aid])


def payload_dynamics(log: Iterable[CanMessage]) -> PayloadDynamics:
    """Hamming profiles of every stream with at least two messages."""
    payloads: dict[int, list[bytes]] = defaultdict(list)
    for msg in log:
        payloads[msg.aid].append(msg.data)
    return PayloadDynamics({aid: _profile(aid, ps) for aid, ps in sorted(payloads.items()) if len(ps) > 1})
