"""CAN database (DBC) parsing and signal selection.

Only the subset needed to deserialize periodic chassis traffic is supported:
``VERSION``, ``BU_``, ``BO_``, non-multiplexed ``SG_`` and comments. Everything
else is skipped.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

LITTLE_ENDIAN = "little_endian"
BIG_ENDIAN = "big_endian"

MAX_DLC = 8
MAX_STANDARD_AID = 0x7FF
EXTENDED_FLAG = 0x80000000

# Checksums, counters and similar easily predictable fields.
DEFAULT_KEYWORDS = ("sum", "alive", "msgcount", "msgcnt", "paritybit", "mul_code")


class DbcError(ValueError):
    """Syntax or consistency error in a DBC document."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class UnsupportedFeatureError(DbcError):
    pass


@dataclass(frozen=True)
class SignalSpec:
    name: str
    start_bit: int
    bit_length: int
    byte_order: str = LITTLE_ENDIAN
    is_signed: bool = False
    scale: float = 1.0
    offset: float = 0.0
    minimum: float = 0.0
    maximum: float = 0.0
    unit: str = ""
    receivers: tuple[str, ...] = ()

    def __post_init__(self):
        if not 1 <= self.bit_length <= 64:
            raise DbcError(f"signal {self.name}: bit length {self.bit_length} not in 1..64")
        if not 0 <= self.start_bit < 512:
            raise DbcError(f"signal {self.name}: start bit {self.start_bit} not in 0..511")
        if self.byte_order not in (LITTLE_ENDIAN, BIG_ENDIAN):
            raise DbcError(f"signal {self.name}: unknown byte order {self.byte_order!r}")
        if self.scale == 0:
            raise DbcError(f"signal {self.name}: scale must be nonzero")
        if self.minimum > self.maximum:
            raise DbcError(f"signal {self.name}: min {self.minimum} > max {self.maximum}")

    @property
    def little_endian(self) -> bool:
        return self.byte_order == LITTLE_ENDIAN

    def bit_positions(self) -> list[int]:
        """Payload bit positions of the signal, most significant first.

        Payload bit ``k`` is bit ``k % 8`` (LSB = 0) of byte ``k // 8``.
        Big-endian signals start at their MSB and walk the sawtooth order.
        """
        if self.little_endian:
            return list(range(self.start_bit + self.bit_length - 1, self.start_bit - 1, -1))
        out = []
        pos = self.start_bit
        for _ in range(self.bit_length):
            out.append(pos)
            pos = pos + 15 if pos % 8 == 0 else pos - 1
        return out

    def fits(self, dlc: int) -> bool:
        positions = self.bit_positions()
        return min(positions) >= 0 and max(positions) < dlc * 8

    @property
    def raw_min(self) -> int:
        return -(1 << (self.bit_length - 1)) if self.is_signed else 0

    @property
    def raw_max(self) -> int:
        return (1 << (self.bit_length - 1)) - 1 if self.is_signed else (1 << self.bit_length) - 1


@dataclass(frozen=True)
class MessageSpec:
    aid: int
    name: str
    dlc: int
    sender: str = ""
    signals: tuple[SignalSpec, ...] = ()

    def __post_init__(self):
        if not 0 <= self.aid <= MAX_STANDARD_AID:
            raise DbcError(f"message {self.name}: AID {self.aid} outside 0..2047")
        if not 0 <= self.dlc <= MAX_DLC:
            raise DbcError(f"message {self.name}: DLC {self.dlc} outside 0..8")
        names = [s.name for s in self.signals]
        if len(set(names)) != len(names):
            raise DbcError(f"message {self.name}: duplicate signal names")
        for sig in self.signals:
            if not sig.fits(self.dlc):
                raise DbcError(f"signal {sig.name} exceeds the {self.dlc}-byte payload of {self.name}")

    def signal(self, name: str) -> SignalSpec:
        for sig in self.signals:
            if sig.name == name:
                return sig
        raise KeyError(f"{self.name} has no signal {name!r}")


@dataclass(frozen=True)
class CanDatabase:
    messages: Mapping[int, MessageSpec] = field(default_factory=dict)
    ecus: tuple[str, ...] = ()
    version: str = ""

    def __getitem__(self, aid: int) -> MessageSpec:
        return self.messages[aid]

    def __contains__(self, aid: int) -> bool:
        return aid in self.messages

    @property
    def signal_count(self) -> int:
        return sum(len(m.signals) for m in self.messages.values())

    def by_name(self, name: str) -> MessageSpec:
        for msg in self.messages.values():
            if msg.name == name:
                return msg
        raise KeyError(name)


_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_BO_RE = re.compile(r"^BO_\s+(\d+)\s+(\w+)\s*:\s*(\d+)\s+(\w+)\s*$")
_SG_RE = re.compile(
    r"^SG_\s+(\w+)\s*(?P<mux>\S+)?\s*:\s*(\d+)\|(\d+)@([01])([+-])\s*"
    rf"\(\s*({_NUM})\s*,\s*({_NUM})\s*\)\s*\[\s*({_NUM})\s*\|\s*({_NUM})\s*\]\s*"
    r'"([^"]*)"\s*(.*)$'
)
_VERSION_RE = re.compile(r'^VERSION\s+"([^"]*)"\s*$')


def _strip_comment(line: str) -> str:
    # ``//`` only starts a comment outside quoted strings.
    if "//" not in line:
        return line
    in_quote = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_quote = not in_quote
        elif not in_quote and line.startswith("//", i):
            return line[:i]
    return line


def parse_dbc(text: str) -> CanDatabase:
    """Parse a DBC document.

    Raises :class:`DbcError` with the offending line number on syntax errors,
    duplicate AIDs, zero scales and signals that do not fit the message, and
    :class:`UnsupportedFeatureError` for multiplexed signals.
    """
    messages: dict[int, MessageSpec] = {}
    ecus: tuple[str, ...] = ()
    version = ""

    current: dict | None = None  # message under construction
    skipping_extended = False
    pending_quote = False

    def close_current():
        nonlocal current
        if current is None:
            return
        try:
            msg = MessageSpec(current["aid"], current["name"], current["dlc"],
                              current["sender"], tuple(current["signals"]))
        except DbcError as exc:
            raise DbcError(str(exc), current["lineno"]) from None
        messages[msg.aid] = msg
        current = None

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        if pending_quote:
            # continuation of a multi-line quoted string (CM_ and friends)
            if raw_line.count('"') % 2 == 1:
                pending_quote = False
            continue
        line = _strip_comment(raw_line).strip()
        if not line:
            continue
        keyword = line.split(None, 1)[0].rstrip(":")

        if keyword == "SG_":
            if skipping_extended:
                continue
            if current is None:
                raise DbcError("SG_ outside of a BO_ block", lineno)
            m = _SG_RE.match(line)
            if m is None:
                raise DbcError(f"malformed SG_ line: {line!r}", lineno)
            if m.group("mux") is not None:
                raise UnsupportedFeatureError(
                    f"multiplexed signal {m.group(1)} ({m.group('mux')}) is not supported", lineno)
            name, start, length, order, sign, scale, offset, lo, hi, unit, rx = (
                m.group(1), m.group(3), m.group(4), m.group(5), m.group(6), m.group(7),
                m.group(8), m.group(9), m.group(10), m.group(11), m.group(12))
            receivers = tuple(r for r in re.split(r"[\s,]+", rx.strip()) if r)
            try:
                sig = SignalSpec(
                    name=name,
                    start_bit=int(start),
                    bit_length=int(length),
                    byte_order=LITTLE_ENDIAN if order == "1" else BIG_ENDIAN,
                    is_signed=sign == "-",
                    scale=float(scale),
                    offset=float(offset),
                    minimum=float(lo),
                    maximum=float(hi),
                    unit=unit,
                    receivers=receivers,
                )
            except DbcError as exc:
                raise DbcError(str(exc), lineno) from None
            if not sig.fits(current["dlc"]):
                raise DbcError(f"signal {name} exceeds the {current['dlc']}-byte payload", lineno)
            current["signals"].append(sig)
            continue

        # any other keyword ends the current message block
        close_current()
        skipping_extended = False

        if keyword == "BO_":
            m = _BO_RE.match(line)
            if m is None:
                raise DbcError(f"malformed BO_ line: {line!r}", lineno)
            frame_id = int(m.group(1))
            if frame_id & EXTENDED_FLAG:
                logger.warning("line %d: skipping extended-frame message %s", lineno, m.group(2))
                skipping_extended = True
                continue
            if frame_id > MAX_STANDARD_AID:
                raise DbcError(f"AID {frame_id} exceeds the 11-bit range", lineno)
            if frame_id in messages:
                raise DbcError(f"duplicate AID {frame_id}", lineno)
            dlc = int(m.group(3))
            if dlc > MAX_DLC:
                raise DbcError(f"DLC {dlc} exceeds {MAX_DLC} bytes", lineno)
            current = {"aid": frame_id, "name": m.group(2), "dlc": dlc,
                       "sender": m.group(4), "signals": [], "lineno": lineno}
        elif keyword == "BU_":
            ecus = tuple(line.split(":", 1)[1].split()) if ":" in line else ()
        elif keyword == "VERSION":
            m = _VERSION_RE.match(line)
            if m is None:
                raise DbcError(f"malformed VERSION line: {line!r}", lineno)
            version = m.group(1)
        else:
            logger.debug("line %d: skipping unsupported keyword %s", lineno, keyword)
            if line.count('"') % 2 == 1:
                pending_quote = True

    close_current()
    return CanDatabase(messages=dict(sorted(messages.items())), ecus=ecus, version=version)


def load_dbc(path) -> CanDatabase:
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_dbc(fh.read())


def _fmt(value: float) -> str:
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def format_dbc(db: CanDatabase) -> str:
    """Print a database back to DBC text (supported constructs only)."""
    lines = [f'VERSION "{db.version}"', "", f"BU_: {' '.join(db.ecus)}".rstrip(), ""]
    for msg in db.messages.values():
        lines.append(f"BO_ {msg.aid} {msg.name}: {msg.dlc} {msg.sender or 'Vector__XXX'}")
        for s in msg.signals:
            order = "1" if s.little_endian else "0"
            sign = "-" if s.is_signed else "+"
            rx = ",".join(s.receivers) or "Vector__XXX"
            lines.append(
                f" SG_ {s.name} : {s.start_bit}|{s.bit_length}@{order}{sign} "
                f"({_fmt(s.scale)},{_fmt(s.offset)}) [{_fmt(s.minimum)}|{_fmt(s.maximum)}] "
                f'"{s.unit}" {rx}'
            )
        lines.append("")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- selection


@dataclass(frozen=True)
class SelectedSignal:
    index: int  # 1-based global signal index
    aid: int
    name: str
    minimum: float
    maximum: float


@dataclass(frozen=True)
class ExcludedSignal:
    aid: int
    name: str
    reason: str  # "static" or "keyword"


@dataclass(frozen=True)
class SignalSelection:
    included: tuple[SelectedSignal, ...]
    excluded: tuple[ExcludedSignal, ...] = ()
    warnings: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.included)

    @property
    def names(self) -> list[str]:
        return [qualified_name(s.aid, s.name) for s in self.included]

    @property
    def aids(self) -> list[int]:
        return sorted({s.aid for s in self.included})

    def column(self, aid: int, name: str) -> int:
        """0-based feature column of a selected signal."""
        for s in self.included:
            if s.aid == aid and s.name == name:
                return s.index - 1
        raise KeyError(f"{aid:03X}/{name} is not selected")

    def to_manifest(self) -> str:
        out = ["# included: index\taid\tsignal\tmin\tmax"]
        for s in self.included:
            out.append(f"{s.index}\t{s.aid:03X}\t{s.name}\t{_fmt(s.minimum)}\t{_fmt(s.maximum)}")
        out.append("# excluded: aid\tsignal\treason")
        for e in self.excluded:
            out.append(f"{e.aid:03X}\t{e.name}\t{e.reason}")
        return "\n".join(out) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_manifest().encode()).hexdigest()[:16]

    @classmethod
    def from_manifest(cls, text: str) -> "SignalSelection":
        included, excluded = [], []
        section = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            if line.startswith("# included"):
                section = "in"
                continue
            if line.startswith("# excluded"):
                section = "ex"
                continue
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                if section == "in":
                    idx, aid, name, lo, hi = parts
                    included.append(SelectedSignal(int(idx), int(aid, 16), name, float(lo), float(hi)))
                elif section == "ex":
                    aid, name, reason = parts
                    excluded.append(ExcludedSignal(int(aid, 16), name, reason))
                else:
                    raise ValueError("row before section header")
            except ValueError as exc:
                raise DbcError(f"bad manifest row: {exc}", lineno) from None
        if [s.index for s in included] != list(range(1, len(included) + 1)):
            raise DbcError("manifest indices are not contiguous from 1")
        return cls(tuple(included), tuple(excluded))


def qualified_name(aid: int, name: str) -> str:
    return f"{aid:03X}_{name}"


def select_signals(db: CanDatabase, training_log: Iterable, keywords: Sequence[str] = DEFAULT_KEYWORDS
                   ) -> SignalSelection:
    """Drop static and keyword-matched signals and number the rest.

    A signal is static when its range is degenerate (min == max) or its
    deserialized value never changes over the whole training log. Survivors
    are indexed in (AID ascending, declaration order).
    """
    from .deserialize import decode_signal

    keywords = [k.lower() for k in keywords]
    first_value: dict[tuple[int, str], float] = {}
    varying: set[tuple[int, str]] = set()
    seen_aids: set[int] = set()
    last_payload: dict[int, bytes] = {}

    for msg in training_log:
        spec = db.messages.get(msg.aid)
        if spec is None:
            continue
        seen_aids.add(msg.aid)
        if last_payload.get(msg.aid) == msg.data:
            continue
        last_payload[msg.aid] = msg.data
        for sig in spec.signals:
            key = (msg.aid, sig.name)
            if key in varying:
                continue
            value = decode_signal(msg.data, sig)
            if key not in first_value:
                first_value[key] = value
            elif value != first_value[key]:
                varying.add(key)

    included, excluded, warnings = [], [], []
    for aid, spec in db.messages.items():
        if spec.signals and aid not in seen_aids:
            warnings.append(f"AID {aid:03X} ({spec.name}) absent from training log; signals kept")
            logger.warning(warnings[-1])
        for sig in spec.signals:
            key = (aid, sig.name)
            if any(k in sig.name.lower() for k in keywords):
                excluded.append(ExcludedSignal(aid, sig.name, "keyword"))
            elif sig.minimum == sig.maximum or (aid in seen_aids and key not in varying):
                excluded.append(ExcludedSignal(aid, sig.name, "static"))
            else:
                included.append(SelectedSignal(len(included) + 1, aid, sig.name, sig.minimum, sig.maximum))
    return SignalSelection(tuple(included), tuple(excluded), tuple(warnings))
