"""Feature generation: latest-payload cache -> fixed-rate sampler -> scaled
signal vector -> sliding windows.

Tick origin is the first message timestamp; ticks fall at exact multiples of
``t`` after it. A tick at time T sees every message with timestamp <= T.
"""

from __future__ import annotations

import csv
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .canlog import US_PER_S, CanMessage, seconds_to_us
from .dbc import MAX_DLC, CanDatabase, SignalSelection
from .deserialize import decode_signal, range_tolerance

LABELS = ("unlabeled", "benign", "attack")


class PayloadCache:
    """Latest payload per monitored stream; rows fill once and stay filled."""

    def __init__(self, aids: Iterable[int]):
        self.aids = tuple(sorted(set(aids)))
        self._rows: dict[int, bytes | None] = {aid: None for aid in self.aids}
        self._tainted: dict[int, bool] = {aid: False for aid in self.aids}
        self._empty = len(self.aids)
        self.ignored = 0
        self._lock = threading.Lock()

    def update(self, msg: CanMessage, tainted: bool = False) -> bool:
        """Store ``msg.data`` as the latest payload of its stream.

        Messages of unmonitored streams are counted and dropped. ``tainted``
        marks attacker-controlled payloads for ground-truth labelling.
        """
        with self._lock:
            if msg.aid not in self._rows:
                self.ignored += 1
                return False
            if self._rows[msg.aid] is None:
                self._empty -= 1
            self._rows[msg.aid] = msg.data
            self._tainted[msg.aid] = tainted
            return True

    @property
    def ready(self) -> bool:
        return self._empty == 0

    @property
    def filled(self) -> int:
        return len(self.aids) - self._empty

    def row(self, aid: int) -> bytes | None:
        return self._rows[aid]

    def snapshot(self) -> tuple[dict[int, bytes], bool] | None:
        """Atomic copy of all rows plus whether any row is tainted; None until ready."""
        with self._lock:
            if self._empty:
                return None
            return dict(self._rows), any(self._tainted.values())


def update_cache(cache: PayloadCache, msg: CanMessage) -> None:
    cache.update(msg)


@dataclass(frozen=True)
class ScaledVector:
    values: np.ndarray  # (x,) in [0, 1]
    violations: np.ndarray  # (x,) bool, value was clamped
    time_us: int = 0
    tainted: bool = False


@dataclass(frozen=True)
class FeatureWindow:
    matrix: np.ndarray  # (w, x), oldest tick first
    end_time_us: int
    label: str = "unlabeled"
    violations: np.ndarray | None = None  # (x,) any clamp inside the window
    tainted: bool = False  # an injected payload was cached at some tick

    @property
    def end_time(self) -> float:
        return self.end_time_us / US_PER_S

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


class Scaler:
    """Deserializes a cache snapshot and maps each selected signal onto [0, 1]
    using its DBC range. Out-of-range values are clamped and flagged."""

    def __init__(self, db: CanDatabase, selection: SignalSelection):
        self.x = len(selection.included)
        self.names = selection.names
        groups: dict[int, list] = {}
        for sel in selection.included:
            sig = db.messages[sel.aid].signal(sel.name)
            if not sel.minimum < sel.maximum:
                raise ValueError(f"{sel.aid:03X}/{sel.name}: degenerate range cannot be scaled")
            groups.setdefault(sel.aid, []).append((sel.index - 1, sig, sel.minimum, sel.maximum))
        self.aids = tuple(sorted(groups))
        self._groups = {
            aid: (np.array([c for c, *_ in rows]), [s for _, s, *_ in rows],
                  np.array([lo for *_, lo, _ in rows]), np.array([hi for *_, hi in rows]),
                  np.array([range_tolerance(s) for _, s, *_ in rows]))
            for aid, rows in groups.items()
        }
        self._memo: dict[int, tuple[bytes, np.ndarray, np.ndarray]] = {}

    def scale_payload(self, aid: int, payload: bytes) -> tuple[np.ndarray, np.ndarray]:
        memo = self._memo.get(aid)
        if memo is not None and memo[0] == payload:
            return memo[1], memo[2]
        _, sigs, lo, hi, tol = self._groups[aid]
        padded = payload.ljust(MAX_DLC, b"\0")  # short frames read as zero bits
        phys = np.array([decode_signal(padded, s) for s in sigs])
        flags = (phys < lo - tol) | (phys > hi + tol)
        scaled = np.clip((phys - lo) / (hi - lo), 0.0, 1.0)
        self._memo[aid] = (payload, scaled, flags)
        return scaled, flags

    def scale(self, rows: dict[int, bytes]) -> tuple[np.ndarray, np.ndarray]:
        values = np.empty(self.x)
        flags = np.empty(self.x, dtype=bool)
        for aid in self.aids:
            cols = self._groups[aid][0]
            values[cols], flags[cols] = self.scale_payload(aid, rows[aid])
        return values, flags


def sample(cache: PayloadCache, scaler: Scaler, now_us: int = 0) -> ScaledVector | None:
    """Snapshot the cache and scale it; None until every stream has been seen."""
    snap = cache.snapshot()
    if snap is None:
        return None
    rows, tainted = snap
    values, flags = scaler.scale(rows)
    return ScaledVector(values, flags, now_us, tainted)


class WindowBuilder:
    """Stacks the latest ``w`` vectors; stride one tick."""

    def __init__(self, w: int):
        if w < 1:
            raise ValueError("window size must be >= 1")
        self.w = w
        self._buf: deque[ScaledVector] = deque(maxlen=w)

    def push(self, v: ScaledVector) -> FeatureWindow | None:
        self._buf.append(v)
        if len(self._buf) < self.w:
            return None
        matrix = np.stack([b.values for b in self._buf])
        violations = np.logical_or.reduce([b.violations for b in self._buf])
        return FeatureWindow(matrix, v.time_us, violations=violations,
                             tainted=any(b.tainted for b in self._buf))


def push_window(builder: WindowBuilder, v: ScaledVector) -> FeatureWindow | None:
    return builder.push(v)


class Sampler:
    """Drives the cache and emits scaled vectors on the tick grid."""

    def __init__(self, db: CanDatabase, selection: SignalSelection, t: float):
        self.t_us = seconds_to_us(t)
        if self.t_us <= 0:
            raise ValueError("sampling interval must be positive")
        self.scaler = Scaler(db, selection)
        self.cache = PayloadCache(self.scaler.aids)
        self._next_tick: int | None = None
        self._last_ts: int | None = None

    def _ticks_before(self, limit_us: int, inclusive: bool) -> Iterator[ScaledVector]:
        while self._next_tick < limit_us or (inclusive and self._next_tick == limit_us):
            v = sample(self.cache, self.scaler, self._next_tick)
            self._next_tick += self.t_us
            if v is not None:
                yield v

    def feed(self, msg: CanMessage, tainted: bool = False) -> list[ScaledVector]:
        if self._next_tick is None:
            self._next_tick = msg.timestamp_us
        elif msg.timestamp_us < self._last_ts:
            raise ValueError(f"timestamps must be non-decreasing ({msg.timestamp_us} < {self._last_ts})")
        out = list(self._ticks_before(msg.timestamp_us, inclusive=False))
        self._last_ts = msg.timestamp_us
        self.cache.update(msg, tainted)
        return out

    def finish(self) -> list[ScaledVector]:
        if self._next_tick is None:
            return []
        return list(self._ticks_before(self._last_ts, inclusive=True))


class FeatureGenerator:
    """Streaming feature generator: messages in, windows out."""

    def __init__(self, db: CanDatabase, selection: SignalSelection, t: float, w: int):
        self.sampler = Sampler(db, selection, t)
        self.builder = WindowBuilder(w)

    @property
    def ignored(self) -> int:
        return self.sampler.cache.ignored

    def feed(self, msg: CanMessage, tainted: bool = False) -> list[FeatureWindow]:
        return [win for v in self.sampler.feed(msg, tainted) if (win := self.builder.push(v)) is not None]

    def finish(self) -> list[FeatureWindow]:
        return [win for v in self.sampler.finish() if (win := self.builder.push(v)) is not None]


def _taint_flags(log, injected):
    if injected is None:
        return ((m, False) for m in log)
    return zip(log, injected)


def run_pipeline(log: Iterable[CanMessage], db: CanDatabase, selection: SignalSelection,
                 t: float = 0.005, w: int = 150, injected: Sequence[bool] | None = None
                 ) -> Iterator[FeatureWindow]:
    """Yield feature windows for a log, one per tick once warm."""
    gen = FeatureGenerator(db, selection, t, w)
    for msg, flag in _taint_flags(log, injected):
        yield from gen.feed(msg, flag)
    yield from gen.finish()


@dataclass
class SampledSeries:
    """All ready ticks of a log, for batch processing."""

    t_us: int
    times_us: np.ndarray  # (n,)
    values: np.ndarray  # (n, x)
    violations: np.ndarray  # (n, x)
    tainted: np.ndarray  # (n,)
    names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.times_us)

    def n_windows(self, w: int) -> int:
        return max(0, len(self) - w + 1)

    def windows(self, w: int) -> np.ndarray:
        """Read-only (n_windows, w, x) view."""
        if self.n_windows(w) == 0:
            return np.empty((0, w, self.values.shape[1]))
        return sliding_window_view(self.values, w, axis=0).transpose(0, 2, 1)

    def window_end_times(self, w: int) -> np.ndarray:
        return self.times_us[w - 1:]

    def window_tainted(self, w: int) -> np.ndarray:
        if self.n_windows(w) == 0:
            return np.zeros(0, dtype=bool)
        return sliding_window_view(self.tainted, w).any(axis=1)

    def window_violations(self, w: int) -> np.ndarray:
        if self.n_windows(w) == 0:
            return np.zeros((0, self.values.shape[1]), dtype=bool)
        return sliding_window_view(self.violations, w, axis=0).any(axis=2)

    def feature_windows(self, w: int, labels: Sequence[str] | None = None) -> Iterator[FeatureWindow]:
        mats, ends = self.windows(w), self.window_end_times(w)
        taint, viol = self.window_tainted(w), self.window_violations(w)
        for i in range(len(ends)):
            yield FeatureWindow(np.array(mats[i]), int(ends[i]),
                                labels[i] if labels is not None else "unlabeled", viol[i], bool(taint[i]))


def sample_log(log: Iterable[CanMessage], db: CanDatabase, selection: SignalSelection, t: float = 0.005,
               injected: Sequence[bool] | None = None) -> SampledSeries:
    """Run cache + sampler over a log and collect every ready tick."""
    sampler = Sampler(db, selection, t)
    vecs: list[ScaledVector] = []
    for msg, flag in _taint_flags(log, injected):
        vecs.extend(sampler.feed(msg, flag))
    vecs.extend(sampler.finish())
    x = sampler.scaler.x
    return SampledSeries(
        t_us=sampler.t_us,
        times_us=np.array([v.time_us for v in vecs], dtype=np.int64),
        values=np.array([v.values for v in vecs]).reshape(len(vecs), x),
        violations=np.array([v.violations for v in vecs], dtype=bool).reshape(len(vecs), x),
        tainted=np.array([v.tainted for v in vecs], dtype=bool),
        names=list(sampler.scaler.names),
    )


# --------------------------------------------------------------------------- feature dumps

DUMP_MAGIC = b"XCFD"
DUMP_VERSION = 1
_HEADER = struct.Struct("<4sHIII16s")
_RECORD_HEAD = struct.Struct("<qB")


@dataclass(frozen=True)
class FeatureHeader:
    t_us: int
    w: int
    x: int
    selection_hash: str


@dataclass
class FeatureDump:
    header: FeatureHeader
    end_times_us: np.ndarray
    labels: list[str]
    windows: np.ndarray  # (n, w, x) float32


def write_feature_dump(path, header: FeatureHeader, windows: Iterable[FeatureWindow]) -> int:
    """Binary dump, one window per record (float32 little-endian)."""
    n = 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, header.t_us, header.w, header.x,
                              header.selection_hash.encode("ascii")[:16].ljust(16, b"\0")))
        for win in windows:
            if win.matrix.shape != (header.w, header.x):
                raise ValueError(f"window shape {win.matrix.shape} != {(header.w, header.x)}")
            fh.write(_RECORD_HEAD.pack(win.end_time_us, LABELS.index(win.label)))
            fh.write(np.ascontiguousarray(win.matrix, dtype="<f4").tobytes())
            n += 1
    return n


def read_feature_dump(path) -> FeatureDump:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature dump header")
    magic, version, t_us, w, x, sel = _HEADER.unpack_from(raw)
    if magic != DUMP_MAGIC:
        raise ValueError(f"{path}: not a feature dump (magic {magic!r})")
    if version != DUMP_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    header = FeatureHeader(t_us, w, x, sel.rstrip(b"\0").decode("ascii"))
    rec = _RECORD_HEAD.size + 4 * w * x
    body = raw[_HEADER.size:]
    if len(body) % rec:
        raise ValueError(f"{path}: truncated record")
    n = len(body) // rec
    dt = np.dtype([("end", "<i8"), ("label", "u1"), ("m", "<f4", (w, x))])
    arr = np.frombuffer(body, dtype=dt, count=n)
    return FeatureDump(header, arr["end"].astype(np.int64), [LABELS[i] for i in arr["label"]],
                       np.array(arr["m"]))


def write_feature_csv(path, header: FeatureHeader, series: SampledSeries) -> None:
    """One row per tick, one column per signal."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# magic={DUMP_MAGIC.decode()} version={DUMP_VERSION} t_us={header.t_us} "
                 f"w={header.w} x={header.x} selection={header.selection_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time_us", *series.names])
        for t, row in zip(series.times_us, series.values):
            writer.writerow([int(t), *(repr(float(v)) for v in row)])


def read_feature_csv(path) -> tuple[FeatureHeader, SampledSeries]:
    with open(path, newline="") as fh:
        meta_line = fh.readline()
        if not meta_line.startswith("#"):
            raise ValueError(f"{path}: missing feature header")
        meta = dict(kv.split("=", 1) for kv in meta_line[1:].split())
        if meta.get("magic") != DUMP_MAGIC.decode():
            raise ValueError(f"{path}: bad magic")
        header = FeatureHeader(int(meta["t_us"]), int(meta["w"]), int(meta["x"]), meta["selection"])
        reader = csv.reader(fh)
        names = next(reader)[1:]
        rows = [r for r in reader if r]
    times = np.array([int(r[0]) for r in rows], dtype=np.int64)
    values = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), len(names))
    n = len(rows)
    return header, SampledSeries(header.t_us, times, values, np.zeros_like(values, dtype=bool),
                                 np.zeros(n, dtype=bool), names)
