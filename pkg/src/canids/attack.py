"""Attack injection on benign logs: fuzzing, fabrication, suspension,
masquerade and replay, with window-level ground truth."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .canlog import US_PER_S, CanMessage, seconds_to_us
from .dbc import CanDatabase, MessageSpec
from .deserialize import encode_value, insert_bits

KINDS = ("fuzzing", "fabrication", "suspension", "masquerade", "replay")
FABRICATION_DELAY_US = 100  # injected frame follows its benign twin by 0.1 ms

PayloadGen = Callable[[CanMessage, np.random.Generator], bytes]


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackPlan:
    kind: str
    start: float  # seconds after the first message of the log
    end: float
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if not self.start < self.end:
            raise AttackError(f"attack period [{self.start}, {self.end}] is empty")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "start": self.start, "end": self.end, "params": self.params, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackPlan":
        return cls(d["kind"], float(d["start"]), float(d["end"]), dict(d.get("params", {})), int(d.get("seed", 0)))


def load_plans(text: str) -> list[AttackPlan]:
    """A single plan object, a list of plans, or ``{"plans": [...]}``."""
    data = json.loads(text)
    if isinstance(data, dict) and "plans" in data:
        data = data["plans"]
    if isinstance(data, dict):
        data = [data]
    return [AttackPlan.from_dict(d) for d in data]


@dataclass
class LabeledLog:
    messages: list[CanMessage]
    injected: list[bool]
    period_us: tuple[int, int]
    kind: str = ""
    aid: int | None = None

    @property
    def n_injected(self) -> int:
        return sum(self.injected)

    def in_period(self, ts_us: int) -> bool:
        return self.period_us[0] <= ts_us < self.period_us[1]


# --------------------------------------------------------------------------- payload generators


def constant_payload(data: bytes) -> PayloadGen:
    data = bytes(data)
    return lambda msg, rng: data


def random_payload(length: int = 8) -> PayloadGen:
    return lambda msg, rng: rng.integers(0, 256, size=length, dtype=np.uint8).tobytes()


def identity_payload() -> PayloadGen:
    return lambda msg, rng: msg.data


class SignalOverride:
    """Rewrite selected signals of the benign payload and keep every other bit
    (counters, checksums) as captured.

    Values are constants or callables of the message time in seconds.
    """

    def __init__(self, spec: MessageSpec, values: dict[str, float | Callable[[float], float]]):
        self.spec = spec
        self.values = dict(values)
        for name in self.values:
            spec.signal(name)  # raises KeyError for unknown names

    def __call__(self, msg: CanMessage, rng) -> bytes:
        base = msg.data if len(msg.data) == self.spec.dlc else msg.data[:self.spec.dlc].ljust(self.spec.dlc, b"\0")
        payload = bytearray(base)
        for name, value in self.values.items():
            v = value(msg.timestamp) if callable(value) else value
            sig = self.spec.signal(name)
            insert_bits(payload, sig, encode_value(float(v), sig, self.spec.aid))
        return bytes(payload)


def ramp(v0: float, v1: float, t0: float, t1: float) -> Callable[[float], float]:
    """Linear ramp from v0 at t0 to v1 at t1, held outside."""
    def f(t):
        a = min(max((t - t0) / (t1 - t0), 0.0), 1.0)
        return v0 + a * (v1 - v0)
    return f


def payload_from_params(p: dict, db: CanDatabase | None, aid: int, plan: AttackPlan) -> PayloadGen:
    mode = p.get("mode", "random")
    if mode == "constant":
        return constant_payload(bytes.fromhex(p["hex"]))
    if mode == "random":
        return random_payload(int(p.get("length", 8)))
    if mode == "identity":
        return identity_payload()
    if db is None:
        raise AttackError(f"payload mode {mode!r} needs a CAN database")
    spec = db.messages[aid]
    if mode == "override":
        return SignalOverride(spec, {k: float(v) for k, v in p["signals"].items()})
    if mode == "ramp":
        return SignalOverride(spec, {p["signal"]: ramp(float(p["from"]), float(p["to"]), plan.start, plan.end)})
    raise AttackError(f"unknown payload mode {mode!r}")


# --------------------------------------------------------------------------- attacks


def _merge(benign: Sequence[CanMessage], benign_flags: Sequence[bool], extra: Sequence[CanMessage]
           ) -> tuple[list[CanMessage], list[bool]]:
    """Stable timestamp merge; benign frames precede injected ones on ties."""
    a = ((m.timestamp_us, 0, i, m, f) for i, (m, f) in enumerate(zip(benign, benign_flags)))
    b = ((m.timestamp_us, 1, i, m, True) for i, m in enumerate(sorted(extra, key=lambda m: m.timestamp_us)))
    merged = list(heapq.merge(a, b))
    return [e[3] for e in merged], [e[4] for e in merged]


def _require_aid(log: Sequence[CanMessage], aid: int) -> None:
    if not any(m.aid == aid for m in log):
        raise AttackError(f"AID {aid:03X} does not occur in the log")


def _period(period) -> tuple[int, int]:
    start, end = period
    return seconds_to_us(start), seconds_to_us(end)


def bus_rate(log: Sequence[CanMessage]) -> float:
    """Mean benign message rate (msg/s) over the log span."""
    span = (log[-1].timestamp_us - log[0].timestamp_us) / US_PER_S
    return (len(log) - 1) / span if span > 0 else 0.0


def bus_load(base_rate: float, fuzz_rate: float) -> float:
    """Relative bus load in percent of the attack-free rate."""
    return 100.0 * (base_rate + fuzz_rate) / base_rate


def fuzz(log: Sequence[CanMessage], period, rate: float, aid_pool: Sequence[int] | None = None,
         seed: int = 0, random_aids: bool = False, length: int = 8) -> LabeledLog:
    """Insert ``round(rate * duration)`` random frames at uniform random times.

    AIDs come from ``aid_pool`` (default: AIDs observed in the log) or, with
    ``random_aids``, uniformly from the 11-bit space.
    """
    if rate <= 0:
        raise AttackError("fuzzing rate must be positive")
    start, end = _period(period)
    if not random_aids:
        pool = sorted(set(aid_pool)) if aid_pool is not None else sorted({m.aid for m in log})
        if not pool:
            raise AttackError("empty AID pool")
    rng = np.random.default_rng(seed)
    n = int(round(rate * (end - start) / US_PER_S))
    times = np.sort(rng.integers(start, end, size=n))
    aids = rng.integers(0, 0x800, size=n) if random_aids else np.asarray(pool)[rng.integers(0, len(pool), size=n)]
    payloads = rng.integers(0, 256, size=(n, length), dtype=np.uint8)
    iface = log[0].iface if log else "can0"
    extra = [CanMessage(int(t), int(a), payloads[i].tobytes(), iface) for i, (t, a) in enumerate(zip(times, aids))]
    msgs, flags = _merge(log, [False] * len(log), extra)
    return LabeledLog(msgs, flags, (start, end), "fuzzing")


def fabricate(log: Sequence[CanMessage], period, aid: int, payload_gen: PayloadGen, seed: int = 0) -> LabeledLog:
    """After every benign frame of ``aid`` inside the period, inject one crafted
    frame 0.1 ms later."""
    _require_aid(log, aid)
    start, end = _period(period)
    rng = np.random.default_rng(seed)
    extra = []
    for m in log:
        if m.aid == aid and start <= m.timestamp_us and m.timestamp_us + FABRICATION_DELAY_US < end:
            extra.append(CanMessage(m.timestamp_us + FABRICATION_DELAY_US, aid, payload_gen(m, rng), m.iface))
    msgs, flags = _merge(log, [False] * len(log), extra)
    return LabeledLog(msgs, flags, (start, end), "fabrication", aid)


def suspend(log: Sequence[CanMessage], period, aid: int) -> LabeledLog:
    """Drop every frame of ``aid`` inside the period."""
    _require_aid(log, aid)
    start, end = _period(period)
    msgs = [m for m in log if not (m.aid == aid and start <= m.timestamp_us < end)]
    return LabeledLog(msgs, [False] * len(msgs), (start, end), "suspension", aid)


def masquerade(log: Sequence[CanMessage], period, aid: int, payload_gen: PayloadGen, seed: int = 0) -> LabeledLog:
    """Replace the payloads of ``aid`` inside the period; timing is untouched."""
    _require_aid(log, aid)
    start, end = _period(period)
    rng = np.random.default_rng(seed)
    msgs, flags = [], []
    for m in log:
        if m.aid == aid and start <= m.timestamp_us < end:
            msgs.append(m.with_data(payload_gen(m, rng)))
            flags.append(True)
        else:
            msgs.append(m)
            flags.append(False)
    return LabeledLog(msgs, flags, (start, end), "masquerade", aid)


def replay(log: Sequence[CanMessage], period, capture_window) -> LabeledLog:
    """Re-send the traffic captured in ``capture_window`` back to back from
    the period start until the period end, on top of the benign traffic."""
    start, end = _period(period)
    c0, c1 = _period(capture_window)
    if not c0 < c1:
        raise AttackError("empty capture window")
    if log and not (log[0].timestamp_us <= c0 and c1 <= log[-1].timestamp_us + 1):
        raise AttackError("capture window lies outside the log span")
    capture = [m for m in log if c0 <= m.timestamp_us < c1]
    if not capture:
        raise AttackError("capture window contains no messages")
    length = c1 - c0
    extra = []
    rep = 0
    while start + rep * length < end:
        base = start + rep * length - c0
        for m in capture:
            ts = m.timestamp_us + base
            if ts >= end:
                break
            extra.append(m.at(ts))
        rep += 1
    msgs, flags = _merge(log, [False] * len(log), extra)
    return LabeledLog(msgs, flags, (start, end), "replay")


def run_plan(log: Sequence[CanMessage], plan: AttackPlan, db: CanDatabase | None = None) -> LabeledLog:
    """Apply a plan whose times are relative to the first message of ``log``."""
    if not log:
        raise AttackError("empty log")
    p = plan.params
    origin = log[0].timestamp
    if plan.start < 0 or origin + plan.end > log[-1].timestamp + 1e-6:
        raise AttackError(f"attack period lies outside the log ({plan.end} s > {log[-1].timestamp - origin:.6f} s)")
    period = (origin + plan.start, origin + plan.end)
    aid = p.get("aid")
    if isinstance(aid, str):
        aid = int(aid, 16)
    if plan.kind == "fuzzing":
        pool = [int(a, 16) if isinstance(a, str) else int(a) for a in p["aid_pool"]] if "aid_pool" in p else None
        return fuzz(log, period, float(p["rate"]), pool, plan.seed, bool(p.get("random_aids", False)))
    if plan.kind == "suspension":
        return suspend(log, period, aid)
    if plan.kind == "replay":
        c0, c1 = p["capture"]
        return replay(log, period, (origin + c0, origin + c1))
    gen = payload_from_params(p.get("payload", {}), db, aid, plan)
    if plan.kind == "fabrication":
        return fabricate(log, period, aid, gen, plan.seed)
    return masquerade(log, period, aid, gen, plan.seed)


# --------------------------------------------------------------------------- labels


def label_windows(end_times_us: Sequence[int], tainted: Sequence[bool], attacked: LabeledLog, t_us: int, w: int
                  ) -> list[str]:
    """Ground truth per window.

    A window spanning ``[end - w*t, end]`` is an attack window when it overlaps
    the attack period and, for payload-affecting attacks, an injected or
    replaced payload sat in the cache at one of its ticks. For suspension the
    overlap alone decides.
    """
    kind, (start, end) = attacked.kind, attacked.period_us
    span = w * t_us
    labels = []
    for e, taint in zip(end_times_us, tainted):
        overlaps = e >= start and e - span < end
        hit = overlaps if kind == "suspension" else overlaps and bool(taint)
        labels.append("attack" if hit else "benign")
    return labels


def write_labels(path, end_times_us: Sequence[int], labels: Sequence[str]) -> None:
    """Label sidecar: one ``window_end_time_us,label`` row per window."""
    with open(path, "w", newline="\n") as fh:
        fh.write("window_end_time_us,label\n")
        for e, lab in zip(end_times_us, labels):
            fh.write(f"{int(e)},{lab}\n")


def read_labels(path) -> tuple[list[int], list[str]]:
    ends, labels = [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "window_end_time_us,label":
            raise ValueError(f"{path}: not a label file")
        for line in fh:
            if line.strip():
                e, lab = line.strip().split(",")
                ends.append(int(e))
                labels.append(lab)
    return ends, labels
