"""Synthetic in-vehicle traffic: a small chassis/powertrain DBC, a kinematic
drive-cycle simulator and a periodic transmitter with timing jitter.

The generated signals carry realistic couplings (wheel speeds follow the
vehicle speed, rpm follows speed and gear, yaw rate follows steering and
speed), which is what a reconstruction model can learn and what attacks
break.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .canlog import CanMessage, seconds_to_us
from .dbc import BIG_ENDIAN, CanDatabase, MessageSpec, SignalSpec, qualified_name
from .deserialize import encode_value, insert_bits

DT = 0.01  # simulation step in seconds

SEGMENT_KINDS = ("stop", "accelerate", "cruise", "brake", "turn")
GEAR_UPSHIFT_KMH = (20.0, 35.0, 55.0, 75.0, 95.0)
GEAR_RPM_PER_KMH = (0.0, 100.0, 60.0, 42.0, 32.0, 26.0, 22.0)
IDLE_RPM = 750.0
WHEELBASE_M = 2.7
STEERING_RATIO = 15.0


def _sig(name, start, length, scale=1.0, offset=0.0, lo=0.0, hi=None, unit="", signed=False, order="little_endian"):
    if hi is None:
        hi = offset + scale * ((1 << length) - 1)
    return SignalSpec(name, start, length, order, signed, float(scale), float(offset), float(lo), float(hi), unit,
                      ("Vector__XXX",))


# (aid, name, dlc, sender, period_ms, signals)
_STREAMS = (
    (0x043, "DATC11", 8, "DATC", 1000, (
        _sig("DATC_SetTemp", 0, 8, 0.5, 0, 0, 127.5, "C"),
        _sig("DATC_Mode", 8, 4, 1, 0, 0, 15),
        _sig("DATC_Reserved", 16, 8, 1, 0, 0, 0),
    )),
    (0x080, "EMS16", 8, "EMS", 10, (
        _sig("PV_AV_CAN", 0, 8, 0.4, 0, 0, 100, "%"),
        _sig("N", 8, 16, 0.25, 0, 0, 16383.75, "rpm"),
        _sig("TQI_ACOR", 24, 8, 0.390625, 0, 0, 99.609375, "%"),
        _sig("ALIVE_CNT", 56, 4, 1, 0, 0, 15),
        _sig("CHECKSUM", 60, 4, 1, 0, 0, 15),
    )),
    (0x111, "TCU11", 8, "TCU", 10, (
        _sig("G_SEL_DISP", 0, 4, 1, 0, 0, 15),
        _sig("VS_TCU", 8, 8, 1, 0, 0, 254, "km/h"),
        _sig("TCU_ALIVE", 16, 4, 1, 0, 0, 15),
        _sig("CHECKSUM_TCU", 20, 4, 1, 0, 0, 15),
    )),
    (0x164, "ESC11", 4, "ESC", 10, (
        _sig("BRAKE_ACT", 0, 1, 1, 0, 0, 1),
        _sig("BRAKE_PRES", 8, 12, 0.1, 0, 0, 409.5, "bar"),
        _sig("ESC_AliveCnt", 28, 4, 1, 0, 0, 15),
    )),
    (0x220, "ESP12", 8, "ESC", 10, (
        _sig("LAT_ACCEL", 0, 11, 0.01, -10.23, -10.23, 10.24, "m/s^2"),
        _sig("LONG_ACCEL", 13, 11, 0.01, -10.23, -10.23, 10.24, "m/s^2"),
        _sig("YAW_RATE", 40, 13, 0.01, -40.95, -40.95, 40.96, "deg/s"),
        _sig("ESP12_AliveCounter", 56, 4, 1, 0, 0, 15),
        _sig("ESP12_Checksum", 60, 4, 1, 0, 0, 15),
    )),
    (0x2B0, "SAS11", 5, "MDPS", 10, (
        _sig("SAS_Angle", 7, 16, 0.1, 0, -1024, 1023, "deg", signed=True, order=BIG_ENDIAN),
        _sig("SAS_Speed", 23, 8, 4, 0, 0, 1016, "deg/s", order=BIG_ENDIAN),
        _sig("MsgCount", 32, 4, 1, 0, 0, 15),
        _sig("CheckSum", 36, 4, 1, 0, 0, 15),
    )),
    (0x316, "EMS11", 8, "EMS", 10, (
        _sig("VS", 0, 13, 0.03125, 0, 0, 255, "km/h"),
        _sig("N", 16, 16, 0.25, 0, 0, 16383.75, "rpm"),
    )),
    (0x329, "EMS12", 8, "EMS", 100, (
        _sig("TEMP_ENG", 8, 8, 0.75, -48, -48, 143.25, "C"),
    )),
    (0x386, "WHL_SPD11", 8, "ESC", 20, (
        _sig("WHL_SPD_FL", 0, 14, 0.03125, 0, 0, 511.96875, "km/h"),
        _sig("WHL_SPD_AliveCounter_LSB", 14, 2, 1, 0, 0, 3),
        _sig("WHL_SPD_FR", 16, 14, 0.03125, 0, 0, 511.96875, "km/h"),
        _sig("WHL_SPD_AliveCounter_MSB", 30, 2, 1, 0, 0, 3),
        _sig("WHL_SPD_RL", 32, 14, 0.03125, 0, 0, 511.96875, "km/h"),
        _sig("WHL_SPD_Checksum_LSB", 46, 2, 1, 0, 0, 3),
        _sig("WHL_SPD_RR", 48, 14, 0.03125, 0, 0, 511.96875, "km/h"),
        _sig("WHL_SPD_Checksum_MSB", 62, 2, 1, 0, 0, 3),
    )),
    (0x4F1, "CLU11", 4, "CLU", 20, (
        _sig("CF_Clu_Vanz", 0, 9, 0.5, 0, 0, 255.5, "km/h"),
        _sig("CF_Clu_VanzDecimal", 9, 2, 0.125, 0, 0, 0.375, "km/h"),
        _sig("CF_Clu_AliveCnt1", 24, 4, 1, 0, 0, 15),
    )),
    (0x545, "EMS14", 8, "EMS", 100, (
        _sig("BAT_V", 0, 8, 0.1, 0, 0, 25.5, "V"),
    )),
    (0x5B0, "CLU12", 4, "CLU", 1000, (
        _sig("CF_Clu_Odometer", 0, 24, 0.1, 0, 0, 1677721.5, "km"),
    )),
)

PERIODS_MS = {aid: period for aid, _, _, _, period, _ in _STREAMS}

CORRELATED_GROUPS = {
    "speed": tuple(qualified_name(a, n) for a, n in (
        (0x316, "VS"), (0x111, "VS_TCU"), (0x4F1, "CF_Clu_Vanz"), (0x386, "WHL_SPD_FL"), (0x386, "WHL_SPD_FR"),
        (0x386, "WHL_SPD_RL"), (0x386, "WHL_SPD_RR"), (0x080, "N"), (0x316, "N"), (0x111, "G_SEL_DISP"))),
    "steering": tuple(qualified_name(a, n) for a, n in (
        (0x2B0, "SAS_Angle"), (0x2B0, "SAS_Speed"), (0x220, "YAW_RATE"), (0x220, "LAT_ACCEL"))),
    "powertrain": tuple(qualified_name(a, n) for a, n in (
        (0x080, "PV_AV_CAN"), (0x080, "TQI_ACOR"), (0x080, "N"), (0x316, "N"), (0x220, "LONG_ACCEL"))),
}


def synthetic_database() -> CanDatabase:
    msgs = {aid: MessageSpec(aid, name, dlc, sender, sigs) for aid, name, dlc, sender, _, sigs in _STREAMS}
    ecus = tuple(sorted({sender for _, _, _, sender, _, _ in _STREAMS}))
    return CanDatabase(dict(sorted(msgs.items())), ecus, "synthetic 1.0")


def correlated_with(qualified: str) -> set[str]:
    """Every signal sharing a correlation group with ``qualified`` (itself included)."""
    out = {qualified}
    for group in CORRELATED_GROUPS.values():
        if qualified in group:
            out.update(group)
    return out


# --------------------------------------------------------------------------- profiles


@dataclass(frozen=True)
class Segment:
    kind: str
    duration: float  # seconds
    target_kmh: float = 0.0

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.duration <= 0:
            raise ValueError("segment duration must be positive")


@dataclass(frozen=True)
class SynthProfile:
    duration: float = 300.0
    seed: int = 0
    mode: str = "driving"  # or "parked"
    segments: tuple[Segment, ...] = ()  # empty: random drive cycle
    start_time: float = 1000.0
    odometer_start: float = 12345.6
    coolant_start: float = 60.0
    jitter_us: float = 150.0

    def __post_init__(self):
        if self.mode not in ("driving", "parked"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        object.__setattr__(self, "segments", tuple(
            s if isinstance(s, Segment) else Segment(*s) for s in self.segments))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthProfile":
        d = dict(d)
        d["segments"] = tuple(Segment(*s) if isinstance(s, (list, tuple)) else Segment(**s)
                              for s in d.get("segments", ()))
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SynthProfile":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {"duration": self.duration, "seed": self.seed, "mode": self.mode,
                "segments": [[s.kind, s.duration, s.target_kmh] for s in self.segments],
                "start_time": self.start_time, "odometer_start": self.odometer_start,
                "coolant_start": self.coolant_start, "jitter_us": self.jitter_us}


def random_cycle(duration: float, rng: np.random.Generator) -> list[Segment]:
    segs = [Segment("stop", float(rng.uniform(3, 8)))]
    total, v = segs[0].duration, 0.0
    while total < duration:
        target = float(rng.uniform(30, 100))
        new = []
        if target > v:
            new.append(Segment("accelerate", (target - v) / 3.6 / 1.5 + 3.0, target))
        else:
            new.append(Segment("brake", (v - target) / 3.6 / 2.0 + 3.0, target))
        new.append(Segment("cruise", float(rng.uniform(10, 40)), target))
        r = rng.random()
        if r < 0.35:
            slow = float(rng.uniform(15, 35))
            new.append(Segment("brake", max(target - slow, 0) / 3.6 / 2.0 + 2.0, slow))
            new.append(Segment("turn", float(rng.uniform(6, 12)), slow))
            v = slow
        elif r < 0.6:
            new.append(Segment("brake", target / 3.6 / 2.5 + 3.0, 0.0))
            new.append(Segment("stop", float(rng.uniform(3, 10))))
            v = 0.0
        else:
            v = target
        for s in new:
            segs.append(s)
            total += s.duration
    return segs


# --------------------------------------------------------------------------- vehicle model


@dataclass
class VehicleState:
    """Ground-truth trace sampled every ``DT`` seconds."""

    time: np.ndarray
    speed: np.ndarray  # km/h
    accel: np.ndarray  # m/s^2
    wheels: np.ndarray  # (n, 4) km/h
    rpm: np.ndarray
    gear: np.ndarray
    pedal: np.ndarray  # %
    torque: np.ndarray  # %
    brake_pressure: np.ndarray  # bar
    brake: np.ndarray
    steering: np.ndarray  # deg
    steering_speed: np.ndarray  # deg/s
    yaw_rate: np.ndarray  # deg/s
    lat_accel: np.ndarray
    coolant: np.ndarray  # C
    battery: np.ndarray  # V
    odometer: np.ndarray  # km
    segment: list = field(default_factory=list)  # segment kind per step

    def __len__(self) -> int:
        return len(self.time)


def _segment_plan(profile: SynthProfile, rng) -> list[Segment]:
    if profile.mode == "parked":
        return [Segment("stop", profile.duration)]
    return list(profile.segments) or random_cycle(profile.duration, rng)


def simulate(profile: SynthProfile) -> VehicleState:
    rng = np.random.default_rng(profile.seed)
    plan = _segment_plan(profile, rng)
    n = int(round(profile.duration / DT)) + 1
    parked = profile.mode == "parked"

    bounds = np.cumsum([s.duration for s in plan])
    seg_idx = np.minimum(np.searchsorted(bounds, np.arange(n) * DT, side="right"), len(plan) - 1)
    seg_start = np.concatenate([[0.0], bounds[:-1]])

    speed = np.zeros(n)
    accel = np.zeros(n)
    steer = np.zeros(n)
    kinds = []
    v = a = s_noise = cruise_noise = 0.0
    jerk = 2.5 * DT
    for i in range(n):
        seg = plan[seg_idx[i]]
        kinds.append(seg.kind)
        target = seg.target_kmh / 3.6
        if seg.kind == "cruise":
            cruise_noise += -cruise_noise * DT / 5.0 + 0.35 * np.sqrt(DT) * rng.standard_normal()
            target += cruise_noise
        a_des = float(np.clip(0.6 * (target - v), -3.5, 2.0))
        a += float(np.clip(a_des - a, -jerk, jerk))
        v = max(v + a * DT, 0.0)
        if v == 0.0 and a < 0:
            a = 0.0
        speed[i], accel[i] = v * 3.6, a
        if seg.kind == "turn":
            phase = (i * DT - seg_start[seg_idx[i]]) / seg.duration
            amp = 90.0 + 270.0 * ((seg_idx[i] * 7919 + profile.seed) % 100) / 100.0
            steer[i] = amp * np.sin(2 * np.pi * phase)
        elif not parked:
            s_noise += -s_noise * DT / 2.0 + 1.0 * np.sqrt(DT) * rng.standard_normal()
            steer[i] = s_noise

    t = np.arange(n) * DT
    gear = np.zeros(n, dtype=int)
    if not parked:
        g = 1
        for i in range(n):
            up = GEAR_UPSHIFT_KMH[g - 1] if g <= len(GEAR_UPSHIFT_KMH) else np.inf
            down = GEAR_UPSHIFT_KMH[g - 2] - 5.0 if g >= 2 else -np.inf
            if speed[i] > up:
                g += 1
            elif speed[i] < down:
                g -= 1
            gear[i] = g

    pedal = np.where(accel > 0.05, 12.0 + 18.0 * accel, np.where(speed > 1.0, 6.0, 0.0))
    pedal = np.clip(pedal + 0.3 * rng.standard_normal(n) * (pedal > 0), 0, 100)
    torque = np.clip(np.convolve(pedal, np.ones(10) / 10, mode="full")[:n] * 0.9 + 4.0, 0, 99.6)
    ratio = np.take(GEAR_RPM_PER_KMH, gear)
    rpm = np.maximum(speed * ratio, IDLE_RPM) + 12.0 * pedal + 8.0 * rng.standard_normal(n)
    rpm = np.clip(rpm, 0, 8000)

    stopped = speed < 0.1
    braking = accel < -0.3
    brake_pressure = np.where(braking, -accel * 15.0, 0.0) + np.where(stopped & (gear > 0), 8.0, 0.0)
    brake_pressure = np.clip(brake_pressure + 0.05 * rng.standard_normal(n) * (brake_pressure > 0), 0, 400)
    brake = (brake_pressure > 0.5).astype(float)

    slip = rng.uniform(-0.005, 0.005, size=4)
    wheel_noise = np.clip(0.002 * rng.standard_normal((n, 4)), -0.01, 0.01)
    wheels = speed[:, None] * (1.0 + slip[None, :] + wheel_noise)

    steer = np.clip(steer, -1024, 1023)
    steering_speed = np.clip(np.abs(np.gradient(steer, DT)), 0, 1016)
    vm = speed / 3.6
    yaw = np.degrees(vm * np.tan(np.radians(steer / STEERING_RATIO)) / WHEELBASE_M)
    yaw = np.clip(yaw, -40.95, 40.96)
    lat = np.clip(vm * np.radians(yaw), -10.23, 10.24)

    tau = 150.0
    heat = 90.0 + 0.0005 * (rpm - IDLE_RPM)
    coolant = np.empty(n)
    c = profile.coolant_start
    for i in range(n):
        c += DT * (heat[i] - c) / tau
        coolant[i] = c
    coolant = coolant + 0.1 * rng.standard_normal(n)
    battery = 14.1 + 0.05 * rng.standard_normal(n)
    odometer = profile.odometer_start + np.cumsum(vm * DT) / 1000.0

    return VehicleState(t, speed, accel, wheels, rpm, gear, pedal, torque, brake_pressure, brake, steer,
                        steering_speed, yaw, lat, coolant, battery, odometer, kinds)


# --------------------------------------------------------------------------- transmitter


def _signal_values(aid: int, st: VehicleState, i: int, k: int) -> dict[str, float]:
    """Physical values (checksums excluded) for frame ``k`` of stream ``aid`` at step ``i``."""
    if aid == 0x043:
        return {"DATC_SetTemp": 22.0, "DATC_Mode": 3, "DATC_Reserved": 0}
    if aid == 0x080:
        return {"PV_AV_CAN": st.pedal[i], "N": st.rpm[i], "TQI_ACOR": st.torque[i], "ALIVE_CNT": k % 16}
    if aid == 0x111:
        return {"G_SEL_DISP": st.gear[i], "VS_TCU": round(st.speed[i]), "TCU_ALIVE": k % 16}
    if aid == 0x164:
        return {"BRAKE_ACT": st.brake[i], "BRAKE_PRES": st.brake_pressure[i], "ESC_AliveCnt": k % 16}
    if aid == 0x220:
        return {"LAT_ACCEL": st.lat_accel[i], "LONG_ACCEL": st.accel[i], "YAW_RATE": st.yaw_rate[i],
                "ESP12_AliveCounter": k % 16}
    if aid == 0x2B0:
        return {"SAS_Angle": st.steering[i], "SAS_Speed": st.steering_speed[i], "MsgCount": k % 16}
    if aid == 0x316:
        return {"VS": st.speed[i], "N": st.rpm[i]}
    if aid == 0x329:
        return {"TEMP_ENG": st.coolant[i]}
    if aid == 0x386:
        w = st.wheels[i]
        return {"WHL_SPD_FL": w[0], "WHL_SPD_FR": w[1], "WHL_SPD_RL": w[2], "WHL_SPD_RR": w[3],
                "WHL_SPD_AliveCounter_LSB": k % 4, "WHL_SPD_AliveCounter_MSB": (k // 4) % 4}
    if aid == 0x4F1:
        whole = np.floor(st.speed[i] * 2) / 2
        return {"CF_Clu_Vanz": whole, "CF_Clu_VanzDecimal": min(round((st.speed[i] - whole) / 0.125) * 0.125, 0.375),
                "CF_Clu_AliveCnt1": k % 16}
    if aid == 0x545:
        return {"BAT_V": st.battery[i]}
    if aid == 0x5B0:
        return {"CF_Clu_Odometer": st.odometer[i]}
    raise KeyError(aid)


def _checksum(aid: int, payload: bytes) -> int:
    return (aid + sum(payload)) & 0xF


def _encode(spec: MessageSpec, values: dict[str, float]) -> bytes:
    payload = bytearray(spec.dlc)
    for sig in spec.signals:
        if sig.name in values:
            v = min(max(float(values[sig.name]), sig.minimum), sig.maximum)
            insert_bits(payload, sig, encode_value(v, sig, spec.aid))
    names = {s.name for s in spec.signals}
    cs = _checksum(spec.aid, payload)
    for name in names - set(values):
        sig = spec.signal(name)
        if name.endswith("_LSB"):
            insert_bits(payload, sig, cs & 3)
        elif name.endswith("_MSB"):
            insert_bits(payload, sig, cs >> 2)
        else:
            insert_bits(payload, sig, cs)
    return bytes(payload)


@dataclass
class SynthResult:
    db: CanDatabase
    log: list[CanMessage]
    state: VehicleState
    profile: SynthProfile
    correlated: dict = field(default_factory=lambda: dict(CORRELATED_GROUPS))

    def time_of(self, seconds: float) -> float:
        """Absolute log time of a simulation-relative instant."""
        return self.profile.start_time + seconds


def transmit(db: CanDatabase, state: VehicleState, profile: SynthProfile, iface: str = "can0") -> list[CanMessage]:
    rng = np.random.default_rng(profile.seed + 7_777)
    t0 = seconds_to_us(profile.start_time)
    end = seconds_to_us(profile.duration)
    dt_us = seconds_to_us(DT)
    frames = []
    for aid, spec in db.messages.items():
        period = PERIODS_MS[aid] * 1000
        phase = int(rng.integers(0, period))
        nominal = np.arange(phase, end, period, dtype=np.int64)
        jitter = np.clip(rng.normal(0.0, profile.jitter_us, size=len(nominal)), -period / 4, period / 4)
        stamps = np.clip(nominal + np.round(jitter).astype(np.int64), 0, end)
        for k, ts in enumerate(stamps):
            i = min(int(ts // dt_us), len(state) - 1)
            frames.append((int(ts) + t0, aid, _encode(spec, _signal_values(aid, state, i, k))))
    frames.sort(key=lambda f: (f[0], f[1]))
    return [CanMessage(ts, aid, data, iface) for ts, aid, data in frames]


def simulate_traffic(profile: SynthProfile) -> SynthResult:
    db = synthetic_database()
    state = simulate(profile)
    return SynthResult(db, transmit(db, state, profile), state, profile)


def generate(profile: SynthProfile) -> tuple[CanDatabase, list[CanMessage]]:
    res = simulate_traffic(profile)
    return res.db, res.log
