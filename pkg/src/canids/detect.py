"""Thresholds, alarms and signal-level explanations.

Per-signal thresholds come from training-set loss statistics
(mean + 3 population std). Error rates are losses divided by those
thresholds, and the alarm threshold is a nearest-rank percentile of the
per-window maximum error rate on validation data.
"""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .canlog import US_PER_S
from .container import read_container, write_container
from .model import TrainedModel, signalwise_mse

THETA_FLOOR = 1e-9


@dataclass(frozen=True)
class SignalThresholds:
    theta: np.ndarray
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class DetectionThreshold:
    value: float
    q: float


@dataclass
class DetectionResult:
    window_end_time_us: int
    alarm: bool
    rates: np.ndarray
    max_rate: float
    argmax_index: int  # 1-based global signal index
    argmax_name: str
    top_k: list[tuple[int, str, float]] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    @property
    def window_end_time(self) -> float:
        return self.window_end_time_us / US_PER_S

    def to_record(self) -> str:
        return json.dumps({
            "window_end_time": f"{self.window_end_time_us // US_PER_S}.{self.window_end_time_us % US_PER_S:06d}",
            "alarm": self.alarm,
            "max_rate": self.max_rate,
            "argmax_index": self.argmax_index,
            "argmax_name": self.argmax_name,
            "topk": [[name, rate] for _, name, rate in self.top_k],
            "violations": self.violations,
        })

    @classmethod
    def from_record(cls, line: str) -> "DetectionResult":
        """Parse a report line; the full rate vector is not part of the record."""
        d = json.loads(line)
        sec, _, frac = d["window_end_time"].partition(".")
        end_us = int(sec) * US_PER_S + int(frac.ljust(6, "0"))
        top = [(0, name, float(rate)) for name, rate in d.get("topk", [])]
        return cls(end_us, bool(d["alarm"]), np.array([]), float(d["max_rate"]), int(d["argmax_index"]),
                   d["argmax_name"], top, list(d.get("violations", [])))


def fit_signal_thresholds(losses) -> SignalThresholds:
    """theta_i = mean_i + 3 std_i over a set of loss vectors (rows)."""
    L = np.asarray(losses, dtype=np.float64)
    if L.ndim != 2 or len(L) == 0:
        raise ValueError("need a nonempty (n, x) array of loss vectors")
    mean = L.mean(axis=0)
    std = L.std(axis=0)
    theta = np.maximum(mean + 3.0 * std, THETA_FLOOR)
    return SignalThresholds(theta, mean, std)


def error_rate(losses, theta) -> np.ndarray:
    theta = getattr(theta, "theta", theta)
    return np.asarray(losses, dtype=np.float64) / theta


def nearest_rank(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("empty sample")
    # subtract a hair so that q * n landing on an integer is not pushed up by rounding
    rank = max(1, math.ceil(q * len(v) - 1e-9))
    return float(v[rank - 1])


def fit_detection_threshold(rates, q: float) -> DetectionThreshold:
    """Nearest-rank q-th percentile of max(r) over validation windows.

    ``rates`` is either an (n, x) array of error-rate vectors or a 1-D array
    of their maxima.
    """
    if not 0.95 <= q <= 1.0:
        raise ValueError(f"q must lie in [0.95, 1], got {q}")
    rate_rows = np.asarray(rates, dtype=np.float64)
    maxima = rate_rows.max(axis=1) if rate_rows.ndim == 2 else rate_rows
    return DetectionThreshold(nearest_rank(maxima, q), q)


def latency_model(t: float, t_alpha: float, t_beta: float, batch_size: int, pending: float) -> float:
    """Batch-completion wait + feature time + batch inference time."""
    if not 0 <= pending <= batch_size - 1:
        raise ValueError(f"pending must lie in [0, {batch_size - 1}]")
    return pending * t + t_alpha + batch_size * t_beta


class Detector:
    """Trained model plus calibration; stateless at inference."""

    def __init__(self, model: TrainedModel, thresholds: SignalThresholds, threshold: float,
                 names: Sequence[str] | None = None, q: float | None = None):
        self.model = model
        self.q = q
        self.thresholds = thresholds
        self.threshold = float(threshold)
        self.names = list(names) if names is not None else [f"s{i + 1}" for i in range(model.x)]
        if len(self.names) != model.x or len(thresholds.theta) != model.x:
            raise ValueError("signal names / thresholds do not match the model width")

    def rates(self, windows: np.ndarray) -> np.ndarray:
        W = np.asarray(windows, dtype=np.float64)
        return error_rate(signalwise_mse(W, self.model.reconstruct(W)), self.thresholds)

    def result(self, rates: np.ndarray, end_time_us: int, violations=None) -> DetectionResult:
        i = int(np.argmax(rates))  # first maximum -> lowest index wins ties
        max_rate = float(rates[i])
        over = np.flatnonzero(rates > self.threshold)
        over = over[np.argsort(-rates[over], kind="stable")]
        viol = [] if violations is None else [self.names[j] for j in np.flatnonzero(violations)]
        return DetectionResult(end_time_us, max_rate > self.threshold, rates, max_rate, i + 1, self.names[i],
                               [(int(j) + 1, self.names[j], float(rates[j])) for j in over], viol)

    def evaluate(self, window: np.ndarray, end_time_us: int = 0, violations=None) -> DetectionResult:
        return self.result(self.rates(window[None])[0], end_time_us, violations)

    def evaluate_batch(self, windows: np.ndarray, end_times_us: Sequence[int],
                       violations=None, chunk: int = 1024) -> list[DetectionResult]:
        out = []
        for i in range(0, len(windows), chunk):
            rate_rows = self.rates(windows[i:i + chunk])
            for k, row in enumerate(rate_rows):
                v = None if violations is None else violations[i + k]
                out.append(self.result(row, int(end_times_us[i + k]), v))
        return out

    def save(self, path) -> None:
        meta = {"kind": "calibration", "selection_hash": self.model.selection_hash,
                "threshold": self.threshold, "q": self.q, "names": self.names}
        write_container(path, meta, {"theta": self.thresholds.theta, "mean": self.thresholds.mean,
                                     "std": self.thresholds.std})


def evaluate_window(model: TrainedModel, thresholds: SignalThresholds, threshold: float, window: np.ndarray,
                    names: Sequence[str] | None = None) -> DetectionResult:
    return Detector(model, thresholds, threshold, names).evaluate(window)


def calibrate(model: TrainedModel, train_windows: np.ndarray, val_windows: np.ndarray, q: float,
              names: Sequence[str] | None = None, chunk: int = 1024) -> Detector:
    """Fit per-signal thresholds on training windows and the alarm threshold on
    validation windows."""
    def losses(W):
        return np.concatenate([signalwise_mse(W[i:i + chunk], model.reconstruct(W[i:i + chunk]))
                               for i in range(0, len(W), chunk)])

    thresholds = fit_signal_thresholds(losses(train_windows))
    rates = error_rate(losses(val_windows), thresholds)
    dt = fit_detection_threshold(rates, q)
    return Detector(model, thresholds, dt.value, names, q)


def save_calibration(path, detector: Detector) -> None:
    detector.save(path)


def load_calibration(path) -> tuple[dict, SignalThresholds]:
    meta, tensors = read_container(path)
    if meta.get("kind") != "calibration":
        raise ValueError(f"{path}: container holds {meta.get('kind')!r}, not a calibration")
    return meta, SignalThresholds(tensors["theta"], tensors["mean"], tensors["std"])


def load_detector(model_path, calibration_path) -> Detector:
    model = TrainedModel.load(model_path)
    meta, thresholds = load_calibration(calibration_path)
    if meta["selection_hash"] != model.selection_hash:
        raise ValueError("calibration and model were built for different signal selections")
    return Detector(model, thresholds, meta["threshold"], meta["names"], meta.get("q"))


# --------------------------------------------------------------------------- batching


@dataclass(frozen=True)
class LatencySample:
    window_end_time_us: int
    wait_s: float  # batch fill wait
    inference_s: float  # batch inference time
    latency_s: float


def run_detector(windows: Iterable, detector: Detector, batch_size: int = 8, t: float | None = None
                 ) -> Iterator[tuple[DetectionResult, LatencySample]]:
    """Evaluate windows in arrival-order batches of ``batch_size``.

    Offline latency per window = simulated batch-fill wait (windows still
    needed to complete the batch times ``t``) + measured batch inference time.
    ``t`` defaults to the model's sampling interval.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    t = detector.model.t_us / US_PER_S if t is None else t
    batch = []

    def flush():
        mats = np.stack([win.matrix for win in batch])
        start = time.perf_counter()
        rate_rows = detector.rates(mats)
        elapsed = time.perf_counter() - start
        n = len(batch)
        for k, (win, row) in enumerate(zip(batch, rate_rows)):
            wait = (n - 1 - k) * t
            yield (detector.result(row, win.end_time_us, win.violations),
                   LatencySample(win.end_time_us, wait, elapsed, wait + elapsed))
        batch.clear()

    for win in windows:
        batch.append(win)
        if len(batch) == batch_size:
            yield from flush()
    if batch:
        yield from flush()


@dataclass
class StreamTrace:
    t_alpha: list[float] = field(default_factory=list)  # feature generation time per window
    batch_times: list[float] = field(default_factory=list)  # inference time per batch
    latencies: list[float] = field(default_factory=list)  # tick due -> result available
    batch_size: int = 1

    @property
    def t_beta(self) -> float:
        """Mean inference time per sample."""
        return float(np.mean(self.batch_times)) / self.batch_size if self.batch_times else 0.0


def stream_detect(messages: Iterable, generator, detector: Detector, batch_size: int = 8, realtime: bool = False,
                  on_result: Callable[[DetectionResult], None] | None = None, maxsize: int = 1024
                  ) -> tuple[list[DetectionResult], StreamTrace]:
    """Two-thread detection: a producer owns the feature generator and pushes
    windows onto a bounded queue; the consumer batches and evaluates them.

    With ``realtime`` the producer replays message timestamps against the wall
    clock, and latency is measured from each window's due time to the moment
    its batch result is available.
    """
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    trace = StreamTrace(batch_size=batch_size)
    results: list[DetectionResult] = []
    errors: list[BaseException] = []
    done = object()

    def producer():
        try:
            origin_wall = origin_log = None
            for msg in messages:
                if realtime:
                    if origin_wall is None:
                        origin_wall, origin_log = time.perf_counter(), msg.timestamp_us
                    due = origin_wall + (msg.timestamp_us - origin_log) / US_PER_S
                    delay = due - time.perf_counter()
                    if delay > 0:
                        time.sleep(delay)
                t0 = time.perf_counter()
                wins = generator.feed(msg)
                if wins:
                    t_alpha = (time.perf_counter() - t0) / len(wins)
                    for win in wins:
                        if realtime:
                            due_at = origin_wall + (win.end_time_us - origin_log) / US_PER_S
                        else:
                            due_at = t0
                        trace.t_alpha.append(t_alpha)
                        q.put((win, due_at))
            for win in generator.finish():
                q.put((win, time.perf_counter()))
        except BaseException as exc:  # surfaced in the caller thread
            errors.append(exc)
        finally:
            q.put(done)

    def consume(batch):
        mats = np.stack([win.matrix for win, _ in batch])
        start = time.perf_counter()
        rate_rows = detector.rates(mats)
        end = time.perf_counter()
        trace.batch_times.append(end - start)
        for (win, due_at), row in zip(batch, rate_rows):
            res = detector.result(row, win.end_time_us, win.violations)
            trace.latencies.append(end - due_at)
            results.append(res)
            if on_result is not None:
                on_result(res)

    thread = threading.Thread(target=producer, name="feature-generator", daemon=True)
    thread.start()
    batch = []
    while True:
        item = q.get()
        if item is done:
            break
        batch.append(item)
        if len(batch) == batch_size:
            consume(batch)
            batch = []
    if batch:
        consume(batch)
    thread.join()
    if errors:
        raise errors[0]
    return results, trace


# --------------------------------------------------------------------------- exports


def write_report(path, results: Iterable[DetectionResult]) -> int:
    n = 0
    with open(path, "w", newline="\n") as fh:
        for res in results:
            fh.write(res.to_record() + "\n")
            n += 1
    return n


BAND_EDGES = (1e2, 1e3, 1e4)


def rate_band(rates, threshold: float) -> np.ndarray:
    """0 below the alarm threshold, then 1: [threshold, 1e2), 2: [1e2, 1e3),
    3: [1e3, 1e4), 4: >= 1e4."""
    rates = np.asarray(rates)
    band = 1 + np.searchsorted(BAND_EDGES, rates, side="right")
    return np.where(rates >= threshold, band, 0)


def write_heatmap(path, results: Sequence[DetectionResult], names: Sequence[str], threshold: float,
                  mode: str = "rate") -> None:
    """Error rate (or band code) per signal over time, one row per window."""
    if mode not in ("rate", "band"):
        raise ValueError("mode must be 'rate' or 'band'")
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# threshold={threshold!r} bands={','.join(repr(b) for b in BAND_EDGES)}\n")
        fh.write(",".join(["time_us", *names]) + "\n")
        for res in results:
            row = res.rates if mode == "rate" else rate_band(res.rates, threshold)
            cells = [repr(float(v)) for v in row] if mode == "rate" else [str(int(v)) for v in row]
            fh.write(",".join([str(res.window_end_time_us), *cells]) + "\n")
