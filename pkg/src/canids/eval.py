"""Scoring: confusion metrics, ROC/AUC, throughput, and an end-to-end attack
campaign on synthetic traffic."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attack
from .canlog import US_PER_S
from .dbc import SignalSelection, select_signals
from .detect import DetectionResult, Detector, calibrate, write_report
from .model import ModelConfig, TrainedModel, train
from .pipeline import sample_log
from .synth import SynthProfile, correlated_with, simulate_traffic

logger = logging.getLogger(__name__)

POSITIVE = "attack"
NEGATIVE = "benign"


@dataclass
class ExperimentReport:
    name: str
    kind: str = ""
    aid: str = ""
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    auc: float | None = None
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    latency_mean: float | None = None
    latency_p50: float | None = None
    latency_p95: float | None = None
    latency_p99: float | None = None
    throughput: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def confusion(alarms: Sequence[bool], labels: Sequence[str]) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with attack as the positive class; unlabeled windows skipped."""
    tp = fp = tn = fn = 0
    for a, lab in zip(alarms, labels):
        if lab == POSITIVE:
            tp += bool(a)
            fn += not a
        elif lab == NEGATIVE:
            fp += bool(a)
            tn += not a
    return tp, fp, tn, fn


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) sweeping every distinct score, highest first.

    A window alarms when its score is >= the threshold, so tied scores enter
    together and the trapezoid over their joint step counts ties as one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray([lab == POSITIVE if isinstance(lab, str) else bool(lab) for lab in labels])
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # end of each tie group
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return fpr, tpr, np.r_[np.inf, s[last]]


def roc_auc(scores, labels) -> tuple[tuple[np.ndarray, np.ndarray, np.ndarray], float]:
    fpr, tpr, thr = roc_curve(scores, labels)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return (fpr, tpr, thr), auc


def align(results: Sequence[DetectionResult], label_times: Sequence[int], labels: Sequence[str]) -> list[str]:
    """Labels in result order, matched on window end time."""
    by_time = dict(zip((int(t) for t in label_times), labels))
    if len(by_time) != len(labels):
        raise ValueError("duplicate window end times in labels")
    try:
        return [by_time[r.window_end_time_us] for r in results]
    except KeyError as exc:
        raise ValueError(f"no label for window ending at {exc.args[0]} us") from None


def percentiles(values: Sequence[float]) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return {}
    p50, p95, p99 = np.percentile(v, [50, 95, 99])
    return {"latency_mean": float(v.mean()), "latency_p50": float(p50), "latency_p95": float(p95),
            "latency_p99": float(p99)}


def score(results: Sequence[DetectionResult], labels: Sequence[str], name: str = "", kind: str = "",
          aid: str = "", label_times: Sequence[int] | None = None, latencies: Sequence[float] | None = None,
          throughput: float | None = None) -> ExperimentReport:
    """Confusion metrics (and AUC over max rate when both classes are present)."""
    if label_times is not None:
        labels = align(results, label_times, labels)
    elif len(labels) != len(results):
        raise ValueError(f"{len(results)} results but {len(labels)} labels")
    tp, fp, tn, fn = confusion([r.alarm for r in results], labels)
    p, r, f1 = prf(tp, fp, fn)
    scored = [(res.max_rate, lab) for res, lab in zip(results, labels) if lab in (POSITIVE, NEGATIVE)]
    auc = None
    if tp + fn and fp + tn:
        _, auc = roc_auc([s for s, _ in scored], [lab for _, lab in scored])
    rep = ExperimentReport(name, kind, aid, p, r, f1, auc, tp, fp, tn, fn, throughput=throughput)
    for k, v in percentiles(latencies or []).items():
        setattr(rep, k, v)
    return rep


# --------------------------------------------------------------------------- throughput


@dataclass(frozen=True)
class ThroughputRow:
    batch_size: int
    samples_per_s: float
    ms_per_sample: float


def bench_throughput(model: TrainedModel, batch_sizes: Sequence[int] = (1, 8, 64), repeats: int = 5,
                     seed: int = 0, min_time: float = 0.05) -> list[ThroughputRow]:
    """Median wall-clock inference rate per batch size, after one warm-up call.

    Each measurement loops the batch until ``min_time`` has elapsed so that
    tiny batches are not dominated by timer resolution.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    for batch_size in batch_sizes:
        batch = rng.random((batch_size, model.w, model.x))
        model.reconstruct(batch)
        per_sample = []
        for _ in range(repeats):
            n, start = 0, time.perf_counter()
            while True:
                model.reconstruct(batch)
                n += 1
                elapsed = time.perf_counter() - start
                if elapsed >= min_time:
                    break
            per_sample.append(elapsed / (n * batch_size))
        sec = float(np.median(per_sample))
        rows.append(ThroughputRow(batch_size, 1.0 / sec, 1000.0 * sec))
    return rows


def throughput_csv(rows: Sequence[ThroughputRow]) -> str:
    out = ["batch_size,samples_per_s,ms_per_sample"]
    out += [f"{r.batch_size},{r.samples_per_s:.4f},{r.ms_per_sample:.4f}" for r in rows]
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------- campaign


def _scenario() -> list:
    return [["stop", 4, 0], ["accelerate", 15, 60], ["cruise", 70, 60], ["brake", 10, 30], ["turn", 10, 30],
            ["accelerate", 10, 80], ["cruise", 20, 80], ["brake", 15, 0], ["stop", 5, 0]]


WHEELS = ("WHL_SPD_FL", "WHL_SPD_FR", "WHL_SPD_RL", "WHL_SPD_RR")


def default_campaign() -> dict:
    """Desk-scale campaign: random drives for training/validation, a scripted
    test drive with a long 60 km/h cruise hosting every attack."""
    period = [35.0, 75.0]
    return {
        "train_profile": {"duration": 600, "seed": 1},
        "val_profile": {"duration": 240, "seed": 2},
        "test_profile": {"duration": 159, "seed": 3, "segments": _scenario()},
        "t": 0.01,
        "w": 32,
        "train_stride": 4,
        "q": 0.99,
        "model": {"layer_family": "dense", "encoder_widths": [128], "latent_dim": 32, "decoder_widths": [128],
                  "learning_rate": 1e-3, "max_epochs": 40, "early_stop_patience": 5, "seed": 0,
                  "batch_size_train": 64},
        "plans": [
            {"kind": "fabrication", "start": period[0], "end": period[1], "seed": 11,
             "params": {"aid": "316", "payload": {"mode": "override", "signals": {"VS": 200.0}}}},
            {"kind": "masquerade", "start": period[0], "end": period[1], "seed": 12,
             "params": {"aid": "386", "payload": {"mode": "override", "signals": {k: 20.0 for k in WHEELS}}}},
            {"kind": "fuzzing", "start": period[0], "end": period[1], "seed": 13, "params": {"rate": 45.0}},
            {"kind": "suspension", "start": period[0], "end": period[1], "seed": 14, "params": {"aid": "316"}},
            {"kind": "replay", "start": period[0], "end": period[1], "seed": 15, "params": {"capture": [100.0, 120.0]}},
        ],
    }


@dataclass
class Experiment:
    plan: attack.AttackPlan
    attacked: attack.LabeledLog
    results: list[DetectionResult]
    labels: list[str]
    report: ExperimentReport
    window_min: float
    window_max: float
    bus_load: float


@dataclass
class CampaignResult:
    config: dict
    selection_names: list[str]
    model: TrainedModel
    detector: Detector
    val_false_alarm_rate: float
    n_val_windows: int
    benign: ExperimentReport
    experiments: list[Experiment]
    base_rate: float
    selection: SignalSelection | None = None

    def table_csv(self) -> str:
        """Attack kind x target x metrics, one row per experiment."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["experiment", "kind", "aid", "start_s", "end_s", "bus_load_pct", "tp", "fp", "tn", "fn",
                     "precision", "recall", "f1", "auc", "explained"])
        for e in self.experiments:
            r = e.report
            wr.writerow([r.name, r.kind, r.aid, e.plan.start, e.plan.end, f"{e.bus_load:.4f}", r.tp, r.fp, r.tn,
                         r.fn, f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}",
                         "" if r.auc is None else f"{r.auc:.6f}", f"{r.extra.get('explained', 0.0):.6f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "selection": self.selection_names,
            "threshold": self.detector.threshold,
            "q": self.detector.q,
            "best_epoch": self.model.best_epoch,
            "history": [list(h) for h in self.model.history],
            "base_rate": self.base_rate,
            "val_false_alarm_rate": self.val_false_alarm_rate,
            "n_val_windows": self.n_val_windows,
            "benign": self.benign.to_dict(),
            "experiments": [e.report.to_dict() for e in self.experiments],
        }

    def write(self, outdir) -> list[Path]:
        """Write every report; all content is independent of wall-clock time."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "campaign.json", out / "table.csv"]
        paths[0].write_text(json.dumps(self.summary(), sort_keys=True, indent=1) + "\n")
        paths[1].write_text(self.table_csv())
        for e in self.experiments:
            p = out / f"{e.report.name}.jsonl"
            write_report(p, e.results)
            paths.append(p)
            lp = out / f"{e.report.name}.labels.csv"
            attack.write_labels(lp, [r.window_end_time_us for r in e.results], e.labels)
            paths.append(lp)
        return paths


def explained_fraction(results: Sequence[DetectionResult], target: str) -> float:
    """Share of alarmed windows whose argmax signal is ``target`` or correlated with it."""
    allowed = correlated_with(target)
    alarmed = [r for r in results if r.alarm]
    if not alarmed:
        return 0.0
    return sum(r.argmax_name in allowed for r in alarmed) / len(alarmed)


def _target_signal(plan: attack.AttackPlan) -> str | None:
    p = plan.params
    payload = p.get("payload", {})
    aid = p.get("aid")
    if aid is None:
        return None
    aid = int(aid, 16) if isinstance(aid, str) else int(aid)
    name = payload.get("signal") or next(iter(payload.get("signals", {})), None)
    return f"{aid:03X}_{name}" if name else None


def run_campaign(cfg: dict | None = None, outdir=None, progress=None) -> CampaignResult:
    """Train, calibrate and attack on synthetic traffic; score every plan.

    Every emitted window is checked to lie in [0, 1].
    """
    cfg = default_campaign() if cfg is None else cfg
    say = progress or (lambda msg: logger.info(msg))
    t, w, stride = float(cfg["t"]), int(cfg["w"]), int(cfg.get("train_stride", 1))

    tr = simulate_traffic(SynthProfile.from_dict(cfg["train_profile"]))
    va = simulate_traffic(SynthProfile.from_dict(cfg["val_profile"]))
    te = simulate_traffic(SynthProfile.from_dict(cfg["test_profile"]))
    db = tr.db
    selection = select_signals(db, tr.log)
    say(f"selected {len(selection)} signals")

    S_tr = sample_log(tr.log, db, selection, t)
    S_va = sample_log(va.log, db, selection, t)
    for series in (S_tr, S_va):
        _check_unit(series.values)
    X_tr = np.ascontiguousarray(S_tr.windows(w)[::stride])
    X_va_all = np.ascontiguousarray(S_va.windows(w))
    X_va = X_va_all[::stride]
    say(f"training on {len(X_tr)} windows, validating on {len(X_va)}")

    mcfg = ModelConfig.from_dict(cfg["model"])
    model = train(X_tr, X_va, mcfg, t_us=S_tr.t_us, selection_hash=selection.hash,
                  callback=lambda e, a, b: say(f"epoch {e} train {a:.4e} val {b:.4e}"))
    detector = calibrate(model, X_tr, X_va_all, float(cfg["q"]), selection.names)
    val_alarms = detector.rates(X_va_all).max(axis=1) > detector.threshold
    far = float(np.mean(val_alarms))
    say(f"threshold {detector.threshold:.4f}, validation false-alarm rate {far:.4f}")

    base_rate = attack.bus_rate(te.log)
    S_te = sample_log(te.log, db, selection, t)
    _check_unit(S_te.values)
    benign_res = detector.evaluate_batch(np.ascontiguousarray(S_te.windows(w)), S_te.window_end_times(w),
                                         S_te.window_violations(w))
    benign = score(benign_res, [NEGATIVE] * len(benign_res), name="benign")

    experiments = []
    for k, d in enumerate(cfg["plans"]):
        plan = attack.AttackPlan.from_dict(d)
        attacked = attack.run_plan(te.log, plan, db)
        series = sample_log(attacked.messages, db, selection, t, attacked.injected)
        _check_unit(series.values)
        ends = series.window_end_times(w)
        labels = attack.label_windows(ends, series.window_tainted(w), attacked, series.t_us, w)
        results = detector.evaluate_batch(np.ascontiguousarray(series.windows(w)), ends, series.window_violations(w))
        aid = d.get("params", {}).get("aid", "")
        name = f"{k + 1:02d}_{plan.kind}" + (f"_{aid}" if aid else "")
        rep = score(results, labels, name=name, kind=plan.kind, aid=str(aid))
        target = _target_signal(plan)
        if target is not None:
            rep.extra["target"] = target
            rep.extra["explained"] = explained_fraction(results, target)
        span = (attacked.period_us[1] - attacked.period_us[0]) / US_PER_S
        n_inj = attacked.n_injected if plan.kind != "masquerade" else 0
        load = attack.bus_load(base_rate, n_inj / span) if plan.kind in ("fuzzing", "replay") else 100.0
        experiments.append(Experiment(plan, attacked, results, labels, rep, float(series.values.min()),
                                      float(series.values.max()), load))
        say(f"{name}: precision {rep.precision:.4f} recall {rep.recall:.4f} f1 {rep.f1:.4f} auc {rep.auc}")

    result = CampaignResult(cfg, selection.names, model, detector, far, len(X_va_all), benign, experiments,
                            base_rate, selection)
    if outdir is not None:
        result.write(outdir)
    return result


def _check_unit(values: np.ndarray) -> None:
    if values.size and not (values.min() >= 0.0 and values.max() <= 1.0):
        raise AssertionError(f"scaled values escape [0, 1]: [{values.min()}, {values.max()}]")
