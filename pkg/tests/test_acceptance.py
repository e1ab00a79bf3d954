"""One test per acceptance criterion. Each prints a PASS/FAIL line; the lines
are repeated in the terminal summary."""

import time

import numpy as np
import pytest

from canids.canlog import payload_dynamics
from canids.dbc import BIG_ENDIAN, LITTLE_ENDIAN, CanDatabase, SignalSpec
from canids.deserialize import decode_signal, deserialize_message, extract_bits, serialize_message
from canids.detect import latency_model, stream_detect
from canids.eval import default_campaign, run_campaign
from canids.model import Autoencoder, ModelConfig, global_mse, gradient_check, signalwise_mse
from canids.pipeline import FeatureGenerator
from canids.synth import SynthProfile, simulate_traffic
from conftest import CRITERIA
from oracles import oracle_physical, oracle_raw, random_layout, random_message


def verdict(n: int, ok: bool, detail: str) -> None:
    CRITERIA.append((n, bool(ok), detail))
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def campaign(tmp_path_factory):
    out = tmp_path_factory.mktemp("campaign_a")
    start = time.perf_counter()
    result = run_campaign(outdir=out)
    return result, out, time.perf_counter() - start


def experiment(result, kind):
    return next(e for e in result.experiments if e.plan.kind == kind)


def test_criterion_01_deserializer_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    cases = mismatches = 0
    for order in (LITTLE_ENDIAN, BIG_ENDIAN):
        le = order == LITTLE_ENDIAN
        for _ in range(10_000):
            n = int(rng.integers(1, 9))
            s, length = random_layout(rng, le, n)
            signed = bool(rng.integers(0, 2))
            scale, offset = float(rng.choice([1.0, 0.1, 0.03125, -0.5])), float(rng.choice([0.0, -40.0, 7.25]))
            spec = SignalSpec("S", s, length, order, signed, scale, offset)
            payload = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
            ok = (extract_bits(payload, spec) == oracle_raw(payload, s, length, le)
                  and decode_signal(payload, spec) == oracle_physical(payload, s, length, le, signed, scale, offset))
            mismatches += not ok
            cases += 1
    elapsed = time.perf_counter() - start
    verdict(1, mismatches == 0 and elapsed < 10.0,
            f"{cases} cases (10000 per byte order), {mismatches} mismatches, {elapsed:.2f} s")


def test_criterion_02_round_trip():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    vectors = signals = worst = 0
    bad = 0
    while vectors < 10_000:
        m = random_message(rng)
        if not m.signals:
            continue
        db = CanDatabase({1: m})
        values = [float(rng.uniform(s.minimum, s.maximum)) for s in m.signals]
        back = deserialize_message(1, serialize_message(values, m), db)
        for v, b, s in zip(values, back, m.signals):
            err = abs(v - b)
            # scale/2 plus a few ulps of the operands for the float subtraction itself
            limit = abs(s.scale) / 2 + 4 * np.finfo(float).eps * max(abs(v), abs(b), 1.0)
            bad += err > limit
            worst = max(worst, err / abs(s.scale))
            signals += 1
        vectors += 1
    elapsed = time.perf_counter() - start
    verdict(2, bad == 0 and elapsed < 10.0,
            f"{vectors} vectors / {signals} signals, max error {worst:.6f} x scale, {bad} over scale/2, "
            f"{elapsed:.2f} s")


def test_criterion_03_scaler_totality(campaign):
    result, _, _ = campaign
    # run_campaign asserts [0, 1] on every sampled tick of the benign and attack logs as it goes
    lo = min(e.window_min for e in result.experiments)
    hi = max(e.window_max for e in result.experiments)
    kinds = sorted(e.plan.kind for e in result.experiments)
    ok = 0.0 <= lo and hi <= 1.0 and len(kinds) == 5
    verdict(3, ok, f"benign train/val/test + {len(kinds)} attack logs ({', '.join(kinds)}), entries in [{lo}, {hi}]")


def test_criterion_04_loss_identity():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        w, x = int(rng.integers(1, 160)), int(rng.integers(1, 110))
        S, S2 = rng.random((w, x)), rng.random((w, x))
        worst = max(worst, abs(float(signalwise_mse(S, S2).mean()) - global_mse(S, S2)))
    verdict(4, worst <= 1e-12, f"1000 random pairs, max |mean signalwise loss - global MSE| = {worst:.3e}")


def test_criterion_05_gradient_checks():
    start = time.perf_counter()
    rng = np.random.default_rng(505)
    S = rng.random((3, 6, 4))
    errs = {}
    for family, widths in (("dense", ((16,), 8, (16,))), ("lstm", ((8,), 6, (8,))), ("bilstm", ((8,), 6, (8,)))):
        net = Autoencoder(ModelConfig(family, *widths, seed=5), 6, 4)
        errs[family] = gradient_check(net, S, n_params=100, eps=1e-5, seed=1)
    elapsed = time.perf_counter() - start
    ok = errs["dense"] < 1e-4 and errs["lstm"] < 1e-3 and errs["bilstm"] < 1e-3 and elapsed < 60.0
    verdict(5, ok, "max rel err over 100 params: " + ", ".join(f"{k} {v:.2e}" for k, v in errs.items())
            + f"; {elapsed:.1f} s")


def test_criterion_06_calibration(campaign):
    result, _, _ = campaign
    n, far, q = result.n_val_windows, result.val_false_alarm_rate, result.detector.q
    ok = q == 0.99 and n >= 2000 and far <= 0.01 + 1 / 2000
    verdict(6, ok, f"q={q}, {n} validation windows, false-alarm rate {far:.5f} <= {0.01 + 1 / 2000:.5f}")


def test_criterion_07_desk_scale_detection(campaign):
    result, _, elapsed = campaign
    cfg = result.config
    fab, mas, fuz = (experiment(result, k) for k in ("fabrication", "masquerade", "fuzzing"))
    setup = (len(result.selection_names) >= 16 and cfg["t"] == 0.01 and cfg["w"] == 32
             and cfg["model"]["layer_family"] in ("dense", "lstm")
             and fab.plan.params["payload"]["signals"] == {"VS": 200})
    ok = (setup and fab.report.auc >= 0.95 and mas.report.auc >= 0.90 and fuz.report.auc >= 0.95
          and fuz.bus_load >= 105.0)
    verdict(7, ok, f"{len(result.selection_names)} signals, campaign {elapsed:.0f} s; AUC fabrication "
            f"{fab.report.auc:.4f}, masquerade {mas.report.auc:.4f}, fuzzing {fuz.report.auc:.4f} "
            f"at {fuz.bus_load:.2f}% bus load")


def test_criterion_08_suspension_weakness(campaign):
    result, _, _ = campaign
    fab, sus = experiment(result, "fabrication"), experiment(result, "suspension")
    same = fab.plan.params["aid"] == sus.plan.params["aid"]
    ok = same and fab.report.recall > 0 and sus.report.recall * 2 <= fab.report.recall
    verdict(8, ok, f"stream {sus.plan.params['aid']}: suspension recall {sus.report.recall:.4f} vs "
            f"fabrication recall {fab.report.recall:.4f}")


def test_criterion_09_payload_dynamics():
    totals = []
    for seed in range(5):
        drive = simulate_traffic(SynthProfile(duration=60.0, seed=seed, mode="driving"))
        park = simulate_traffic(SynthProfile(duration=60.0, seed=seed, mode="parked"))
        totals.append((payload_dynamics(drive.log).total, payload_dynamics(park.log).total))
    ok = all(d > p for d, p in totals)
    verdict(9, ok, "driving vs parked payload dynamics over 60 s: " + ", ".join(f"{d:.1f}>{p:.1f}" for d, p in totals))


def test_criterion_10_latency_model(campaign):
    result, _, _ = campaign
    det = result.detector
    test = simulate_traffic(SynthProfile.from_dict(result.config["test_profile"]))
    origin = test.log[0].timestamp_us
    log = [m for m in test.log if m.timestamp_us < origin + 15_000_000]
    gen = FeatureGenerator(test.db, result.selection, det.model.t_us / 1e6, det.model.w)
    batch = 8
    _, trace = stream_detect(log, gen, det, batch_size=batch, realtime=True)
    t = det.model.t_us / 1e6
    t_alpha = float(np.mean(trace.t_alpha))
    predicted = latency_model(t, t_alpha, trace.t_beta, batch, (batch - 1) / 2)
    measured = float(np.percentile(trace.latencies, 50))
    rel = abs(measured - predicted) / predicted
    verdict(10, rel <= 0.20, f"B={batch}, {len(trace.latencies)} windows: p50 {1e3 * measured:.3f} ms vs model "
            f"{1e3 * predicted:.3f} ms (t_alpha {1e3 * t_alpha:.3f} ms, t_beta {1e3 * trace.t_beta:.3f} ms), "
            f"off by {100 * rel:.1f}%")


def test_criterion_11_explanation(campaign):
    result, _, _ = campaign
    fab = experiment(result, "fabrication")
    frac = fab.report.extra["explained"]
    n_alarms = sum(r.alarm for r in fab.results)
    verdict(11, frac >= 0.80, f"{n_alarms} alarms on the speed fabrication, {100 * frac:.1f}% name 316_VS "
            "or a correlated signal")


def test_criterion_12_determinism(campaign, tmp_path_factory):
    _, first, _ = campaign
    second = tmp_path_factory.mktemp("campaign_b")
    run_campaign(default_campaign(), outdir=second)
    names_a = sorted(p.name for p in first.iterdir())
    names_b = sorted(p.name for p in second.iterdir())
    differ = [n for n in names_a if n in names_b and (first / n).read_bytes() != (second / n).read_bytes()]
    ok = names_a == names_b and not differ
    verdict(12, ok, f"{len(names_a)} report files compared byte for byte, {len(differ)} differ")
