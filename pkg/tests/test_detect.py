import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from canids.dbc import select_signals
from canids.detect import (
    THETA_FLOOR,
    DetectionResult,
    Detector,
    SignalThresholds,
    calibrate,
    error_rate,
    fit_detection_threshold,
    fit_signal_thresholds,
    latency_model,
    load_detector,
    nearest_rank,
    rate_band,
    run_detector,
    stream_detect,
    write_heatmap,
    write_report,
)
from canids.model import Autoencoder, ModelConfig, TrainedModel
from canids.pipeline import FeatureGenerator, FeatureWindow, sample_log
from oracles import nearest_rank_by_hand


def test_theta_examples():
    assert fit_signal_thresholds(np.ones((5, 1))).theta.tolist() == [1.0]
    assert fit_signal_thresholds([[0.0], [2.0]]).theta.tolist() == [4.0]
    assert fit_signal_thresholds(np.zeros((3, 2))).theta.tolist() == [THETA_FLOOR] * 2


def test_theta_exceedance_monte_carlo():
    losses = np.random.default_rng(0).normal(5.0, 1.0, size=(1_000_000, 1))
    theta = fit_signal_thresholds(losses).theta[0]
    assert abs(np.mean(losses[:, 0] > theta) - 0.00135) < 0.0005


def test_error_rate_examples():
    th = np.array([1.0, 2.0, 0.5])
    assert error_rate(th, th).tolist() == [1.0, 1.0, 1.0]
    assert error_rate([2.0], [1.0]).tolist() == [2.0]
    assert not error_rate(np.zeros(3), th).any()


def test_nearest_rank_examples():
    assert fit_detection_threshold(np.arange(1, 101), 0.95).value == 95
    assert fit_detection_threshold(np.full(37, 3.25), 0.99).value == 3.25
    assert fit_detection_threshold(np.arange(1, 101).reshape(50, 2), 1.0).value == 100
    with pytest.raises(ValueError):
        fit_detection_threshold([1.0], 0.9)


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=200), st.floats(0.95, 1.0))
def test_nearest_rank_matches_hand_oracle(values, q):
    assert nearest_rank(values, q) == nearest_rank_by_hand(values, q)


@given(st.lists(st.floats(0, 1e3), min_size=20, max_size=300), st.floats(0.95, 1.0))
def test_calibration_false_alarm_bound(values, q):
    theta = fit_detection_threshold(values, q).value
    assert np.mean(np.asarray(values) > theta) <= 1 - q + 1 / len(values) + 1e-12


def test_latency_model_examples():
    assert latency_model(5.0, 4.8, 4.1814, 8, 0) == pytest.approx(38.2512, abs=1e-9)
    assert latency_model(5.0, 4.8, 4.1814, 8, 7) == pytest.approx(73.2512, abs=1e-9)
    assert latency_model(5.0, 0.0, 3.0, 1, 0) == 3.0
    with pytest.raises(ValueError):
        latency_model(5.0, 0.0, 3.0, 8, 8)


def tiny_detector(threshold=28.2, x=3, w=4):
    cfg = ModelConfig("dense", (8,), 2, (8,))
    model = TrainedModel(cfg, Autoencoder(cfg, w, x), t_us=10_000, selection_hash="h")
    th = SignalThresholds(np.full(x, 0.01), np.zeros(x), np.zeros(x))
    return Detector(model, th, threshold, [f"sig{i}" for i in range(x)], q=0.99)


def test_result_examples():
    det = tiny_detector()
    res = det.result(np.array([0.5, 30.0, 2.0]), 1_000_000)
    assert res.alarm and res.argmax_index == 2 and res.argmax_name == "sig1"
    assert res.top_k == [(2, "sig1", 30.0)]
    quiet = det.result(np.array([0.5, 3.0, 2.0]), 0)
    assert not quiet.alarm and quiet.top_k == []
    many = det.result(np.array([40.0, 30.0, 50.0]), 0)
    assert [k for k, _, _ in many.top_k] == [3, 1, 2]
    tie = det.result(np.array([9.0, 9.0, 1.0]), 0)
    assert tie.argmax_index == 1


def test_alarm_is_exactly_max_over_threshold():
    det = tiny_detector(threshold=2.0)
    assert not det.result(np.array([2.0, 1.0, 0.0]), 0).alarm
    assert det.result(np.array([2.0 + 1e-12, 1.0, 0.0]), 0).alarm


@given(st.lists(st.floats(1e-6, 1e3), min_size=3, max_size=3), st.lists(st.floats(1e-3, 1e3), min_size=3, max_size=3),
       st.floats(1e-3, 1e3))
def test_rates_scale_invariant(losses, thetas, c):
    det = tiny_detector(threshold=1.0)
    a = det.result(error_rate(losses, np.array(thetas)), 0)
    b = det.result(error_rate(np.array(losses) * c, np.array(thetas) * c), 0)
    assert np.allclose(a.rates, b.rates, rtol=1e-12)
    assert a.argmax_index == b.argmax_index
    if abs(a.max_rate - 1.0) > 1e-9:
        assert a.alarm == b.alarm


def test_violations_do_not_raise_alarm():
    det = tiny_detector()
    res = det.result(np.zeros(3), 0, violations=np.array([False, True, False]))
    assert not res.alarm and res.violations == ["sig1"]


def test_record_round_trip():
    res = tiny_detector().result(np.array([0.5, 30.0, 2.0]), 12_000_345)
    rec = json.loads(res.to_record())
    assert rec["window_end_time"] == "12.000345" and rec["topk"] == [["sig1", 30.0]]
    back = DetectionResult.from_record(res.to_record())
    assert (back.window_end_time_us, back.alarm, back.max_rate, back.argmax_name) == (12_000_345, True, 30.0, "sig1")


def windows(n, w=4, x=3, seed=0):
    rng = np.random.default_rng(seed)
    return [FeatureWindow(rng.random((w, x)), 10_000 * i) for i in range(n)]


def test_run_detector_batching():
    det = tiny_detector()
    wins = windows(16)
    out = list(run_detector(wins, det, batch_size=8))
    assert [r.window_end_time_us for r, _ in out] == [w.end_time_us for w in wins]
    assert len({lat.inference_s for _, lat in out[:8]}) == 1
    assert [lat.wait_s for _, lat in out[:8]] == pytest.approx([(7 - k) * 0.01 for k in range(8)])
    ones = list(run_detector(wins, det, batch_size=1))
    assert all(lat.wait_s == 0 for _, lat in ones)
    assert all(np.allclose(a.rates, b.rates, rtol=1e-12) for (a, _), (b, _) in zip(out, ones))


def test_batch_results_independent_of_chunking():
    det = tiny_detector()
    W = np.stack([w.matrix for w in windows(50)])
    a = det.evaluate_batch(W, range(50), chunk=7)
    b = [det.evaluate(W[i], i) for i in range(50)]
    assert all(np.allclose(x.rates, y.rates, rtol=1e-12) and x.alarm == y.alarm for x, y in zip(a, b))


@pytest.fixture(scope="module")
def calibrated(short_drive):
    sel = select_signals(short_drive.db, short_drive.log)
    s = sample_log(short_drive.log, short_drive.db, sel, t=0.01)
    W = np.ascontiguousarray(s.windows(8))
    cfg = ModelConfig("dense", (32,), 8, (32,))
    model = TrainedModel(cfg, Autoencoder(cfg, 8, len(sel)), t_us=s.t_us, selection_hash=sel.hash)
    return sel, W, calibrate(model, W[:1500], W[1500:], 0.99, sel.names)


def test_calibration_property(calibrated):
    _, W, det = calibrated
    val = W[1500:]
    far = np.mean(det.rates(val).max(axis=1) > det.threshold)
    assert far <= 1 - 0.99 + 1 / len(val)
    assert (det.thresholds.theta > 0).all()


def test_detector_save_load(tmp_path, calibrated):
    _, W, det = calibrated
    det.model.save(tmp_path / "m.bin")
    det.save(tmp_path / "c.bin")
    back = load_detector(tmp_path / "m.bin", tmp_path / "c.bin")
    assert back.names == det.names and back.threshold == det.threshold and back.q == 0.99
    assert np.allclose(back.rates(W[:20]), det.rates(W[:20]), rtol=1e-4)
    other = TrainedModel(det.model.config, det.model.network, det.model.t_us, "different")
    other.save(tmp_path / "o.bin")
    with pytest.raises(ValueError, match="selection"):
        load_detector(tmp_path / "o.bin", tmp_path / "c.bin")


def test_stream_matches_offline(short_drive, calibrated):
    sel, _, det = calibrated
    log = short_drive.log[:4000]
    s = sample_log(log, short_drive.db, sel, t=0.01)
    offline = det.evaluate_batch(np.ascontiguousarray(s.windows(8)), s.window_end_times(8))
    seen = []
    streamed, trace = stream_detect(log, FeatureGenerator(short_drive.db, sel, 0.01, 8), det, batch_size=8,
                                    on_result=seen.append, maxsize=4)
    assert len(streamed) == len(offline) == len(seen)
    assert [r.window_end_time_us for r in streamed] == [r.window_end_time_us for r in offline]
    assert all(np.allclose(a.rates, b.rates, rtol=1e-12) for a, b in zip(streamed, offline))
    assert len(trace.latencies) == len(streamed) and trace.t_beta > 0


def test_stream_surfaces_producer_errors(short_drive, calibrated):
    sel, _, det = calibrated
    log = list(short_drive.log[:200])
    log[150] = log[150].at(0)  # timestamp goes backwards
    with pytest.raises(ValueError, match="non-decreasing"):
        stream_detect(log, FeatureGenerator(short_drive.db, sel, 0.01, 8), det)


def test_exports(tmp_path):
    det = tiny_detector(threshold=50.0)
    results = [det.result(np.array([1.0, 60.0, 2e4]), 10_000 * i) for i in range(3)]
    assert write_report(tmp_path / "r.jsonl", results) == 3
    assert len((tmp_path / "r.jsonl").read_text().splitlines()) == 3
    assert rate_band([1.0, 60.0, 500.0, 5e3, 2e4], 50.0).tolist() == [0, 1, 2, 3, 4]
    write_heatmap(tmp_path / "h.csv", results, det.names, 50.0, mode="band")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[1] == "time_us,sig0,sig1,sig2" and lines[2] == "0,0,1,4"
    with pytest.raises(ValueError):
        write_heatmap(tmp_path / "h.csv", results, det.names, 50.0, mode="other")
