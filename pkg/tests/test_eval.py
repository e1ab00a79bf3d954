import copy
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from canids.detect import DetectionResult
from canids.eval import (
    align,
    bench_throughput,
    confusion,
    default_campaign,
    explained_fraction,
    percentiles,
    prf,
    roc_auc,
    run_campaign,
    score,
    throughput_csv,
)
from canids.model import Autoencoder, ModelConfig, TrainedModel
from oracles import pair_count_auc


def res(t, alarm, rate=1.0, name="316_VS"):
    return DetectionResult(t, alarm, np.array([rate]), rate, 1, name)


def test_prf_examples():
    assert prf(2, 1, 1) == pytest.approx((2 / 3, 2 / 3, 2 / 3))
    labels = ["attack", "benign", "attack", "benign"]
    tp, fp, tn, fn = confusion([True, False, True, False], labels)
    assert prf(tp, fp, fn) == (1.0, 1.0, 1.0)
    tp, fp, tn, fn = confusion([False, True, False, True], labels)
    assert prf(tp, fp, fn)[:2] == (0.0, 0.0)


def test_unlabeled_windows_skipped():
    assert confusion([True, True, False], ["unlabeled", "attack", "benign"]) == (1, 0, 1, 0)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_consistent(tp, fp, fn):
    p, r, f1 = prf(tp, fp, fn)
    assert 0 <= p <= 1 and 0 <= r <= 1 and 0 <= f1 <= 1
    if p + r > 0:
        assert abs(f1 - 2 * p * r / (p + r)) <= 1e-12


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])[1] == 1.0
    assert roc_auc([1, 0, 1, 0], [1, 1, 0, 0])[1] == 0.5  # one swapped pair, counted by hand
    (fpr, tpr, thr), _ = roc_auc([3, 2, 2, 1], ["attack", "benign", "attack", "benign"])
    assert fpr[0] == tpr[0] == 0 and fpr[-1] == tpr[-1] == 1
    assert np.all(np.diff(thr) < 0)
    with pytest.raises(ValueError):
        roc_auc([1, 2], [1, 1])


def test_auc_random_labels_near_half():
    rng = np.random.default_rng(0)
    scores = rng.random(1000)
    labels = rng.permutation(np.r_[np.ones(500), np.zeros(500)])
    assert abs(roc_auc(scores, labels)[1] - 0.5) <= 0.05


@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_pair_count(pairs):
    scores = [s for s, _ in pairs]
    labels = [y for _, y in pairs]
    if all(labels) or not any(labels):
        return
    assert roc_auc(scores, labels)[1] == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)


def test_score_alignment_and_auc():
    results = [res(10, False, 0.1), res(20, True, 5.0), res(30, True, 4.0), res(40, False, 0.2)]
    rep = score(results, ["attack", "benign", "attack", "benign"], label_times=[20, 10, 30, 40],
                latencies=[1.0, 2.0, 3.0, 4.0])
    assert (rep.tp, rep.fp, rep.tn, rep.fn) == (2, 0, 2, 0) and rep.f1 == 1.0 and rep.auc == 1.0
    assert rep.latency_p50 == 2.5
    benign_only = score(results, ["benign"] * 4)
    assert benign_only.auc is None and benign_only.fp == 2
    with pytest.raises(ValueError):
        align(results, [1, 2, 3, 4], ["benign"] * 4)
    assert score(results, ["benign"] * 4).to_json() == score(results, ["benign"] * 4).to_json()


def test_percentiles():
    p = percentiles(np.arange(101))
    assert (p["latency_p50"], p["latency_p95"], p["latency_p99"]) == (50, 95, 99)
    assert percentiles([]) == {}


def test_explained_fraction():
    results = [res(1, True, name="386_WHL_SPD_FL"), res(2, True, name="2B0_SAS_Angle"), res(3, False, name="x")]
    assert explained_fraction(results, "316_VS") == 0.5
    assert explained_fraction([], "316_VS") == 0.0


def test_bench_throughput():
    cfg = ModelConfig("dense", (64,), 16, (64,))
    m = TrainedModel(cfg, Autoencoder(cfg, 32, 23))
    rows = bench_throughput(m, (1, 8), repeats=3, min_time=0.02)
    assert [r.batch_size for r in rows] == [1, 8]
    assert rows[1].ms_per_sample <= rows[0].ms_per_sample
    for r in rows:
        assert r.ms_per_sample * r.samples_per_s == pytest.approx(1000.0)
    assert throughput_csv(rows).splitlines()[0] == "batch_size,samples_per_s,ms_per_sample"


def small_campaign():
    cfg = copy.deepcopy(default_campaign())
    cfg["train_profile"]["duration"] = 60.0
    cfg["val_profile"]["duration"] = 30.0
    cfg["model"].update(max_epochs=2, encoder_widths=[16], latent_dim=8, decoder_widths=[16])
    return cfg


def test_default_campaign_is_json_and_covers_every_kind():
    cfg = default_campaign()
    assert json.loads(json.dumps(cfg)) == cfg
    assert {p["kind"] for p in cfg["plans"]} == {"fuzzing", "fabrication", "suspension", "masquerade", "replay"}
    assert cfg["t"] == 0.01 and cfg["w"] == 32


def test_small_campaign_runs_and_writes(tmp_path):
    out = run_campaign(small_campaign(), outdir=tmp_path)
    assert len(out.experiments) == 5
    assert all(0 <= e.window_min and e.window_max <= 1 for e in out.experiments)
    assert (tmp_path / "campaign.json").exists()
    table = (tmp_path / "table.csv").read_text().splitlines()
    assert len(table) == 6 and table[0].startswith("experiment,kind,aid")
    for e in out.experiments:
        r = e.report
        assert r.n == len(e.results)
        for v in (r.precision, r.recall, r.f1):
            assert 0 <= v <= 1
