"""
Training an autoencoder and calibrating the detector
=====================================================

Fit a small dense autoencoder on benign windows, derive per-signal loss
thresholds on the training set, pick the alarm threshold from validation
windows, and check the detector on a fresh benign drive and on one where a
speed signal is overwritten.
"""

import numpy as np

from canids.attack import AttackPlan, label_windows, run_plan
from canids.dbc import select_signals
from canids.detect import calibrate, run_detector
from canids.eval import score
from canids.model import ModelConfig, train
from canids.pipeline import sample_log
from canids.synth import SynthProfile, simulate_traffic

T, W = 0.01, 16

train_sim = simulate_traffic(SynthProfile(duration=120.0, seed=1))
db = train_sim.db
selection = select_signals(db, train_sim.log)
val_log = simulate_traffic(SynthProfile(duration=60.0, seed=2)).log
test_log = simulate_traffic(SynthProfile(duration=60.0, seed=3)).log

train_windows = sample_log(train_sim.log, db, selection, T).windows(W)
val_windows = sample_log(val_log, db, selection, T).windows(W)

cfg = ModelConfig("dense", (64,), 16, (64,), learning_rate=1e-3, max_epochs=15, early_stop_patience=5)
model = train(train_windows, val_windows, cfg, t_us=int(T * 1e6), selection_hash=selection.hash)
for epoch, tr, va in model.history[-3:]:
    print(f"epoch {epoch:3d}  train {tr:.5f}  val {va:.5f}")
print("best epoch", model.best_epoch)

detector = calibrate(model, train_windows, val_windows, q=0.99, names=selection.names)
print("alarm threshold on the largest loss/theta ratio:", detector.threshold)

# Benign test drive: the false alarm rate should sit near 1 - q.
series = sample_log(test_log, db, selection, T)
results = detector.evaluate_batch(series.windows(W), series.window_end_times(W))
print("benign false alarm rate:", np.mean([r.alarm for r in results]))

# Overwrite vehicle speed in the 0x316 frames between 20 s and 40 s.
plan = AttackPlan("masquerade", 20.0, 40.0, {"aid": "316", "payload": {"mode": "override",
                                                                        "signals": {"VS": 180}}})
attacked = run_plan(test_log, plan, db)
series = sample_log(attacked.messages, db, selection, T, injected=attacked.injected)
ends = series.window_end_times(W)
labels = label_windows(ends, series.window_tainted(W), attacked, int(T * 1e6), W)
results = [res for res, _ in run_detector(series.feature_windows(W), detector, batch_size=8)]
report = score(results, labels, name="demo", kind="masquerade")
print(f"precision {report.precision:.3f} recall {report.recall:.3f} auc {report.auc:.4f}")

# Which signals were blamed for the alarms?
blamed = [r.argmax_name for r in results if r.alarm]
names, counts = np.unique(blamed, return_counts=True)
for k in np.argsort(-counts)[:3]:
    print(f"  {names[k]}: {counts[k]} alarms")
