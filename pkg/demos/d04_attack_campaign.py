"""
An attack campaign on a synthetic drive
=========================================

Run the full desk-scale campaign: train on a random drive, calibrate on a
second one, then replay a scripted test drive under fabrication,
masquerade, fuzzing, suspension and replay attacks. Suspension is the
interesting failure: dropping frames leaves the sampled signal frozen at
its last value, which looks perfectly normal during a steady cruise.

Pass ``--full`` for the full-size run (a couple of minutes); the quick run
trains less, so the masquerade is caught less cleanly.
"""

import sys

from canids.eval import default_campaign, run_campaign

QUICK = "--full" not in sys.argv

cfg = default_campaign()
if QUICK:
    cfg["train_profile"]["duration"] = 240
    cfg["val_profile"]["duration"] = 120
    cfg["model"]["max_epochs"] = 10

result = run_campaign(cfg, progress=print)
print()
print("signals:", len(result.selection_names), " alarm threshold:", round(result.detector.threshold, 3))
print(f"validation false alarm rate {result.val_false_alarm_rate:.4f} over {result.n_val_windows} windows")
print()
print(f"{'attack':12s} {'target':6s} {'load %':>7s} {'prec':>6s} {'recall':>6s} {'auc':>6s} {'explained':>9s}")
for e in result.experiments:
    r = e.report
    auc = "" if r.auc is None else f"{r.auc:.3f}"
    print(f"{r.kind:12s} {r.aid:6s} {e.bus_load:7.2f} {r.precision:6.3f} {r.recall:6.3f} {auc:>6s} "
          f"{r.extra.get('explained', 0.0):9.2f}")
