"""Command-line entry point: training phase (synth/select/features/train/
calibrate) and inference phase (attack/detect/eval/bench)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attack, canlog, dbc, detect, eval as evaluation, pipeline, synth
from .model import ModelConfig, TrainedModel, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

DATA_ERRORS = (dbc.DbcError, canlog.LogFormatError, attack.AttackError, ValueError, KeyError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    t: float = 0.005
    w: int = 150
    q: float = 0.993
    batch: int = 8

    def __post_init__(self):
        if not self.t > 0:
            raise UsageError("t must be > 0")
        if self.w < 1:
            raise UsageError("w must be >= 1")
        if not 0.95 <= self.q <= 1.0:
            raise UsageError("q must lie in [0.95, 1]")
        if self.batch < 1:
            raise UsageError("batch size must be >= 1")


def _aid(text: str) -> int:
    try:
        return int(text, 16)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a hexadecimal AID: {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


# --------------------------------------------------------------------------- shared loaders


def _load_selection(path) -> dbc.SignalSelection:
    return dbc.SignalSelection.from_manifest(Path(path).read_text())


def _load_windows(path) -> tuple[pipeline.FeatureHeader, np.ndarray, np.ndarray, list[str]]:
    dump = pipeline.read_feature_dump(path)
    return dump.header, dump.windows, dump.end_times_us, dump.labels


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# --------------------------------------------------------------------------- subcommands


def cmd_parse_dbc(a) -> int:
    db = dbc.load_dbc(a.dbc)
    if a.format == "dbc":
        _write(a.out, dbc.format_dbc(db))
        return EXIT_OK
    doc = {"version": db.version, "ecus": list(db.ecus), "messages": [
        {"aid": f"{m.aid:03X}", "name": m.name, "dlc": m.dlc, "sender": m.sender,
         "signals": [{"name": s.name, "start_bit": s.start_bit, "bit_length": s.bit_length,
                      "byte_order": s.byte_order, "signed": s.is_signed, "scale": s.scale, "offset": s.offset,
                      "min": s.minimum, "max": s.maximum, "unit": s.unit} for s in m.signals]}
        for m in db.messages.values()]}
    _write(a.out, json.dumps(doc, indent=1) + "\n")
    return EXIT_OK


def cmd_stats(a) -> int:
    db = dbc.load_dbc(a.dbc) if a.dbc else None
    rows = ["aid,count,mean_dt_s,std_dt_s,dlc,unique_payloads,sender,signals"]
    for s in canlog.stream_stats(canlog.load_log(a.log), db):
        mean = "" if s.mean_dt is None else f"{s.mean_dt:.6f}"
        std = "" if s.mean_dt is None else f"{s.std_dt:.6f}"
        rows.append(f"{s.aid:03X},{s.count},{mean},{std},{s.dlc},{s.unique_payloads},{s.sender or ''},"
                    f"{'' if s.signal_count is None else s.signal_count}")
    _write(a.out, "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_hamming(a) -> int:
    log = canlog.load_log(a.log)
    if a.aid is not None:
        profiles = [canlog.hamming_profile(log, a.aid)]
    else:
        profiles = list(canlog.payload_dynamics(log).profiles.values())
    rows = ["aid,n,flipped_bits,total," + ",".join(f"d{k}" for k in range(64))]
    for p in profiles:
        d = list(p.flip_rate) + [""] * (64 - len(p.flip_rate))
        rows.append(f"{p.aid:03X},{p.n},{p.flipped_bits},{p.total:.6f}," +
                    ",".join("" if v == "" else f"{v:.6f}" for v in d))
    _write(a.out, "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_synth(a) -> int:
    d = json.loads(Path(a.profile).read_text()) if a.profile else {}
    for key in ("duration", "seed", "mode"):
        if getattr(a, key) is not None:
            d[key] = getattr(a, key)
    res = synth.simulate_traffic(synth.SynthProfile.from_dict(d))
    Path(a.dbc_out).write_text(dbc.format_dbc(res.db))
    canlog.save_log(a.log_out, res.log)
    if a.trace_out:
        st = res.state
        cols = {"time_s": st.time, "speed": st.speed, "rpm": st.rpm, "gear": st.gear, "steering": st.steering,
                "coolant": st.coolant, "brake": st.brake, "odometer": st.odometer,
                **{f"wheel_{k}": st.wheels[:, i] for i, k in enumerate(("fl", "fr", "rl", "rr"))}}
        lines = [",".join(cols)]
        for i in range(len(st)):
            lines.append(",".join(f"{float(v[i]):.6f}" for v in cols.values()))
        Path(a.trace_out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_select(a) -> int:
    db = dbc.load_dbc(a.dbc)
    keywords = tuple(k for k in a.keywords.split(",") if k) if a.keywords is not None else dbc.DEFAULT_KEYWORDS
    sel = dbc.select_signals(db, canlog.load_log(a.log), keywords)
    for msg in sel.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    _write(a.out, sel.to_manifest())
    return EXIT_OK


def cmd_features(a) -> int:
    rc = RunConfig(t=a.t, w=a.w)
    db = dbc.load_dbc(a.dbc)
    sel = _load_selection(a.selection)
    log = canlog.load_log(a.log)
    series = pipeline.sample_log(log, db, sel, rc.t)
    header = pipeline.FeatureHeader(series.t_us, rc.w, len(sel), sel.hash)
    if a.format == "csv":
        pipeline.write_feature_csv(a.out, header, series)
        return EXIT_OK
    labels = None
    if a.labels:
        times, labs = attack.read_labels(a.labels)
        by_time = dict(zip(times, labs))
        labels = [by_time.get(int(e), "unlabeled") for e in series.window_end_times(rc.w)]
    n = pipeline.write_feature_dump(a.out, header, series.feature_windows(rc.w, labels))
    print(f"{n} windows", file=sys.stderr)
    return EXIT_OK


def cmd_train(a) -> int:
    h, X, _, _ = _load_windows(a.features)
    hv, V, _, _ = _load_windows(a.val)
    if (h.t_us, h.w, h.x, h.selection_hash) != (hv.t_us, hv.w, hv.x, hv.selection_hash):
        raise ValueError("training and validation dumps were built with different parameters")
    cfg = ModelConfig(a.layer, a.encoder, a.latent, a.decoder, a.lr, a.epochs, a.patience, a.seed, a.batch_train)
    model = train(X[::a.stride], V, cfg, h.t_us, h.selection_hash)
    model.save(a.out)
    if a.history:
        Path(a.history).write_text(model.history_csv())
    return EXIT_OK


def cmd_calibrate(a) -> int:
    RunConfig(q=a.q)
    model = TrainedModel.load(a.model)
    h, X, _, _ = _load_windows(a.train)
    hv, V, _, _ = _load_windows(a.val)
    for hdr in (h, hv):
        if hdr.selection_hash != model.selection_hash:
            raise ValueError("feature dump and model were built for different signal selections")
    names = _load_selection(a.selection).names if a.selection else None
    det = detect.calibrate(model, X, V, a.q, names)
    det.save(a.out)
    print(f"threshold {det.threshold!r}", file=sys.stderr)
    return EXIT_OK


def cmd_attack(a) -> int:
    log = canlog.load_log(a.log)
    db = dbc.load_dbc(a.dbc) if a.dbc else None
    plans = attack.load_plans(Path(a.plan).read_text())
    out = Path(a.out)
    single = len(plans) == 1 and out.suffix
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for k, plan in enumerate(plans):
        attacked = attack.run_plan(log, plan, db)
        path = out if single else out / f"{k + 1:03d}_{plan.kind}.log"
        canlog.save_log(path, attacked.messages)
        if a.selection:
            if db is None:
                raise UsageError("--selection requires --dbc")
            rc = RunConfig(t=a.t, w=a.w)
            sel = _load_selection(a.selection)
            series = pipeline.sample_log(attacked.messages, db, sel, rc.t, attacked.injected)
            ends = series.window_end_times(rc.w)
            labels = attack.label_windows(ends, series.window_tainted(rc.w), attacked, series.t_us, rc.w)
            attack.write_labels(path.with_suffix(".labels.csv"), ends, labels)
    return EXIT_OK


def cmd_detect(a) -> int:
    rc = RunConfig(batch=a.batch)
    det = detect.load_detector(a.model, a.calibration)
    db = dbc.load_dbc(a.dbc)
    sel = _load_selection(a.selection)
    if sel.hash != det.model.selection_hash:
        raise ValueError("selection manifest does not match the model")
    t = det.model.t_us / canlog.US_PER_S
    report = open(a.report, "w", newline="\n") if a.report not in (None, "-") else sys.stdout
    try:
        results = []
        if a.stream:
            gen = pipeline.FeatureGenerator(db, sel, t, det.model.w)

            def emit(res):
                report.write(res.to_record() + "\n")
                report.flush()

            results, trace = detect.stream_detect(canlog.read_log(sys.stdin), gen, det, rc.batch,
                                                  realtime=a.realtime, on_result=emit)
            if trace.latencies:
                p = evaluation.percentiles(trace.latencies)
                print(json.dumps({k: round(v, 6) for k, v in p.items()}), file=sys.stderr)
        else:
            wins = pipeline.run_pipeline(canlog.load_log(a.log), db, sel, t, det.model.w)
            for res, _ in detect.run_detector(wins, det, rc.batch, t):
                report.write(res.to_record() + "\n")
                results.append(res)
    finally:
        if report is not sys.stdout:
            report.close()
    if a.heatmap:
        detect.write_heatmap(a.heatmap, results, det.names, det.threshold, a.heatmap_mode)
    return EXIT_OK


def _read_results(path) -> list[detect.DetectionResult]:
    with open(path) as fh:
        return [detect.DetectionResult.from_record(line) for line in fh if line.strip()]


def cmd_eval(a) -> int:
    if a.campaign is not None:
        cfg = json.loads(Path(a.campaign).read_text()) if a.campaign != "default" else None
        res = evaluation.run_campaign(cfg, a.out, progress=(lambda m: print(m, file=sys.stderr)) if a.verbose else None)
        sys.stdout.write(res.table_csv())
        return EXIT_OK
    if not (a.results and a.labels):
        raise UsageError("eval needs --results and --labels, or --campaign")
    results = _read_results(a.results)
    times, labels = attack.read_labels(a.labels)
    rep = evaluation.score(results, labels, name=Path(a.results).stem, label_times=times)
    _write(a.out if a.out else None, json.dumps(rep.to_dict(), sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_bench(a) -> int:
    model = TrainedModel.load(a.model)
    rows = evaluation.bench_throughput(model, a.batch_sizes, a.repeats, a.seed)
    _write(a.out, evaluation.throughput_csv(rows))
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="canids", description="Signal-level CAN intrusion detection with autoencoders.")
    p.add_argument("--config", help="JSON file of option defaults (keys are option names; flags win)")
    p.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("parse-dbc", help="validate a DBC and print its messages")
    s.add_argument("--dbc", required=True, help="DBC file")
    s.add_argument("--format", choices=("json", "dbc"), default="json", help="output format")
    s.add_argument("--out", help="output file (default stdout)")
    s.set_defaults(func=cmd_parse_dbc)

    s = sub.add_parser("stats", help="per-stream counts and message interval statistics")
    s.add_argument("--log", required=True, help="candump log")
    s.add_argument("--dbc", help="DBC for sender / signal counts")
    s.add_argument("--out", help="CSV output (default stdout); intervals in seconds")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("hamming", help="per-bit flip rates of each stream")
    s.add_argument("--log", required=True, help="candump log")
    s.add_argument("--aid", type=_aid, help="single AID (hex); default all streams")
    s.add_argument("--out", help="CSV output (default stdout); d_k are flips per transition")
    s.set_defaults(func=cmd_hamming)

    s = sub.add_parser("synth", help="generate a synthetic DBC and benign log")
    s.add_argument("--profile", help="JSON profile (duration, seed, mode, segments, ...)")
    s.add_argument("--duration", type=float, help="log length in seconds")
    s.add_argument("--seed", type=int, help="random seed (default 0)")
    s.add_argument("--mode", choices=("driving", "parked"), help="drive cycle or stationary idle")
    s.add_argument("--dbc-out", required=True, help="DBC output path")
    s.add_argument("--log-out", required=True, help="candump log output path")
    s.add_argument("--trace-out", help="ground-truth state CSV (10 ms steps)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("select", help="choose the monitored signals from a benign log")
    s.add_argument("--dbc", required=True, help="DBC file")
    s.add_argument("--log", required=True, help="benign training log")
    s.add_argument("--keywords", help="comma-separated exclusion keywords (default checksum/counter names)")
    s.add_argument("--out", help="selection manifest (default stdout)")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("features", help="turn a log into sliding-window features")
    s.add_argument("--dbc", required=True, help="DBC file")
    s.add_argument("--log", required=True, help="candump log")
    s.add_argument("--selection", required=True, help="selection manifest")
    s.add_argument("--t", type=float, default=0.005, help="sampling interval in seconds (default 0.005)")
    s.add_argument("--w", type=int, default=150, help="window length in samples (default 150)")
    s.add_argument("--labels", help="label sidecar to embed (window_end_time_us,label)")
    s.add_argument("--format", choices=("bin", "csv"), default="bin", help="window dump or per-tick CSV")
    s.add_argument("--out", required=True, help="output path")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="fit an autoencoder on benign windows")
    s.add_argument("--features", required=True, help="training window dump")
    s.add_argument("--val", required=True, help="validation window dump")
    s.add_argument("--layer", choices=("dense", "lstm", "bilstm"), default="dense", help="layer family")
    s.add_argument("--encoder", type=_ints, default=(128,), help="encoder widths, comma-separated (units)")
    s.add_argument("--latent", type=int, default=32, help="latent width (units)")
    s.add_argument("--decoder", type=_ints, default=(128,), help="decoder widths, comma-separated (units)")
    s.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate (default 1e-4)")
    s.add_argument("--epochs", type=int, default=2000, help="maximum epochs")
    s.add_argument("--patience", type=int, default=50, help="early-stopping patience in epochs")
    s.add_argument("--batch-train", type=int, default=64, help="minibatch size in windows")
    s.add_argument("--stride", type=int, default=1, help="use every n-th training window")
    s.add_argument("--seed", type=int, default=0, help="initialization / shuffling seed")
    s.add_argument("--history", help="per-epoch loss CSV")
    s.add_argument("--out", required=True, help="model container output")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("calibrate", help="fit per-signal thresholds and the alarm threshold")
    s.add_argument("--model", required=True, help="model container")
    s.add_argument("--train", required=True, help="training window dump (per-signal thresholds)")
    s.add_argument("--val", required=True, help="validation window dump (alarm threshold)")
    s.add_argument("--q", type=float, default=0.993, help="alarm percentile in [0.95, 1] (default 0.993)")
    s.add_argument("--selection", help="selection manifest for signal names")
    s.add_argument("--out", required=True, help="calibration container output")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("attack", help="inject attacks into a benign log")
    s.add_argument("--log", required=True, help="benign candump log")
    s.add_argument("--plan", required=True, help="JSON plan or campaign (times in s from the first message)")
    s.add_argument("--dbc", help="DBC (needed for signal-override payloads and labels)")
    s.add_argument("--selection", help="selection manifest; writes a window label sidecar")
    s.add_argument("--t", type=float, default=0.005, help="sampling interval in seconds for labels")
    s.add_argument("--w", type=int, default=150, help="window length in samples for labels")
    s.add_argument("--out", required=True, help="output log (single plan) or directory")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("detect", help="run detection on a log or on stdin")
    s.add_argument("--model", required=True, help="model container")
    s.add_argument("--calibration", required=True, help="calibration container")
    s.add_argument("--dbc", required=True, help="DBC file")
    s.add_argument("--selection", required=True, help="selection manifest")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--log", help="offline mode: candump log")
    src.add_argument("--stream", action="store_true", help="streaming mode: candump lines on stdin")
    s.add_argument("--realtime", action="store_true", help="pace stdin messages by their timestamps")
    s.add_argument("--batch", type=int, default=8, help="inference batch size B in windows (default 8)")
    s.add_argument("--report", help="JSON-lines results (default stdout)")
    s.add_argument("--heatmap", help="per-signal error rate CSV")
    s.add_argument("--heatmap-mode", choices=("rate", "band"), default="rate", help="raw rates or band codes")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", help="score detection results, or run a full campaign")
    s.add_argument("--results", help="JSON-lines detection results")
    s.add_argument("--labels", help="label sidecar")
    s.add_argument("--campaign", help="campaign JSON, or 'default' for the built-in desk-scale campaign")
    s.add_argument("--out", help="report JSON (scoring) or output directory (campaign)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="inference throughput per batch size")
    s.add_argument("--model", required=True, help="model container")
    s.add_argument("--batch-sizes", type=_ints, default=(1, 8, 64), help="comma-separated batch sizes")
    s.add_argument("--repeats", type=int, default=5, help="timed runs per batch size (median reported)")
    s.add_argument("--seed", type=int, default=0, help="seed for the random input windows")
    s.add_argument("--out", help="CSV output (default stdout); samples/s and ms/sample")
    s.set_defaults(func=cmd_bench)
    return p


def _parse(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        defaults = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items() if k.replace("-", "_") in known})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: data: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        msg = str(exc).replace("\n", " ")
        print(f"error: internal: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
