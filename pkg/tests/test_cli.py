import io
import json

import pytest

from canids import cli
from canids.canlog import load_log


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    f = {k: d / v for k, v in dict(dbc="car.dbc", log="train.log", val_log="val.log", sel="sel.tsv",
                                    feat="train.bin", val="val.bin", model="m.bin", cal="c.bin", plan="plan.json",
                                    attacked="att.log", report="r.jsonl", heat="h.csv", score="s.json").items()}
    assert run("synth", "--duration", 25, "--seed", 1, "--dbc-out", f["dbc"], "--log-out", f["log"]) == 0
    assert run("synth", "--duration", 15, "--seed", 2, "--dbc-out", d / "same.dbc", "--log-out", f["val_log"]) == 0
    assert run("select", "--dbc", f["dbc"], "--log", f["log"], "--out", f["sel"]) == 0
    for log, out in ((f["log"], f["feat"]), (f["val_log"], f["val"])):
        assert run("features", "--dbc", f["dbc"], "--log", log, "--selection", f["sel"], "--t", 0.01, "--w", 8,
                   "--out", out) == 0
    assert run("train", "--features", f["feat"], "--val", f["val"], "--encoder", 16, "--latent", 4, "--decoder", 16,
               "--lr", 1e-3, "--epochs", 2, "--out", f["model"], "--history", d / "hist.csv") == 0
    assert run("calibrate", "--model", f["model"], "--train", f["feat"], "--val", f["val"], "--q", 0.99,
               "--selection", f["sel"], "--out", f["cal"]) == 0
    f["plan"].write_text(json.dumps({"kind": "fabrication", "start": 5, "end": 10,
                                     "params": {"aid": "316", "payload": {"mode": "override",
                                                                          "signals": {"VS": 200}}}}))
    assert run("attack", "--log", f["val_log"], "--plan", f["plan"], "--dbc", f["dbc"], "--selection", f["sel"],
               "--t", 0.01, "--w", 8, "--out", f["attacked"]) == 0
    assert run("detect", "--model", f["model"], "--calibration", f["cal"], "--dbc", f["dbc"], "--selection", f["sel"],
               "--log", f["attacked"], "--report", f["report"], "--heatmap", f["heat"]) == 0
    return d, f


def test_chain_outputs(work):
    d, f = work
    assert (d / "hist.csv").read_text().startswith("epoch,")
    records = [json.loads(line) for line in f["report"].read_text().splitlines()]
    assert records and {"window_end_time", "alarm", "max_rate", "argmax_name", "topk"} <= set(records[0])
    assert f["heat"].read_text().startswith("# threshold=")
    assert (d / "att.labels.csv").exists()


def test_eval_scores_detection(work, capsys):
    d, f = work
    assert run("eval", "--results", f["report"], "--labels", d / "att.labels.csv", "--out", f["score"]) == 0
    rep = json.loads(f["score"].read_text())
    assert rep["tp"] + rep["fp"] + rep["tn"] + rep["fn"] == len(f["report"].read_text().splitlines())


def test_eval_perfect_oracle(tmp_path):
    lines, labels = [], ["window_end_time_us,label"]
    for i in range(20):
        attack = 5 <= i < 12
        lines.append(json.dumps({"window_end_time": f"1.{i:06d}", "alarm": attack, "max_rate": 10.0 if attack else 0.1,
                                 "argmax_index": 1, "argmax_name": "s1", "topk": [], "violations": []}))
        labels.append(f"{1_000_000 + i},{'attack' if attack else 'benign'}")
    (tmp_path / "r.jsonl").write_text("\n".join(lines) + "\n")
    (tmp_path / "l.csv").write_text("\n".join(labels) + "\n")
    assert run("eval", "--results", tmp_path / "r.jsonl", "--labels", tmp_path / "l.csv",
               "--out", tmp_path / "s.json") == 0
    rep = json.loads((tmp_path / "s.json").read_text())
    assert rep["f1"] == 1.0 and rep["auc"] == 1.0


def test_idempotent_outputs(work, tmp_path):
    d, f = work
    assert run("synth", "--duration", 25, "--seed", 1, "--dbc-out", tmp_path / "a.dbc",
               "--log-out", tmp_path / "a.log") == 0
    assert (tmp_path / "a.log").read_bytes() == f["log"].read_bytes()
    assert run("features", "--dbc", f["dbc"], "--log", f["log"], "--selection", f["sel"], "--t", 0.01, "--w", 8,
               "--out", tmp_path / "t.bin") == 0
    assert (tmp_path / "t.bin").read_bytes() == f["feat"].read_bytes()
    assert run("train", "--features", f["feat"], "--val", f["val"], "--encoder", 16, "--latent", 4, "--decoder", 16,
               "--lr", 1e-3, "--epochs", 2, "--out", tmp_path / "m.bin") == 0
    assert (tmp_path / "m.bin").read_bytes() == f["model"].read_bytes()
    assert run("attack", "--log", f["val_log"], "--plan", f["plan"], "--dbc", f["dbc"],
               "--out", tmp_path / "x.log") == 0
    assert (tmp_path / "x.log").read_bytes() == f["attacked"].read_bytes()


def test_stream_mode(work, monkeypatch, capsys):
    d, f = work
    text = "".join(f["attacked"].read_text().splitlines(keepends=True)[:3000])
    monkeypatch.setattr("sys.stdin", io.StringIO(text))
    assert run("detect", "--model", f["model"], "--calibration", f["cal"], "--dbc", f["dbc"], "--selection", f["sel"],
               "--stream") == 0
    out = capsys.readouterr()
    assert len(out.out.splitlines()) > 10
    assert "latency_p50" in out.err


def test_inspection_commands(work, capsys):
    d, f = work
    assert run("parse-dbc", "--dbc", f["dbc"]) == 0
    assert "WHL_SPD11" in capsys.readouterr().out
    assert run("stats", "--log", f["log"], "--dbc", f["dbc"]) == 0
    assert "316" in capsys.readouterr().out
    assert run("hamming", "--log", f["log"], "--aid", "316") == 0
    assert capsys.readouterr().out
    assert run("features", "--dbc", f["dbc"], "--log", f["log"], "--selection", f["sel"], "--t", 0.01, "--w", 8,
               "--format", "csv", "--out", d / "f.csv") == 0
    assert run("bench", "--model", f["model"], "--batch-sizes", "1,8", "--repeats", 1) == 0
    assert capsys.readouterr().out.startswith("batch_size,")


def test_attack_directory_output(work):
    d, f = work
    plans = d / "plans.json"
    plans.write_text(json.dumps({"plans": [{"kind": "suspension", "start": 2, "end": 4, "params": {"aid": "316"}},
                                           {"kind": "fuzzing", "start": 2, "end": 4, "params": {"rate": 20}}]}))
    assert run("attack", "--log", f["val_log"], "--plan", plans, "--out", d / "many") == 0
    assert len(load_log(d / "many" / "002_fuzzing.log")) == len(load_log(f["val_log"])) + 40


def test_config_defaults_and_flag_precedence(work, tmp_path):
    d, f = work
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"t": 0.02, "w": 4, "format": "csv"}))
    assert run("--config", cfg, "features", "--dbc", f["dbc"], "--log", f["log"], "--selection", f["sel"],
               "--out", tmp_path / "a.csv") == 0
    head = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert "t_us=20000" in head and "w=4" in head
    assert run("--config", cfg, "features", "--dbc", f["dbc"], "--log", f["log"], "--selection", f["sel"],
               "--w", 6, "--out", tmp_path / "b.csv") == 0
    assert "w=6" in (tmp_path / "b.csv").read_text().splitlines()[0]


@pytest.mark.parametrize("argv, code", [
    (["stats", "--log", "/nonexistent.log"], 2),
    (["stats"], 1),
    (["frobnicate"], 1),
    (["--config", "/nonexistent.json", "stats", "--log", "x"], 1),
])
def test_exit_codes(argv, code, capsys):
    assert cli.main(argv) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")


def test_bad_values_are_usage_errors(work, capsys):
    d, f = work
    assert run("calibrate", "--model", f["model"], "--train", f["feat"], "--val", f["val"], "--q", 0.5,
               "--out", d / "bad.bin") == 1
    assert run("features", "--dbc", f["dbc"], "--log", f["log"], "--selection", f["sel"], "--w", 0,
               "--out", d / "bad.bin") == 1
    bad = d / "bad.log"
    bad.write_text("(0.000000) can0 316#0\n")
    assert run("stats", "--log", bad) == 2
    assert "line 1" in capsys.readouterr().err


@pytest.mark.parametrize("command", ["parse-dbc", "stats", "hamming", "synth", "select", "features", "train",
                                     "calibrate", "attack", "detect", "eval", "bench"])
def test_help_lists_every_flag(command, capsys):
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text
