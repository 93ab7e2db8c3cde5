import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gastnet import cli
from gastnet.data import load_sequences
from gastnet.model import load_checkpoint, param_count

SMALL = ["--rf", "9", "--channels", "8", "--heads", "2"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(d), "--sequences", "2", "--length", "30", "--seed", "1"]) == 0
    return d


@pytest.fixture(scope="module")
def run(work):
    out = work / "run"
    assert cli.main(["train", "--data", str(work / "synth.json"), *SMALL, "--epochs", "3",
                     "--batch", "16", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_train_writes_artifacts(run):
    assert {p.name for p in run.iterdir()} == {"checkpoint.gast", "loss.csv", "manifest.json"}
    man = json.loads((run / "manifest.json").read_text())
    assert man["seed"] == 7 and man["model"]["receptive_field"] == 9
    assert man["train"]["epochs"] == 3 and man["train"]["batch_size"] == 16
    assert man["parameters"] == param_count(load_checkpoint(run / "checkpoint.gast"))
    blob = (run / "checkpoint.gast").read_bytes()
    import hashlib
    h = hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()
    assert man["checkpoint_sha1"] == h
    rows = list(csv.reader((run / "loss.csv").open()))
    assert rows[0] == ["epoch", "lr", "train_mpjpe_mm", "eval_mpjpe_mm", "eval_pmpjpe_mm"]
    assert len(rows) == 4


def test_train_is_reproducible(work, run):
    out = work / "run2"
    assert cli.main(["train", "--data", str(work / "synth.json"), *SMALL, "--epochs", "3",
                     "--batch", "16", "--seed", "7", "--out", str(out)]) == 0
    assert (out / "loss.csv").read_bytes() == (run / "loss.csv").read_bytes()
    assert (out / "checkpoint.gast").read_bytes() == (run / "checkpoint.gast").read_bytes()


def test_config_file_precedence(work, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "channels": 16, "heads": 4, "receptive_field": 9}))
    out = tmp_path / "r"
    assert cli.main(["train", "--data", str(work / "synth.json"), "--config", str(cfg),
                     "--channels", "8", "--heads", "2", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["model"]["channels"] == 8 and man["train"]["epochs"] == 1


def test_invalid_rf_exits_nonzero(work, tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--data", str(work / "synth.json"), "--rf", "28", "--out", str(tmp_path)])
    assert exc.value.code != 0


def test_missing_data_is_one_line_error(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("gastnet: error:")


def test_infer_modes_agree(work, run, capsys):
    ck = str(run / "checkpoint.gast")
    data = str(work / "synth.json")
    assert cli.main(["infer", "--checkpoint", ck, "--data", data, "--mode", "layer",
                     "--out", str(work / "il")]) == 0
    assert cli.main(["infer", "--checkpoint", ck, "--data", data, "--mode", "frame",
                     "--out", str(work / "if"), "--timing"]) == 0
    assert "fps" in capsys.readouterr().out
    a = json.loads((work / "il" / "predictions.json").read_text())
    b = json.loads((work / "if" / "predictions.json").read_text())
    for sa, sb in zip(a["sequences"], b["sequences"]):
        # float32 checkpoint; see the float64 acceptance check for the tight bound
        np.testing.assert_allclose(sa["frames_3d"], sb["frames_3d"], atol=1e-2)


def test_infer_one_frame(run, tmp_path):
    d = {"format_version": 1, "skeleton": "h36m17", "fps": 50.0, "normalized": True,
         "sequences": [{"id": "one", "frames_2d": [[[0.01 * j, -0.02 * j] for j in range(17)]]}]}
    p = tmp_path / "one.json"
    p.write_text(json.dumps(d))
    assert cli.main(["infer", "--checkpoint", str(run / "checkpoint.gast"), "--data", str(p),
                     "--out", str(tmp_path / "o")]) == 0
    out = json.loads((tmp_path / "o" / "predictions.json").read_text())
    assert np.asarray(out["sequences"][0]["frames_3d"]).shape == (1, 17, 3)


def test_infer_skeleton_mismatch(run, tmp_path):
    d = {"format_version": 1, "skeleton": "humaneva15", "fps": 50.0, "normalized": True,
         "sequences": [{"id": "x", "frames_2d": [[[0.0, 0.0]] * 15]}]}
    p = tmp_path / "he.json"
    p.write_text(json.dumps(d))
    assert cli.main(["infer", "--checkpoint", str(run / "checkpoint.gast"), "--data", str(p),
                     "--out", str(tmp_path / "o")]) == 1


def test_eval_self_consistency(work, run, capsys):
    ck = str(run / "checkpoint.gast")
    data = str(work / "synth.json")
    assert cli.main(["infer", "--checkpoint", ck, "--data", data, "--no-flip", "--out", str(work / "p")]) == 0
    assert cli.main(["eval", "--checkpoint", ck, "--data", data, "--no-flip",
                     "--targets", str(work / "p" / "predictions.json"), "--out", str(work / "e0")]) == 0
    m = json.loads((work / "e0" / "metrics.json").read_text())
    assert m["aggregate"]["mpjpe_mm"] == 0.0 and m["aggregate"]["p_mpjpe_mm"] == 0.0


def test_eval_rows_and_aggregate(work, run, capsys):
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.gast"),
                     "--data", str(work / "synth.json"), "--out", str(work / "e1")]) == 0
    printed = capsys.readouterr().out
    assert "aggregate" in printed and "P-MPJPE" in printed
    m = json.loads((work / "e1" / "metrics.json").read_text())
    agg = m["aggregate"]
    assert agg["p_mpjpe_mm"] <= agg["mpjpe_mm"]
    w = sum(r["mpjpe_mm"] * r["frames"] for r in m["sequences"]) / agg["frames"]
    assert abs(w - agg["mpjpe_mm"]) <= 1e-9


def test_eval_needs_targets(run, tmp_path):
    d = {"format_version": 1, "skeleton": "h36m17", "fps": 50.0, "normalized": True,
         "sequences": [{"id": "x", "frames_2d": [[[0.0, 0.0]] * 17] * 3}]}
    p = tmp_path / "nt.json"
    p.write_text(json.dumps(d))
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.gast"), "--data", str(p),
                     "--out", str(tmp_path / "o")]) == 1


def read_attention(path):
    rows = list(csv.reader(path.open()))
    return rows[0], rows[1:]


def test_export_attention(work, tmp_path):
    assert cli.main(["train", "--data", str(work / "synth.json"), "--rf", "27", "--channels", "8",
                     "--heads", "2", "--epochs", "1", "--batch", "16", "--out", str(tmp_path / "r")]) == 0
    ck = tmp_path / "r" / "checkpoint.gast"
    assert cli.main(["export-attention", "--checkpoint", str(ck), "--data", str(work / "synth.json"),
                     "--joint", "13", "--out", str(tmp_path / "a")]) == 0
    header, rows = read_attention(tmp_path / "a" / "attention.csv")
    assert header[:4] == ["sequence", "frame", "block", "joint"] and len(header) == 4 + 17
    w = np.array([[float(v) for v in r[4:]] for r in rows])
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    per_frame = {}
    for r in rows:
        per_frame.setdefault((r[0], r[1]), set()).add(r[2])
    assert len(per_frame) == 60 and all(v == {"0", "1", "2"} for v in per_frame.values())


def test_export_attention_constant_input_is_uniform(run, tmp_path):
    frame = [[0.1, -0.2]] * 17
    d = {"format_version": 1, "skeleton": "h36m17", "fps": 50.0, "normalized": True,
         "sequences": [{"id": "c", "frames_2d": [frame] * 5}]}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(d))
    assert cli.main(["export-attention", "--checkpoint", str(run / "checkpoint.gast"),
                     "--data", str(p), "--joint", "0", "--out", str(tmp_path / "a")]) == 0
    _, rows = read_attention(tmp_path / "a" / "attention.csv")
    # only the first block sees identical node features; a trained C_k mixes
    # joints unevenly, so later blocks receive joint-dependent inputs
    first = [[float(v) for v in r[4:]] for r in rows if r[2] == "0"]
    assert len(first) == 5
    np.testing.assert_allclose(first, 1 / 17, atol=1e-6)


def test_export_attention_bad_joint(work, run, tmp_path):
    assert cli.main(["export-attention", "--checkpoint", str(run / "checkpoint.gast"),
                     "--data", str(work / "synth.json"), "--joint", "17",
                     "--out", str(tmp_path)]) == 1


def test_param_count_command(capsys):
    assert cli.main(["param-count", "--rf", "27", "--channels", "128"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    counts = {l.split()[0]: int(l.split()[1]) for l in lines}
    assert counts["total"] == 755219
    assert sum(v for k, v in counts.items() if k != "total") == counts["total"]


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--case", "semgconv", "--case", "mpjpe_loss"]) == 0
    assert "semgconv" in capsys.readouterr().out


def test_gast_threads(monkeypatch):
    monkeypatch.setenv("GAST_THREADS", "1")
    assert cli.worker_count(8) == 1
    monkeypatch.setenv("GAST_THREADS", "3")
    assert cli.worker_count(8) == 3 and cli.worker_count(2) == 2
    assert cli.fan_out(lambda v: v * 2, range(5)) == [0, 2, 4, 6, 8]
    monkeypatch.setenv("GAST_THREADS", "many")
    with pytest.raises(Exception):
        cli.worker_count(2)


def test_console_entry_point(work):
    res = subprocess.run([sys.executable, "-m", "gastnet.cli", "param-count", "--rf", "9",
                          "--channels", "8", "--heads", "2"], capture_output=True, text=True)
    assert res.returncode == 0 and "total" in res.stdout


def test_synth_file_loads(work):
    pairs = load_sequences(work / "synth.json")
    assert len(pairs) == 2 and pairs[0][0].n_frames == 30
