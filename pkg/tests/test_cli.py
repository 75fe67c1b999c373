import json
import subprocess
import sys

import pytest

from debiaskt.cli import build_parser, main
from debiaskt.training import TrainConfig


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--students", "40", "--questions", "20", "--concepts", "4", "--length", "12",
                 "--seed", "1", "--out", str(d / "sim.csv"), "--sidecar", str(d / "truth.json")]) == 0
    return d


TRAIN = ["--dim", "8", "--batch-size", "16", "--max-epochs", "3", "--patience", "2"]


def run_train(d, name, *extra):
    return main(["train", "--data", str(d / "sim.csv"), "--out", str(d / f"{name}.zip"),
                 "--log", str(d / f"{name}.jsonl"), *TRAIN, *extra])


def test_simulate_artifacts(workdir):
    side = json.loads((workdir / "truth.json").read_text())
    assert {"theta", "difficulty", "interactions"} <= set(side)
    assert len(side["theta"]) == 40


def test_preprocess_manifest(workdir):
    assert main(["preprocess", "--data", str(workdir / "sim.csv"), "--out", str(workdir / "clean.csv"),
                 "--manifest", str(workdir / "folds.json")]) == 0
    folds = json.loads((workdir / "folds.json").read_text())
    assert sorted(set(folds["folds"].values())) == [0, 1, 2, 3, 4]
    assert len(folds["folds"]) == 40


def test_bias_split(workdir):
    assert main(["bias-split", "--data", str(workdir / "sim.csv"), "--out-dir", str(workdir / "bins")]) == 0
    bins = json.loads((workdir / "bins" / "bins.json").read_text())
    assert set(bins.values()) <= {"low", "medium", "high"} and len(bins) == 40
    for name in ("low", "medium", "high"):
        assert (workdir / "bins" / f"{name}.csv").exists()


def test_train_evaluate_audit_explain(workdir, capsys):
    assert run_train(workdir, "ck", "--seed", "7", "--ablation", "no_con") == 0
    header = json.loads(__import__("zipfile").ZipFile(workdir / "ck.zip").read("config.json"))
    assert header["model_config"]["ablations"] == ["no_con"]
    assert header["train_config"]["seed"] == 7
    lines = (workdir / "ck.jsonl").read_text().splitlines()
    assert len(lines) >= 1
    assert set(json.loads(lines[0])) == {"epoch", "train_loss", "bce", "cl", "val_auc", "val_acc", "val_rmse"}

    assert main(["evaluate", "--checkpoint", str(workdir / "ck.zip"), "--fold", "0",
                 "--dump", str(workdir / "dump.csv"), "--report", str(workdir / "rep.json"),
                 "--dump-cv", str(workdir / "cv.json"), "--difficulty-out", str(workdir / "diff.json")]) == 0
    rep = json.loads((workdir / "rep.json").read_text())
    for k in ("auc", "acc", "rmse", "e_kl", "guessing_rate", "mistaking_rate", "p_table", "q_table"):
        assert k in rep
    cv = json.loads((workdir / "cv.json").read_text())
    assert all(set(v) <= {0, 1} for v in cv.values())

    assert main(["audit", "--dump", str(workdir / "dump.csv"), "--difficulty", str(workdir / "diff.json"),
                 "--out", str(workdir / "audit.json")]) == 0
    assert json.loads((workdir / "audit.json").read_text()) == rep

    capsys.readouterr()
    assert main(["explain", "--checkpoint", str(workdir / "ck.zip"), "--student", "s00", "--position", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["position"] == 2 and "label" in out
    assert main(["explain", "--checkpoint", str(workdir / "ck.zip"), "--student", "s00",
                 "--out", str(workdir / "all.json")]) == 0
    assert len(json.loads((workdir / "all.json").read_text())) == 12


def test_train_is_idempotent(workdir):
    assert run_train(workdir, "a") == 0
    assert run_train(workdir, "b") == 0
    assert (workdir / "a.zip").read_bytes() == (workdir / "b.zip").read_bytes()
    assert (workdir / "a.jsonl").read_text() == (workdir / "b.jsonl").read_text()


def test_config_file_and_override(workdir):
    cfg = workdir / "cfg.json"
    cfg.write_text(json.dumps({"dim": 8, "batch_size": 16, "max_epochs": 2, "cl_weight": 0.5, "seed": 3}))
    assert main(["train", "--data", str(workdir / "sim.csv"), "--out", str(workdir / "c.zip"),
                 "--config", str(cfg), "--seed", "4"]) == 0
    header = json.loads(__import__("zipfile").ZipFile(workdir / "c.zip").read("config.json"))["train_config"]
    assert header["cl_weight"] == 0.5 and header["seed"] == 4 and header["dim"] == 8


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path / "g.json")]) == 0
    assert json.loads((tmp_path / "g.json").read_text())["passed"] is True


def test_usage_error_exit_2():
    r = subprocess.run([sys.executable, "-m", "debiaskt.cli", "train", "--nope"], capture_output=True)
    assert r.returncode == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    assert main(["audit", "--dump", str(tmp_path / "missing.csv"), "--difficulty", str(tmp_path / "d.json")]) == 1
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("student_id,question_id,concept_ids,response,timestamp\ns1,1,1,3,0\n")
    assert main(["preprocess", "--data", str(bad), "--out", str(tmp_path / "o.csv")]) == 1


def test_help_lists_every_config_key(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices["train"]
    text = sub.format_help()
    for name in TrainConfig.__dataclass_fields__:
        flag = "--ablation" if name == "ablations" else "--" + name.replace("_", "-")
        assert flag in text
    for default in ("reported: 512", "reported: 0.001", "reported: 0.05", "reported: 64", "reported: 10 epochs"):
        assert default in " ".join(text.split())
