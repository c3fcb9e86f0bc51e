import json

import pytest

from semibackprop.cli import main

DATA = {"kind": "FirstTokenRepeatedOnce", "seq_len": 5, "vocab_size": 6, "n": 300}
MODEL = {"layers": 1, "hidden": 4, "heads": 2, "pooling": "first"}


def _config(tmp_path, **cfg):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def test_pipeline(tmp_path):
    cfg = _config(tmp_path, dataset=DATA, model=MODEL, train={"epochs": 2})
    out = tmp_path / "run"
    assert main(["gen-data", "--config", cfg, "--seed", "1", "--out", str(out)]) == 0
    data = out / "dataset.jsonl"
    assert data.exists()
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(out)]) == 0
    snap = str(out / "model")
    assert main(["analyze-branches", "--snapshot", snap, "--limit", "5", "--out", str(out)]) == 0
    rep = json.loads((out / "branches.json").read_text())
    assert rep["records"] and all(r["consistent"] for r in rep["records"])
    assert main(["analyze-entropy", "--snapshot", snap, "--data", str(data), "--limit", "3", "--out", str(out)]) == 0
    rows = json.loads((out / "entropy.json").read_text())
    assert len(rows) == 3 and all(r["mean_entropy"] >= 0 for r in rows)


def test_train_gate_failure_exits_nonzero(tmp_path):
    cfg = _config(tmp_path, dataset=DATA, model=MODEL, train={"epochs": 1}, gate_val_acc=1.01)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_mdl_command(tmp_path):
    cfg = _config(tmp_path, dataset={**DATA, "kind": "Contains1"}, model=MODEL, train={"epochs": 2}, min_val_acc=None)
    assert main(["mdl", "--config", cfg, "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "mdl.json").read_text())
    assert res["total"] == pytest.approx(sum(res["codelengths"]))


def test_oracle_check(tmp_path):
    cfg = _config(tmp_path, tapes=25)
    assert main(["oracle-check", "--config", cfg, "--seed", "3", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "oracle_check.json").read_text())["failures"] == []


def test_report_command(tmp_path):
    cfg = _config(tmp_path, seeds=[0], attribution=False, entropy_length=False, scatter=False, hidden_sizes=[2, 4])
    assert main(["report", "--config", cfg, "--out", str(tmp_path / "rep")]) == 0
    (root,) = (tmp_path / "rep").iterdir()
    text = (root / "fig6b_entropy_hidden.csv").read_text().splitlines()
    assert text[0].startswith("hidden,seed,mean_entropy") and len(text) == 3


def test_usage_errors(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "missing.json")]) == 2
    bad = _config(tmp_path, dataset={"kind": "BinCountOnes", "seq_len": 10, "num_classes": 3})
    assert main(["gen-data", "--config", bad, "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["no-such-command"])
