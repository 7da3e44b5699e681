import hashlib
import json

import numpy as np
import pytest

from tsimta import cli
from tsimta.multimodal import MultimodalModel
from tsimta import autodiff as ad

SEED7_COHORT = "8d81b1ed8d74485e84049762714cded2fa39e55af5a6c5014a362f7a058b117c"


def run_cli(*argv):
    try:
        return cli.main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    path = d / "cohort.jsonl"
    assert run_cli("synth", "--out", path, "--n", 100, "--seed", 5) == 0
    return path


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = run_cli("train", "--dataset", dataset, "--out", out, "--epochs", 2, "--d-model", 8,
                 "--mlp-hidden", 16, "--seed", 2)
    assert rc == 0
    return out


def test_synth_default_seed7_checksum(tmp_path, capsys):
    path = tmp_path / "c.jsonl"
    assert run_cli("synth", "--out", path) == 0
    assert hashlib.sha256(path.read_bytes()).hexdigest() == SEED7_COHORT
    summary = json.loads(capsys.readouterr().out)
    assert summary["patients"] == 1000
    assert summary["eligible"] + sum(summary["excluded"].values()) == 1000


def test_synth_zero_patients_warns(tmp_path, caplog):
    path = tmp_path / "empty.jsonl"
    assert run_cli("synth", "--out", path, "--n", 0) == 0
    assert path.read_text() == ""
    assert "n_patients is 0" in caplog.text


def test_synth_no_imaging(tmp_path, capsys):
    assert run_cli("synth", "--out", tmp_path / "c.jsonl", "--n", 50, "--p-missing-imaging", 1.0) == 0
    assert json.loads(capsys.readouterr().out)["events"]["imaging"] == 0


def test_synth_config_file_overrides_flags(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_patients": 7}))
    assert run_cli("synth", "--out", tmp_path / "c.jsonl", "--n", 50, "--config", cfg) == 0
    assert json.loads(capsys.readouterr().out)["patients"] == 7


def test_usage_errors_exit_1(tmp_path):
    assert run_cli() == 1
    assert run_cli("bogus") == 1
    assert run_cli("synth") == 1
    assert run_cli("synth", "--out", tmp_path / "c.jsonl", "--signal-blood", 2.0) == 1
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"nope": 1}))
    assert run_cli("synth", "--out", tmp_path / "c.jsonl", "--config", cfg) == 1
    assert run_cli("train", "--dataset", tmp_path / "c.jsonl") == 1
    assert run_cli("train", "--dataset", tmp_path / "c.jsonl", "--out", tmp_path / "r", "--variant", "Early") == 1


def test_data_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"patient_id": "A"}\n')
    assert run_cli("train", "--dataset", bad, "--out", tmp_path / "r") == 2
    assert "line 1" in capsys.readouterr().err
    assert run_cli("train", "--dataset", tmp_path / "missing.jsonl", "--out", tmp_path / "r") == 2
    assert run_cli("compare", tmp_path / "a.json", tmp_path / "b.json") == 2


def test_numerical_failure_exit_3(dataset, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(MultimodalModel, "loss",
                        lambda self, batch, training=True, rng=None: (ad.Tensor(np.array(np.inf)), None))
    rc = run_cli("train", "--dataset", dataset, "--out", tmp_path / "r", "--epochs", 1, "--d-model", 8)
    assert rc == 3
    assert "epoch 1, batch 0" in capsys.readouterr().err


def test_train_writes_resolved_config_and_artifacts(trained, dataset):
    cfg = json.loads((trained / "resolved_config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["d_model"] == 8 and cfg["dataset"] == str(dataset)
    assert cfg["eval_cutoffs"] == [90.0, 180.0] and cfg["k_folds"] == 3
    for f in range(3):
        assert (trained / f"fold{f}" / "loss_curve.json").exists()
        assert (trained / f"fold{f}" / "preprocess.json").exists()


def test_eval_default_cutoffs_and_determinism(trained, tmp_path):
    assert run_cli("eval", "--run", trained) == 0
    for c in (90, 180):
        rep = json.loads((trained / f"report_cutoff{c}.json").read_text())
        assert rep["cutoff"] == c and len(rep["tasks"]) == 4
        assert all(len(f["tasks"]) == 4 for f in rep["folds"])
    out = tmp_path / "r90.json"
    assert run_cli("eval", "--run", trained, "--cutoff", 90, "--out", out) == 0
    assert out.read_bytes() == (trained / "report_cutoff90.json").read_bytes()


def test_retrain_reproduces_report_bytes(trained, dataset, tmp_path):
    again = tmp_path / "again"
    cfg = json.loads((trained / "resolved_config.json").read_text())
    cfg["out_dir"] = str(again)
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert run_cli("train", "--config", tmp_path / "cfg.json", "--out", tmp_path / "ignored") == 0
    assert not (tmp_path / "ignored").exists()
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run_cli("eval", "--run", trained, "--cutoff", 180, "--out", a) == 0
    assert run_cli("eval", "--run", again, "--cutoff", 180, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_compare_self_and_mismatch(trained, tmp_path, capsys):
    a = tmp_path / "a.json"
    assert run_cli("eval", "--run", trained, "--cutoff", 90, "--out", a) == 0
    out = tmp_path / "cmp.json"
    assert run_cli("compare", a, a, "--out", out) == 0
    res = json.loads(out.read_text())
    assert len(res["tasks"]) == 4 and len(res["pair"]) == 2
    assert all(t["degenerate"] and t["fisher_p"] in (1.0, None) for t in res["tasks"])
    b = tmp_path / "b.json"
    assert run_cli("eval", "--run", trained, "--cutoff", 180, "--out", b) == 0
    capsys.readouterr()
    assert run_cli("compare", a, b) == 2
    assert "non-comparable runs" in capsys.readouterr().err


def test_attn_dump(trained, tmp_path):
    out = tmp_path / "attn.jsonl"
    assert run_cli("attn-dump", "--run", trained, "--limit", 3, "--fold", 1, "--out", out) == 0
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert 1 <= len(lines) <= 3
    for d in lines:
        assert set(d["modalities"]) == {"blood", "imaging", "medication"}
        for rows in d["modalities"].values():
            assert all(r["source_t"] <= r["target_t"] <= 90.0 for r in rows)
    assert run_cli("attn-dump", "--run", trained, "--fold", 9, "--out", out) == 1


def test_eval_with_attention_output(trained, tmp_path):
    rep, attn = tmp_path / "r.json", tmp_path / "a.jsonl"
    assert run_cli("eval", "--run", trained, "--cutoff", 180, "--out", rep, "--attn-out", attn, "--limit", 2) == 0
    rows = [json.loads(l) for l in attn.read_text().splitlines()]
    # the limit counts held-out patients, some of whom died before the cutoff
    assert 1 <= len(rows) <= 2 and rows[0]["cutoff"] == 180.0
