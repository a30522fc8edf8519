import json
import math
import subprocess
import sys

import pytest

from cdenets.cli import main

SUBCOMMANDS = ["synth", "train", "eval", "gridsearch", "run", "plot-data"]


def _run(capsys, *argv):
    """Run the CLI in-process; returns (exit status, stdout, stderr)."""
    try:
        status = main([str(a) for a in argv])
    except SystemExit as exc:
        status = exc.code
    out, err = capsys.readouterr()
    return status, out, err


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help(cmd, capsys):
    status, out, _ = _run(capsys, cmd, "--help")
    assert status == 0 and "usage:" in out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "cdenets", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("cdenets ")


@pytest.fixture
def synth_data(tmp_path, capsys):
    path = tmp_path / "d.json"
    status, out, _ = _run(capsys, "synth", "--samples", 300, "--seed", 1, "--out", path)
    assert status == 0
    return path, json.loads(out)["truth"]


def test_untrained_model_scores_near_uniform(synth_data, tmp_path, capsys):
    data, truth = synth_data
    ckpt = tmp_path / "m.ckpt"
    status, _, _ = _run(capsys, "train", "--data", data, "--out", ckpt, "--model", "multinomial", "--epochs", 0)
    assert status == 0
    status, out, _ = _run(capsys, "eval", "--checkpoint", ckpt, "--data", data, "--truth", truth)
    assert status == 0
    result = json.loads(out)
    assert abs(result["log_prob"] + math.log(32)) < 0.05
    assert result["oracle_log_prob"] > result["log_prob"]


def test_train_eval_with_config_and_standardize(synth_data, tmp_path, capsys):
    data, _ = synth_data
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "trendfilter", "lam": 0.1, "k": 1, "epochs": 5, "hidden": [16]}))
    ckpt = tmp_path / "tf.ckpt"
    status, _, _ = _run(capsys, "train", "--data", data, "--out", ckpt, "--config", cfg, "--lam", 0.5,
                        "--standardize")
    assert status == 0
    metrics = tmp_path / "metrics.json"
    status, out, _ = _run(capsys, "eval", "--checkpoint", ckpt, "--data", data, "--split", "val", "--out", metrics)
    assert status == 0 and json.loads(metrics.read_text()) == json.loads(out)
    assert json.loads(out)["model"] == "trendfilter"
    from cdenets.models import CdeModel
    model, meta = CdeModel.load(ckpt)
    assert model.config.lam == 0.5 and model.config.k == 1
    assert meta["extra"]["standardize"] is not None


def test_gridsearch(synth_data, tmp_path, capsys):
    data, _ = synth_data
    out_path, ckpt = tmp_path / "gs.json", tmp_path / "best.ckpt"
    status, out, _ = _run(capsys, "gridsearch", "--data", data, "--out", out_path, "--checkpoint", ckpt,
                          "--model", "mdn", "--components-grid", "1,2", "--epochs", 2)
    assert status == 0
    table = json.loads(out_path.read_text())
    assert len(table["cells"]) == 2 and ckpt.exists()
    assert json.loads(out)["selected"]["components"] in (1, 2)


def test_exit_codes(synth_data, tmp_path, capsys):
    data, _ = synth_data
    status, _, err = _run(capsys, "train", "--data", tmp_path / "nope.json", "--out", tmp_path / "x",
                          "--model", "point")
    assert status == 3 and err.startswith("error code=data")
    status, _, err = _run(capsys, "train", "--bogus")
    assert status == 2 and "code=usage" in err
    status, _, err = _run(capsys, "train", "--data", data, "--out", tmp_path / "x", "--model", "mdn",
                          "--components", 0)
    assert status == 2 and "code=config" in err
    status, _, err = _run(capsys, "run", "--manifest", tmp_path / "missing.json")
    assert status == 2
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    status, _, _ = _run(capsys, "eval", "--checkpoint", tmp_path / "bad.ckpt", "--data", data)
    assert status == 3


MANIFEST = {
    "name": "cli-tiny",
    "dataset": {"kind": "synthetic", "train_samples": 120, "classes": 3, "bins": 8},
    "models": ["trendfilter", "multinomial", "point"],
    "search": {"lambdas": [0.1], "ks": [0]},
    "train": {"epochs": 2, "hidden": [8]},
}


def test_run_and_plot_data(tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps(MANIFEST))
    report = tmp_path / "a.json"
    runs = []
    for _ in range(2):
        status, _, _ = _run(capsys, "run", "--manifest", tmp_path / "m.json", "--out", report)
        assert status == 0
        runs.append(report.read_bytes())
    assert runs[0] == runs[1]
    assert (tmp_path / "a.csv").exists()
    status, _, _ = _run(capsys, "run", "--manifest", tmp_path / "m.json", "--out", tmp_path / "b.json",
                        "--seed", 9)
    reports = [report, tmp_path / "b.json"]
    status, out, _ = _run(capsys, "plot-data", "--reports", *reports)
    lines = out.splitlines()
    assert status == 0 and lines[0] == "sample_size,model,log_prob"
    assert any(line.startswith("120,oracle,") for line in lines)
