import hashlib
import json
import subprocess
import sys

import pytest

from theftgate import cli


def _run(argv, capsys):
    code = cli.main(argv)
    return code, capsys.readouterr().err.strip().splitlines()


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A fixed-seed run through synth, ingest, split, train and eval."""
    d = tmp_path_factory.mktemp("run")
    cwd = pytest.MonkeyPatch()
    cwd.chdir(d)
    steps = [
        ["synth", "--seed", "11", "--out", "syn", "--users", "2", "--rows-per-user", "1500",
         "--imbalance", "10"],
        ["ingest", "--gsf", "syn/gsf.csv", "--laf", "syn/laf.csv", "--labels", "syn/labels.csv",
         "--out", "frame.bin"],
        ["split", "--seed", "1", "--frame", "frame.bin", "--train-out", "train.bin",
         "--test-out", "test.bin"],
        ["train", "--seed", "2", "--frame", "train.bin", "--out", "pipeline.bin", "--trees", "10",
         "--rounds", "10"],
        ["eval", "--pipeline", "pipeline.bin", "--test", "test.bin"],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    yield d
    cwd.undo()


def test_golden_eval_report(workdir):
    report = json.loads((workdir / "report.json").read_text())
    assert report["stage1"]["counts"] == {"tp": 55, "fp": 0, "tn": 682, "fn": 9}
    assert report["for_rate"] == 0.140625 and report["fpr_rate"] == 0.0
    assert report["macro_f1"] == 1.0
    assert report["metadata"]["stage2_invocations"] == 55


def test_synth_outputs_and_manifest(workdir):
    for name in ("gsf.csv", "laf.csv", "labels.csv", "synth_config.json", "manifest.json"):
        assert (workdir / "syn" / name).is_file()
    manifest = json.loads((workdir / "syn" / "manifest.json").read_text())
    assert manifest["seed"] == 11 and manifest["command"] == "synth"
    assert "--threads" not in manifest["argv"]
    assert manifest["outputs"]["syn/gsf.csv"] == _sha(workdir / "syn" / "gsf.csv")
    assert set(manifest) == {"argv", "command", "inputs", "outputs", "seed", "versions"}


def test_ingest_report_and_default_threshold(workdir):
    report = json.loads((workdir / "frame.bin.report.json").read_text())
    assert report["null_filter"]["threshold"] == 0.7
    assert report["malformed"]["counts"] == {}


def test_replay_reproduces_and_leaves_inputs_alone(workdir, monkeypatch, capsys):
    monkeypatch.chdir(workdir)
    before = {p: _sha(workdir / p) for p in ("train.bin", "pipeline.bin")}
    code, _ = _run(["replay", "--check", "pipeline.bin.manifest.json", "--threads", "3"], capsys)
    assert code == 0
    assert {p: _sha(workdir / p) for p in before} == before


def test_replay_check_detects_drift(workdir, monkeypatch, capsys):
    monkeypatch.chdir(workdir)
    manifest = json.loads((workdir / "report.json.manifest.json").read_text())
    manifest["outputs"]["report.json"] = "0" * 64
    (workdir / "stale.json").write_text(json.dumps(manifest))
    code, err = _run(["replay", "--check", "stale.json"], capsys)
    assert code == 1 and json.loads(err[-1])["error"] == "RuntimeError"


@pytest.mark.parametrize("argv", [
    ["train", "--frame", "x.bin", "--out", "p.bin"],  # missing --seed
    ["synth", "--seed", "1", "--out", "o", "--bogus"],
    ["nosuchcommand"],
    ["ingest", "--gsf", "missing.csv", "--laf", "missing.csv", "--labels", "missing.csv",
     "--out", "f.bin"],
    ["synth", "--seed", "1", "--out", "o", "--overlap", "2"],
])
def test_usage_errors_exit_2_with_one_json_line(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    code, err = _run(argv, capsys)
    assert code == 2
    payload = json.loads(err[-1])
    assert payload["exit_code"] == 2 and payload["message"]


def test_schema_mismatch_exits_2(workdir, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(workdir)
    code, err = _run(["density", "--frame", "frame.bin", "--out", str(tmp_path / "d.csv"),
                      "--features", "no_such_column"], capsys)
    assert code == 2 and json.loads(err[-1])["error"] == "SchemaError"


def test_corrupt_input_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "bad.bin").write_bytes(b"garbage")
    code, err = _run(["split", "--seed", "1", "--frame", "bad.bin", "--train-out", "a.bin",
                      "--test-out", "b.bin"], capsys)
    assert code == 2 and json.loads(err[-1])["error"] == "FrameFormatError"


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "theftgate.cli", "--version"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip()
