import json

import pytest

from fixtures import write_accounting_fixture
from moepart.cli import main

SMALL = ["--d-model", "16", "--d-ffn", "16", "--experts", "4", "--layers", "1"]


@pytest.fixture
def out(tmp_path):
    return tmp_path / "runs"


def run(out, *argv):
    return main(["--out", str(out), *argv])


def test_generate_is_deterministic(out, tmp_path):
    a, b = tmp_path / "a.dsmoe", tmp_path / "b.dsmoe"
    assert run(out, "generate", *SMALL, "--seed", "3", "--output", str(a)) == 0
    assert run(out, "generate", *SMALL, "--seed", "3", "--output", str(b)) == 0
    assert a.read_bytes() == b.read_bytes()
    manifest = json.loads((out / "generate" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3 and len(manifest["model_sha256"]) == 64


def test_transform_reports_equivalence(out, capsys):
    assert run(out, "transform", *SMALL, "--mode", "complete", "--p", "2") == 0
    rep = json.loads((out / "transform" / "equivalence.json").read_text())
    assert rep["passed"] and rep["max_rel_error"] <= 1e-10
    assert "max relative error" in capsys.readouterr().out


def test_sweep_threshold_zero_drops_nothing(out, capsys):
    assert run(out, "sweep", *SMALL, "--thresholds", "0") == 0
    rows = (out / "sweep" / "sweep.csv").read_text().splitlines()
    assert rows[1].split(",")[:3] == ["0.0", "0.0", "0.0"]


def test_reconstruct_then_infer(out, tmp_path):
    rec = tmp_path / "rec.dsmoe"
    assert run(out, "reconstruct", *SMALL, "--calib-tokens", "64", "--output", str(rec)) == 0
    assert run(out, "infer", "--model", str(rec), "--policy", "2t", "--t", "0.3", "--num-tokens", "64") == 0
    doc = json.loads((out / "infer" / "infer.json").read_text())
    assert 0 < doc["drop_rate"] < 1
    manifest = json.loads((out / "infer" / "manifest.json").read_text())
    assert manifest["inputs"]["model"]["path"] == str(rec)


@pytest.mark.parametrize("shared,expected", [(0, 0.20), (1, 200 / 1500)])
def test_infer_accounting_fixture(out, tmp_path, shared, expected):
    model, tokens = write_accounting_fixture(tmp_path, shared)
    argv = ["infer", "--model", str(model), "--tokens", str(tokens), "--policy", "2t", "--t-major", "0.1", "--t-minor", "0.3"]
    assert run(out, *argv) == 0
    doc = json.loads((out / "infer" / "infer.json").read_text())
    assert doc["layers"][0]["dropped_units"] == pytest.approx(200.0)
    assert doc["drop_rate"] == pytest.approx(expected, abs=1e-12)


def test_sim_ep_balanced_load_aware_matches_uniform(out):
    common = ["sim-ep", *SMALL, "--balanced", "--num-tokens", "64", "--policy", "1t", "--t", "0.4"]
    assert run(out, *common) == 0
    uniform = json.loads((out / "sim-ep" / "ep_report.json").read_text())
    assert run(out, *common, "--load-aware") == 0
    aware = json.loads((out / "sim-ep" / "ep_report.json").read_text())
    assert aware["devices"] == uniform["devices"]
    assert aware["drop_rate"] == uniform["drop_rate"]


def test_sim_comm_and_analyze(out):
    assert run(out, "sim-comm", "--ep", "2", "--tp", "2", "--sizes", "64,4096", "--tokens-per-device", "8") == 0
    assert (out / "sim-comm" / "bandwidth.csv").read_text().count("\n") == 3
    assert run(out, "analyze-gating", *SMALL, "--num-tokens", "32") == 0
    assert (out / "analyze-gating" / "gating_layer0.csv").exists()


def test_config_file_defaults(out, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"thresholds": "0,0.2", "num_tokens": 16}))
    assert run(out, "--config", str(cfg), "sweep", *SMALL) == 0
    assert len((out / "sweep" / "sweep.csv").read_text().splitlines()) == 3
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit) as e:
        run(out, "--config", str(cfg), "sweep", *SMALL)
    assert e.value.code == 2


def test_exit_codes(out, tmp_path):
    assert run(out, "infer", "--model", str(tmp_path / "missing.dsmoe")) == 6
    bad = tmp_path / "bad.dsmoe"
    bad.write_bytes(b"NOTAMODEL" * 4)
    assert run(out, "infer", "--model", str(bad)) == 11
    assert run(out, "transform", *SMALL, "--mode", "partial", "--p", "3") == 4
    with pytest.raises(SystemExit) as e:
        run(out, "transform", "--mode", "sideways", "--p", "2")
    assert e.value.code == 2


@pytest.mark.parametrize(
    "argv,files",
    [
        (["sweep", *SMALL, "--thresholds", "0,0.2,0.4", "--num-tokens", "32"], ["sweep.csv", "manifest.json"]),
        (["sim-ep", *SMALL, "--num-tokens", "32", "--policy", "2t", "--t", "0.3", "--load-aware"], ["ep_report.json", "ep_report.csv"]),
        (["sim-comm", "--ep", "2", "--tp", "4", "--tokens-per-device", "8"], ["comm_report.json", "bandwidth.csv"]),
    ],
)
def test_outputs_are_byte_identical_across_runs(tmp_path, argv, files):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, *argv) == 0 and run(b, *argv) == 0
    for name in files:
        assert (a / argv[0] / name).read_bytes() == (b / argv[0] / name).read_bytes()
