import json
import subprocess
import sys

import numpy as np
import pytest

from actiondiff.cli import OUT_ENV, main

SMALL_SCHEDULE = {"kind": "ou", "t_end": 1.0, "n": 20}


def write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_config_error_exits_two_and_names_field(tmp_path, capsys):
    cfg = write(tmp_path, "bad.json", {"schedule": {"kind": "ou", "n": -3}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "schedule.n" in capsys.readouterr().err


@pytest.mark.parametrize("doc,field", [
    ({"n_paths": 10, "colour": 1}, "config.colour"),
    ({"schedule": {"kind": "cosine"}}, "schedule.kind"),
    ({"mixture": {"weights": [1.0], "means": [0.0]}}, "mixture.variances"),
    ({"retain": [0, 999]}, "config.retain"),
])
def test_config_errors_name_the_field(tmp_path, capsys, doc, field):
    cfg = write(tmp_path, "bad.json", doc)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert field in capsys.readouterr().err


def test_missing_and_malformed_config(tmp_path, capsys):
    assert main(["ink", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert main(["ink", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path / "o")]) == 2
    assert main(["ink", "--seed", "-1", "--out", str(tmp_path / "o")]) == 2


def test_manifest_rerun_reproduces_outputs(tmp_path):
    cfg = write(tmp_path, "sim.json", {"schedule": SMALL_SCHEDULE, "n_paths": 500, "retain": [0, 10, 20]})
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", cfg, "--out", str(a), "--seed", "17", "--threads", "2"]) == 0
    assert main(["simulate", "--config", str(a / "manifest.json"), "--out", str(b), "--threads", "1"]) == 0
    for name in ("ensemble.csv", "metrics.jsonl", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 17 and manifest["config"]["n_paths"] == 500
    assert main(["ink", "--config", str(a / "manifest.json"), "--out", str(tmp_path / "c")]) == 2


def test_simulate_moments_track_exact(tmp_path):
    cfg = write(tmp_path, "sim.json", {"schedule": SMALL_SCHEDULE, "n_paths": 20000})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    for r in rows:
        assert abs(r["mean"][0] - np.ravel(r["exact_mean"])[0]) < 0.03
        assert r["variance"][0] == pytest.approx(np.ravel(r["exact_variance"])[0], rel=0.05)


def test_out_directory_from_environment(tmp_path, monkeypatch):
    cfg = write(tmp_path, "sim.json", {"schedule": SMALL_SCHEDULE, "n_paths": 10})
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env_out"))
    assert main(["simulate", "--config", cfg]) == 0
    assert (tmp_path / "env_out" / "manifest.json").is_file()


@pytest.mark.parametrize("kind", ["verify-bridge", "verify-dpm"])
def test_verify_runs_pass(tmp_path, kind, capsys):
    assert main([kind, "--out", str(tmp_path)]) == 0
    summary = (tmp_path / "summary.txt").read_text().splitlines()
    assert summary[0].startswith("A10") and summary[-1] == "PASS"
    assert "A10" in capsys.readouterr().out


def test_verify_rejects_unknown_criterion_option(tmp_path, capsys):
    cfg = write(tmp_path, "v.json", {"criteria": {"A10": {"colour": 1}}})
    assert main(["verify-bridge", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "config.criteria.A10.colour" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore:N=200 is small")
def test_ink_smoke(tmp_path):
    cfg = write(tmp_path, "ink.json", {"N": 200, "trials": 2000, "threshold": 0.36})
    assert main(["ink", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    row = json.loads((tmp_path / "o" / "metrics.jsonl").read_text().splitlines()[0])
    assert row["threshold"] == 0.36
    assert (tmp_path / "o" / "h_star.csv").is_file() and (tmp_path / "o" / "transfer.json").is_file()


def test_train_then_sample(tmp_path):
    cfg = write(tmp_path, "train.json", {"schedule": SMALL_SCHEDULE, "n_data": 500,
                                         "train": {"steps": 40, "batch_size": 64, "eval_interval": 20}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
    final = json.loads((tmp_path / "t" / "final.json").read_text())
    assert np.isfinite(final["delta_action"]) and final["score_l2"] > 0
    assert len((tmp_path / "t" / "metrics.jsonl").read_text().splitlines()) == 2
    scfg = write(tmp_path, "sample.json", {"model": str(tmp_path / "t" / "model.json"), "n_samples": 50,
                                           "snapshot_nodes": [10]})
    assert main(["sample", "--config", scfg, "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "samples.csv").read_text().count("\n") == 51
    assert (tmp_path / "s" / "snapshot_node00010.csv").is_file()


def test_sample_exact_and_bad_checkpoint(tmp_path, capsys):
    cfg = write(tmp_path, "s.json", {"schedule": SMALL_SCHEDULE, "n_samples": 100})
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    bad = write(tmp_path, "b.json", {"model": str(tmp_path / "missing.json")})
    assert main(["sample", "--config", bad, "--out", str(tmp_path / "b")]) == 2
    assert "config.model" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "actiondiff.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "verify-kernels" in res.stdout
