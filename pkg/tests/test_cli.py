import dataclasses
import json
import os

import numpy as np
import pytest

from meltmpc.artifacts import read_manifest, sha256_file, verify_manifest
from meltmpc.cli import main
from meltmpc.config import config_to_dict

from conftest import tiny_config


def write_tiny_config(tmp_path, **run_overrides):
    cfg = tiny_config()
    cfg.datagen.n_profiles = 1
    cfg.train.epochs = 2
    data = config_to_dict(cfg)
    for key, value in run_overrides.items():
        data["run"][key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run datagen + train once for the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = write_tiny_config(root)
    ds = str(root / "ds")
    model = str(root / "model")
    assert main(["datagen", "--config", cfg_path, "--out", ds]) == 0
    assert main(["train", "--config", cfg_path, "--dataset", ds, "--out", model]) == 0
    return {"root": root, "cfg": cfg_path, "ds": ds, "model": model}


class TestDatagen:
    def test_manifest_validates(self, pipeline):
        manifest = read_manifest(os.path.join(pipeline["ds"], "manifest.json"))
        assert verify_manifest(manifest, pipeline["ds"]) == []
        assert manifest["counts"]["train"] >= 1

    def test_same_seed_same_hash(self, pipeline, tmp_path):
        out2 = str(tmp_path / "ds2")
        assert main(["datagen", "--config", pipeline["cfg"], "--out", out2]) == 0
        a = read_manifest(os.path.join(pipeline["ds"], "manifest.json"))
        b = read_manifest(os.path.join(out2, "manifest.json"))
        assert a["artifacts"] == b["artifacts"]

    def test_different_seed_changes_hash(self, pipeline, tmp_path):
        out2 = str(tmp_path / "ds3")
        assert main(["datagen", "--config", pipeline["cfg"], "--seed", "777",
                     "--out", out2]) == 0
        a = read_manifest(os.path.join(pipeline["ds"], "manifest.json"))
        b = read_manifest(os.path.join(out2, "manifest.json"))
        assert a["artifacts"]["train.bin"] != b["artifacts"]["train.bin"]

    def test_invalid_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"run": {"controller": "nonsense"}}))
        assert main(["datagen", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2

    def test_unknown_key_exits_2(self, tmp_path):
        bad = tmp_path / "bad2.json"
        bad.write_text(json.dumps({"plant": {"does_not_exist": 1}}))
        assert main(["datagen", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2

    def test_existing_out_dir_rejected(self, pipeline):
        assert main(["datagen", "--config", pipeline["cfg"],
                     "--out", pipeline["ds"]]) == 2


class TestTrain:
    def test_model_loads_and_history_written(self, pipeline):
        from meltmpc.tide import load_model
        model = load_model(pipeline["model"])
        assert model.config.window == 6
        hist = (np.genfromtxt(os.path.join(pipeline["model"], "loss_history.csv"),
                              delimiter=",", names=True))
        assert hist.shape[0] == 2
        best = read_manifest(os.path.join(pipeline["model"], "manifest.json"))["best_val_loss"]
        assert best == pytest.approx(min(hist["val_loss"]))

    def test_univariate_flag(self, pipeline, tmp_path):
        out = str(tmp_path / "uni")
        assert main(["train", "--config", pipeline["cfg"], "--dataset", pipeline["ds"],
                     "--out", out, "--univariate"]) == 0
        from meltmpc.tide import load_model
        model = load_model(out)
        assert model.config.num_targets == 1
        assert model.metadata["target_channels"] == [0]

    def test_wp_mismatch_exits_2(self, pipeline, tmp_path):
        cfg = tiny_config()
        cfg.datagen.window = 5  # dataset was built with 6
        data = config_to_dict(cfg)
        bad = tmp_path / "mismatch.json"
        bad.write_text(json.dumps(data))
        assert main(["train", "--config", str(bad), "--dataset", pipeline["ds"],
                     "--out", str(tmp_path / "m")]) == 2


class TestEvalModel:
    def test_eval_runs(self, pipeline, capsys):
        assert main(["eval-model", "--model", pipeline["model"],
                     "--dataset", pipeline["ds"]]) == 0
        out = capsys.readouterr().out
        assert "x_temp_mape" in out


class TestRunAndCompare:
    def test_run_open_loop_and_compare(self, pipeline, tmp_path):
        r1 = str(tmp_path / "run_open")
        assert main(["run", "--config", pipeline["cfg"], "--out", r1,
                     "--controller", "open-loop"]) == 0
        manifest = read_manifest(os.path.join(r1, "manifest.json"))
        assert manifest["controller"] == "open_loop"
        assert os.path.exists(os.path.join(r1, "run.csv"))
        assert os.path.exists(os.path.join(r1, "solve_time_hist.csv"))

        r2 = str(tmp_path / "run_pid")
        assert main(["run", "--config", pipeline["cfg"], "--out", r2,
                     "--controller", "pid"]) == 0

        cmp_dir = str(tmp_path / "cmp")
        assert main(["compare", r1, r2, "--out", cmp_dir]) == 0
        rows = read_manifest(os.path.join(cmp_dir, "comparison.json"))["rows"]
        assert len(rows) == 2
        assert {r["controller"] for r in rows} == {"open_loop", "pid"}
        assert os.path.exists(os.path.join(cmp_dir, "comparison.csv"))

    def test_run_mpc_with_model_writes_solver_log(self, pipeline, tmp_path):
        out = str(tmp_path / "run_mpc")
        cfg_path = write_tiny_config(tmp_path, controller="mpc_unconstrained",
                                     max_sampling_steps=10)
        assert main(["run", "--config", cfg_path, "--out", out,
                     "--model", pipeline["model"]]) == 0
        log_path = os.path.join(out, "mpc_log.jsonl")
        assert os.path.exists(log_path)
        lines = [json.loads(l) for l in open(log_path)]
        assert len(lines) >= 1
        assert {"problem_hash", "status", "objective", "u_opt"} <= set(lines[0])

    def test_mpc_without_model_exits_2(self, pipeline, tmp_path):
        assert main(["run", "--config", pipeline["cfg"], "--controller", "mpc",
                     "--out", str(tmp_path / "no_model")]) == 2

    def test_run_determinism_hash(self, pipeline, tmp_path):
        hashes = []
        for sub in ("d1", "d2"):
            out = str(tmp_path / sub)
            assert main(["run", "--config", pipeline["cfg"], "--out", out,
                         "--controller", "pid"]) == 0
            hashes.append(read_manifest(os.path.join(out, "manifest.json"))["deterministic_hash"])
        assert hashes[0] == hashes[1]

    def test_workspace_env_var(self, pipeline, tmp_path, monkeypatch):
        monkeypatch.setenv("MELTMPC_WORKSPACE", str(tmp_path))
        assert main(["run", "--config", pipeline["cfg"], "--out", "ws_run",
                     "--controller", "open-loop"]) == 0
        assert os.path.exists(tmp_path / "ws_run" / "run.csv")
