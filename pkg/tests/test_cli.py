"""CLI contract tests: dependency errors, determinism, artifact formats, and
a small end-to-end smoke run."""

import json

import numpy as np
import pytest
import yaml

from biloop.cli import default_config, load_config, main

TINY = {
    "seed": 11,
    "world": {
        "length_m": 40.0,
        "density_per_m": 4.0,
        "lateral_spread_m": 2.0,
        "observe_range_m": 6.0,
        "descriptor_noise": 0.05,
        "view_dependence": 0.3,
        "position_noise_m": 0.02,
        "yaw_noise_deg": 1.0,
        "descriptor_dim": 12,
    },
    "mining": {
        "negative_min_dist": 15.0,
        "windows": {"forward": [0.5, 4.5], "backward": [2.0, 11.0]},
    },
    "embedding": {"clusters": 6, "embedding_dim": 16, "epochs": 4, "patience": 4},
    "posereg": {"hidden": [24, 12], "epochs": 4, "finetune_encoder": False},
    "localization": {"tau": 0.6, "keyframe_spacing_m": 2.0, "min_db_size": 5},
    "sweep": {"cells": [[2.0, 8.0]], "clusters": 4, "embedding_dim": 8, "epochs": 2},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def _run(command, config, run_dir, extra=()):
    return main([command, "--config", str(config), "--run-dir", str(run_dir), *extra])


class TestConfig:
    def test_defaults_carry_reference_values(self):
        cfg = default_config()
        assert cfg["embedding"]["clusters"] == 64
        assert cfg["world"]["descriptor_dim"] == 512
        assert cfg["embedding"]["embedding_dim"] == 4096
        assert cfg["mining"]["d_min"] == 2.0
        assert cfg["mining"]["d_max"] == 11.0
        assert cfg["mining"]["triplets_per_query"] == 6

    def test_override_merges(self, tiny_config):
        cfg = load_config(tiny_config)
        assert cfg["world"]["length_m"] == 40.0
        assert cfg["mining"]["d_max"] == 11.0  # untouched default

    def test_seed_override(self, tiny_config):
        assert load_config(tiny_config, seed_override=99)["seed"] == 99

    def test_embedding_dim_bound_checked(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"world": {"descriptor_dim": 4}, "embedding": {"clusters": 2}}))
        with pytest.raises(ValueError):
            load_config(path)


class TestErrorContracts:
    def test_mine_without_world_is_dependency_error(self, tiny_config, tmp_path, capsys):
        rc = _run("mine", tiny_config, tmp_path / "run")
        captured = capsys.readouterr()
        assert rc == 3
        payload = json.loads(captured.err.strip())
        assert payload["category"] == "missing-artifact"
        assert payload["producer"] == "synth"

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("version: 99\n")
        rc = main(["synth", "--config", str(bad), "--run-dir", str(tmp_path / "run")])
        assert rc == 2
        assert json.loads(capsys.readouterr().err.strip())["category"] == "invalid-config"

    def test_localize_needs_index(self, tiny_config, tmp_path, capsys):
        run = tmp_path / "run"
        assert _run("synth", tiny_config, run) == 0
        rc = _run("localize", tiny_config, run)
        payload = json.loads(capsys.readouterr().err.strip())
        assert rc == 3
        assert payload["producer"] == "index"


class TestRunDirResolution:
    def test_relative_run_dir_uses_env_root(self, tiny_config, tmp_path, monkeypatch):
        monkeypatch.setenv("BILOOP_RUN_DIR", str(tmp_path / "root"))
        assert _run("synth", tiny_config, "myrun") == 0
        assert (tmp_path / "root" / "myrun" / "world" / "poses.txt").exists()


@pytest.mark.slow
class TestPipeline:
    def test_end_to_end_and_determinism(self, tiny_config, tmp_path, capsys):
        runs = [tmp_path / "a" / "run", tmp_path / "b" / "run"]
        for run in runs:
            for command in ("synth", "mine", "train-embed", "train-pose", "index",
                            "localize", "eval", "sweep"):
                assert _run(command, tiny_config, run) == 0, command
        capsys.readouterr()
        manifests = [
            json.loads((run / "run_manifest.json").read_text())["artifacts"] for run in runs
        ]
        assert set(manifests[0]) == set(manifests[1])
        for key, entry in manifests[0].items():
            assert entry["sha256"] == manifests[1][key]["sha256"], key
        # artifacts carry format version headers
        run = runs[0]
        assert (run / "triplets_forward.txt").read_text().startswith("# biloop-triplets v1")
        assert (run / "loop_log.txt").read_text().startswith("# biloop-looplog v1")
        assert (run / "sweep.csv").read_text().startswith("# biloop-sweep v1")
        assert (run / "reports" / "summary_run.txt").read_text().startswith("# biloop-summary v1")
        snapshot = yaml.safe_load((run / "config.snapshot.yaml").read_text())
        assert snapshot["seed"] == 11

    def test_seed_changes_artifacts(self, tiny_config, tmp_path, capsys):
        run_a = tmp_path / "a" / "run"
        run_b = tmp_path / "b" / "run"
        for run, seed in ((run_a, "11"), (run_b, "12")):
            for command in ("synth", "mine"):
                assert _run(command, tiny_config, run, ("--seed", seed)) == 0
        capsys.readouterr()
        text_a = (run_a / "triplets_forward.txt").read_text()
        text_b = (run_b / "triplets_forward.txt").read_text()
        assert text_a != text_b
