import json

import numpy as np
import pytest

from idsis.artifacts import output_lock, write_manifest
from idsis.config import RunConfig, config_hash, fr_config, parse_config
from idsis.errors import ConfigurationError
from idsis.identity import ensure_configs_independent


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("")
    cfg = parse_config(path)
    assert cfg == RunConfig()
    assert cfg.lambda_id == 10.0
    assert cfg.lr_g == 1e-4
    assert cfg.lr_d == 4e-4
    assert cfg.batch_size == 16
    assert cfg.iterations == 20000


def test_file_values_applied(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("lambda_id: 5\nresolution: 32\nstage_dims: [16, 8]\n")
    cfg = parse_config(path)
    assert cfg.lambda_id == 5.0
    assert cfg.resolution == 32
    assert cfg.stage_dims == (16, 8)


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("lambda_id: 10\n")
    cfg = parse_config(path, overrides={"lambda_id": "0"})
    assert cfg.lambda_id == 0.0


def test_unknown_key_suggests_correction(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("lamda_id: 10\n")
    with pytest.raises(ConfigurationError, match="lambda_id"):
        parse_config(path)


def test_unknown_override_rejected():
    with pytest.raises(ConfigurationError, match="unknown config key"):
        parse_config(None, overrides={"no_such_key": 1})


def test_type_mismatch_names_key(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("iterations: not-a-number\n")
    with pytest.raises(ConfigurationError, match="iterations"):
        parse_config(path)


def test_env_seed_override(tmp_path, monkeypatch):
    monkeypatch.setenv("IDSIS_SEED", "777")
    cfg = parse_config(None, overrides={"seed": 5})
    assert cfg.seed == 777


def test_config_hash_stable_and_sensitive():
    a, b = RunConfig(), RunConfig()
    assert config_hash(a) == config_hash(b)
    c = RunConfig(lambda_id=0.0)
    assert config_hash(a) != config_hash(c)


def test_fr_configs_independent_by_default():
    cfg = RunConfig()
    ensure_configs_independent(fr_config(cfg, "train"), fr_config(cfg, "eval"))


def test_output_lock_blocks_second_writer(tmp_path):
    with output_lock(tmp_path):
        with pytest.raises(ConfigurationError, match="locked"):
            with output_lock(tmp_path):
                pass
    # released after the first writer exits
    with output_lock(tmp_path):
        pass


def test_manifest_contents(tmp_path):
    artifact = tmp_path / "input.bin"
    artifact.write_bytes(b"hello")
    manifest = write_manifest(
        tmp_path, "train", RunConfig(), inputs={"data": artifact}, outputs=["model.pt"]
    )
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["command"] == "train"
    assert on_disk["config_hash"] == config_hash(RunConfig())
    assert on_disk["inputs"]["data"]["sha256"] == manifest["inputs"]["data"]["sha256"]
    assert len(on_disk["inputs"]["data"]["sha256"]) == 64
    assert on_disk["outputs"] == ["model.pt"]
    assert "seeds" in on_disk and "timestamp" in on_disk
