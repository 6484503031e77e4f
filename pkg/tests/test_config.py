from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from convdraw_compression.config import (
    DatasetSpec,
    ModelConfig,
    RunConfig,
    TrainConfig,
    load_config,
    parse_key_values,
    parse_override,
)
from convdraw_compression.errors import ContractViolation
from convdraw_compression.settings import resolve_config_path, resolve_log_level

from conftest import TINY, tiny_config


def test_key_value_lines_with_comments():
    text = "# model\nmodel.T = 16   # steps\n\n  model.s = 0.5\n"
    assert parse_key_values(text) == {"model.T": "16", "model.s": "0.5"}
    with pytest.raises(ContractViolation):
        parse_key_values("model.layers 2\n")
    assert parse_override("train.lr = 0.001") == ("train.lr", "0.001")
    with pytest.raises(ContractViolation):
        parse_override("train.lr")


def test_aliases_fill_canonical_fields():
    cfg = ModelConfig.from_dict({"T": "16", "s": "0.25", "fixed_posterior_variance": "no"})
    assert cfg.timesteps == 16
    assert cfg.quantization_step == 0.25
    assert cfg.fixed_posterior_variance is False
    assert ModelConfig.from_dict({"n_t": 4}).timesteps == 4


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(
        "model.layers = 2\nmodel.T = 8\ntrain.lr = 0.001\ndata.path = ~/images.u8\nlog_level = debug\n",
        encoding="utf-8",
    )
    run = load_config(path, ["model.T=4", "train.grad_clip=10"])
    assert run.model.layers == 2
    assert run.model.timesteps == 4
    assert run.train.lr == 0.001
    assert run.train.grad_clip == 10.0
    assert run.data.path == Path("~/images.u8").expanduser()
    assert run.log_level == "DEBUG"
    assert load_config(None) == RunConfig()


@pytest.mark.parametrize("key", ["model.depth", "optimizer.lr", "layers"])
def test_unknown_keys_are_rejected(key):
    with pytest.raises(ContractViolation):
        RunConfig.from_dict({key: "1"})


def test_text_round_trip_and_fingerprint():
    cfg = tiny_config(beta=0.5, likelihood="dequantized_gaussian")
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    params = {"w": np.ones(3)}
    assert len(cfg.fingerprint(params)) == 8
    assert cfg.fingerprint(params) == cfg.fingerprint({"w": np.ones(3, dtype=np.float32)})
    assert cfg.fingerprint(params) != cfg.fingerprint({"w": np.full(3, 2.0)})
    assert cfg.fingerprint(params) != tiny_config(beta=0.25).fingerprint(params)


def test_derived_shapes():
    assert TINY.hidden_shape == (2, 2)
    assert TINY.latent_shape(1) == (2, 2, 2)
    assert TINY.active_layers == 1
    assert tiny_config(layers=2).active_layers == 2
    assert tiny_config(layers=2, latent_maps_2=0).active_layers == 1
    gaussian = tiny_config(likelihood="dequantized_gaussian")
    assert gaussian.canvas_channels == 2
    assert gaussian.dequantizes_input
    assert not tiny_config(likelihood="dequantized_gaussian", likelihood_mode="bin_integrated").dequantizes_input


@pytest.mark.parametrize(
    "changes",
    [
        {"layers": 3},
        {"kernel": 4},
        {"height": 5},
        {"beta": 0.0},
        {"likelihood": "poisson"},
        {"precision": "float16"},
        {"timesteps": 256},
    ],
)
def test_invalid_model_settings(changes):
    with pytest.raises(ContractViolation):
        tiny_config(**changes)


def test_training_settings():
    assert TrainConfig.from_dict({"lr": "0"}).lr == 0.0
    with pytest.raises(ContractViolation):
        TrainConfig.from_dict({"lr": "-1"})
    with pytest.raises(ContractViolation):
        TrainConfig(spike_threshold=1.0)
    with pytest.raises(ContractViolation):
        TrainConfig.from_dict({"batch_size": "many"})
    assert TrainConfig.from_dict({"grad_clip": "0"}).grad_clip is None


@pytest.mark.parametrize("text, expected", [("10", 10.0), ("0", None), ("none", None), ("Off", None), ("", None)])
def test_grad_clip_values(text, expected):
    assert TrainConfig.from_dict({"grad_clip": text}).grad_clip == expected


@pytest.mark.parametrize("text", ["abc", "-1", "inf"])
def test_grad_clip_rejects_nonsense(text):
    with pytest.raises(ContractViolation):
        TrainConfig.from_dict({"grad_clip": text})


def test_train_count_values():
    assert DatasetSpec.from_dict({"train_count": "12"}).train_count == 12
    assert DatasetSpec.from_dict({"train_count": "0"}).train_count == 0
    assert DatasetSpec.from_dict({"train_count": "none"}).train_count is None
    assert DatasetSpec.from_dict({}).train_count is None
    for text in ("-3", "twelve", "1.5"):
        with pytest.raises(ContractViolation):
            DatasetSpec.from_dict({"train_count": text})


@pytest.mark.parametrize("text, expected", [("yes", True), ("on", True), ("0", False), ("Off", False)])
def test_posterior_variance_flag(text, expected):
    assert ModelConfig.from_dict({"fixed_posterior_variance": text}).fixed_posterior_variance is expected
    with pytest.raises(ContractViolation):
        ModelConfig.from_dict({"fixed_posterior_variance": "maybe"})


def test_log_level_precedence(monkeypatch):
    assert resolve_log_level() == "INFO"
    assert resolve_log_level(configured="warning") == "WARNING"
    monkeypatch.setenv("CONVDRAW_LOG_LEVEL", "error")
    assert resolve_log_level(configured="warning") == "ERROR"
    assert resolve_log_level("debug", "warning") == "DEBUG"


def test_config_path_from_environment(monkeypatch, tmp_path):
    assert resolve_config_path() is None
    monkeypatch.setenv("CONVDRAW_CONFIG", str(tmp_path / "env.conf"))
    assert resolve_config_path() == tmp_path / "env.conf"
    assert resolve_config_path(tmp_path / "flag.conf") == tmp_path / "flag.conf"
