from __future__ import annotations

import signal
from dataclasses import replace

import numpy as np
import pytest

from convdraw_compression.config import ModelConfig
from convdraw_compression.draw import ConvDraw
from convdraw_compression.params import AdamConfig
from convdraw_compression.trainer import RollbackGuard, train_step

TINY = ModelConfig(
    layers=1,
    timesteps=3,
    channels=1,
    height=4,
    width=4,
    lstm_feature_maps=2,
    lstm_feature_maps_2=2,
    latent_maps=2,
    latent_maps_2=1,
    kernel=3,
    stride=2,
    recurrent_kernel=3,
    precision="float64",
)


def tiny_config(**changes) -> ModelConfig:
    return replace(TINY, **changes)


def binary_images(count: int, cfg: ModelConfig = TINY, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.random((count, *cfg.input_shape)) < 0.5).astype(np.float64)


def zero_weights(model: ConvDraw) -> ConvDraw:
    for _, tensor in model.store.items():
        tensor.data[...] = 0.0
    return model


HALVES = np.zeros((4, 1, 4, 4))
HALVES[0, :, :2, :] = 1.0
HALVES[1, :, 2:, :] = 1.0
HALVES[2, :, :, :2] = 1.0
HALVES[3, :, :, 2:] = 1.0


def pattern_images(count: int, seed: int = 0, flip: float = 0.05) -> np.ndarray:
    """Half-filled 4×4 tiles with a few flipped pixels; learnable by the TINY model."""

    rng = np.random.default_rng(seed)
    picks = HALVES[rng.integers(len(HALVES), size=count)]
    return np.where(rng.random(picks.shape) < flip, 1.0 - picks, picks)


def train_briefly(model: ConvDraw, steps: int, *, lr: float = 1e-2, batch_size: int = 8) -> ConvDraw:
    guard = RollbackGuard(store=model.store)
    adam = AdamConfig(lr=lr)
    for iteration in range(1, steps + 1):
        train_step(model, pattern_images(batch_size, seed=1000 + iteration), adam, guard, iteration=iteration)
    return model


@pytest.fixture(autouse=True)
def _isolated_environment(monkeypatch):
    monkeypatch.delenv("CONVDRAW_CONFIG", raising=False)
    monkeypatch.delenv("CONVDRAW_LOG_LEVEL", raising=False)


@pytest.fixture
def tiny_model() -> ConvDraw:
    return ConvDraw(TINY, seed=3)


@pytest.fixture
def two_layer_model() -> ConvDraw:
    return ConvDraw(tiny_config(layers=2), seed=5)


@pytest.fixture
def binary_batch() -> np.ndarray:
    return binary_images(2)


@pytest.fixture(autouse=True)
def _restore_signal_handlers():
    saved = {sig: signal.getsignal(sig) for sig in (signal.SIGINT, signal.SIGTERM)}
    yield
    for sig, handler in saved.items():
        signal.signal(sig, handler)


@pytest.fixture(scope="session")
def trained_tiny_model() -> ConvDraw:
    return train_briefly(ConvDraw(TINY, seed=11), 300)
