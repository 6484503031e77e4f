from __future__ import annotations

import numpy as np
import pytest

from convdraw_compression.errors import ContractViolation, CorruptStreamError, NumericFault
from convdraw_compression.params import (
    AdamConfig,
    ParamStore,
    adam_step,
    clip_grad_norm,
    load_checkpoint,
    restore_store,
    save_checkpoint,
)


@pytest.fixture
def store():
    store = ParamStore()
    store.add("w", np.array([[1.0, -2.0], [0.5, 0.0]]))
    store.add("b", np.zeros(2))
    return store


def test_first_adam_step_moves_by_learning_rate(store):
    grads = {"w": np.array([[0.1, -3.0], [2.0, 0.0]]), "b": np.array([1e-3, -1e-3])}
    adam_step(store, grads, AdamConfig(lr=0.01))
    assert store.step == 1
    np.testing.assert_allclose(store["w"].data, [[0.99, -1.99], [0.49, 0.0]], atol=1e-6)
    np.testing.assert_allclose(store["b"].data, [-0.01, 0.01], atol=1e-4)
    np.testing.assert_allclose(store.first_moments["w"], 0.1 * grads["w"])


def test_zero_learning_rate_freezes_values(store):
    before = store["w"].data.copy()
    adam_step(store, {"w": np.ones((2, 2))}, AdamConfig(lr=0.0))
    np.testing.assert_array_equal(store["w"].data, before)
    assert store.step == 1


def test_bad_gradients(store):
    with pytest.raises(NumericFault) as info:
        adam_step(store, {"w": np.full((2, 2), np.nan)}, AdamConfig())
    assert info.value.param == "w"
    assert store.step == 0
    with pytest.raises(ContractViolation):
        adam_step(store, {"w": np.ones(3)}, AdamConfig())
    with pytest.raises(ContractViolation):
        adam_step(store, {"missing": np.ones(1)}, AdamConfig())


def test_adam_config_ranges():
    with pytest.raises(ContractViolation):
        AdamConfig(lr=-1.0)
    with pytest.raises(ContractViolation):
        AdamConfig(beta1=1.0)
    with pytest.raises(ContractViolation):
        AdamConfig(eps=0.0)


def test_snapshot_restores_values_moments_and_step(store):
    adam_step(store, {"w": np.ones((2, 2)), "b": np.ones(2)}, AdamConfig())
    snapshot = store.snapshot()
    adam_step(store, {"w": -np.ones((2, 2)), "b": np.ones(2)}, AdamConfig())
    store.restore(snapshot)
    assert store.step == 1
    np.testing.assert_array_equal(store["w"].data, snapshot.values["w"])
    np.testing.assert_array_equal(store.second_moments["b"], snapshot.second_moments["b"])


def test_duplicate_names_and_shape_checks(store):
    with pytest.raises(ContractViolation):
        store.add("w", np.zeros(1))
    with pytest.raises(ContractViolation):
        store.assign("b", np.zeros(3))


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(clipped["a"], [0.6])
    np.testing.assert_allclose(clipped["b"], [0.8])
    unchanged, _ = clip_grad_norm(grads, 10.0)
    np.testing.assert_array_equal(unchanged["a"], grads["a"])


def test_checkpoint_round_trip(store, tmp_path):
    adam_step(store, {"w": np.ones((2, 2)), "b": np.ones(2)}, AdamConfig())
    path = tmp_path / "sub" / "model.ckpt"
    save_checkpoint(path, store, "layers = 1\n", extras={"codec.l1.k_min": np.array([-3.0, -4.0])})
    checkpoint = load_checkpoint(path, param_names=set(store))
    assert checkpoint.config_text == "layers = 1\n"
    assert checkpoint.step == 1
    assert list(checkpoint.extras) == ["codec.l1.k_min"]

    fresh = ParamStore()
    fresh.add("w", np.zeros((2, 2)))
    fresh.add("b", np.zeros(2))
    restore_store(fresh, checkpoint)
    np.testing.assert_allclose(fresh["w"].data, store["w"].data, rtol=1e-7)
    np.testing.assert_allclose(fresh.first_moments["b"], store.first_moments["b"], rtol=1e-7)
    assert fresh.step == 1


def test_checkpoint_without_optimizer_state(store, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, "", include_optimizer=False)
    checkpoint = load_checkpoint(path)
    assert checkpoint.step is None
    assert not checkpoint.first_moments
    assert set(checkpoint.params) == {"w", "b"}


def test_corrupt_checkpoints(store, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, "")
    payload = path.read_bytes()
    path.write_bytes(b"NOTACKPT" + payload[8:])
    with pytest.raises(CorruptStreamError):
        load_checkpoint(path)
    path.write_bytes(payload[:-3])
    with pytest.raises(CorruptStreamError):
        load_checkpoint(path)
    other = ParamStore()
    other.add("missing", np.zeros(1))
    path.write_bytes(payload)
    with pytest.raises(CorruptStreamError):
        restore_store(other, load_checkpoint(path))
