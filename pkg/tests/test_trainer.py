from __future__ import annotations

import csv
import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import TINY, binary_images, pattern_images, tiny_config
from convdraw_compression.config import TrainConfig
from convdraw_compression.draw import ConvDraw
from convdraw_compression.errors import ContractViolation
from convdraw_compression.models import TrainRecord
from convdraw_compression.params import AdamConfig
from convdraw_compression.trainer import (
    KEPT,
    REVERTED,
    RollbackGuard,
    Trainer,
    TrainLog,
    bench_depth,
    beta_sweep,
    evaluate_batch,
    maybe_rollback,
    train_step,
)


def _record(step: int) -> TrainRecord:
    return TrainRecord(step=step, wall_ms=0.0, loss_nats=1.0, loss_bits_per_dim=0.1, kl_nats=0.5, lx_nats=0.5)


def _train_cfg(**changes) -> TrainConfig:
    values = dict(lr=1e-3, batch_size=2, max_steps=3, seed=5, snapshot_interval=1, log_interval=1)
    values.update(changes)
    return TrainConfig(**values)


class TestRollbackRule:
    def _guard(self, ema: float) -> RollbackGuard:
        model = ConvDraw(TINY)
        guard = RollbackGuard(store=model.store, spike_threshold=3.0)
        guard.take_snapshot()
        guard.ema_loss = ema
        return guard

    def test_first_finite_loss_seeds_the_average(self):
        guard = RollbackGuard(store=ConvDraw(TINY).store)
        assert maybe_rollback(guard, 12.0) == KEPT
        assert guard.ema_loss == 12.0
        assert guard.snapshot is not None

    def test_spike_against_positive_average(self):
        guard = self._guard(10.0)
        assert maybe_rollback(guard, 29.0) == KEPT
        guard.ema_loss = 10.0
        assert maybe_rollback(guard, 31.0) == REVERTED
        assert guard.rollbacks == 1
        assert guard.ema_loss == 10.0

    def test_spike_against_negative_average(self):
        guard = self._guard(-10.0)
        assert maybe_rollback(guard, 9.0) == KEPT
        guard.ema_loss = -10.0
        assert maybe_rollback(guard, 11.0) == REVERTED

    @pytest.mark.parametrize("loss", [math.nan, math.inf])
    def test_non_finite_loss_reverts(self, loss):
        guard = self._guard(1.0)
        assert maybe_rollback(guard, loss) == REVERTED

    def test_average_moves_with_decay(self):
        guard = self._guard(10.0)
        guard.ema_decay = 0.5
        maybe_rollback(guard, 12.0)
        assert guard.ema_loss == pytest.approx(11.0)


class TestTrainStep:
    def test_injected_nan_restores_snapshot(self):
        model = ConvDraw(TINY, seed=2)
        guard = RollbackGuard(store=model.store, snapshot_interval=1)
        adam = AdamConfig(lr=1e-3)
        batch = binary_images(2)
        for iteration in range(1, 4):
            assert not train_step(model, batch, adam, guard, iteration=iteration).rolled_back
        snapshot = guard.snapshot
        assert snapshot is not None and snapshot.step == guard.snapshot_step

        model.store["write.bias"].data[...] = np.nan
        record = train_step(model, batch, adam, guard, iteration=4)
        assert record.rolled_back
        assert math.isnan(record.loss_nats)
        assert model.store.step == snapshot.step
        for name, tensor in model.store.items():
            np.testing.assert_array_equal(tensor.data, snapshot.values[name])
            np.testing.assert_array_equal(model.store.first_moments[name], snapshot.first_moments[name])
            np.testing.assert_array_equal(model.store.second_moments[name], snapshot.second_moments[name])

        assert not train_step(model, batch, adam, guard, iteration=5).rolled_back

    def test_noise_depends_on_iteration(self):
        batch = binary_images(2)
        losses = []
        for iteration in (1, 1, 2):
            model = ConvDraw(TINY, seed=2)
            guard = RollbackGuard(store=model.store)
            losses.append(train_step(model, batch, AdamConfig(), guard, iteration=iteration, seed=3).loss_nats)
        assert losses[0] == losses[1] != losses[2]

    def test_clipped_update(self):
        model = ConvDraw(TINY, seed=2)
        before = {name: tensor.data.copy() for name, tensor in model.store.items()}
        guard = RollbackGuard(store=model.store)
        train_step(model, binary_images(2), AdamConfig(lr=1e-2), guard, iteration=1, grad_clip=1e-3)
        moved = [name for name, tensor in model.store.items() if not np.array_equal(tensor.data, before[name])]
        assert moved
        assert model.store.step == 1

    def test_loss_falls_on_a_fixed_batch(self):
        model = ConvDraw(TINY, seed=4)
        batch = pattern_images(8, seed=9)
        before = evaluate_batch(model, batch, seed=0)["loss_nats"]
        guard = RollbackGuard(store=model.store)
        adam = AdamConfig(lr=1e-2)
        records = [train_step(model, batch, adam, guard, iteration=iteration) for iteration in range(1, 61)]
        assert model.store.step > 0
        assert evaluate_batch(model, batch, seed=0)["loss_nats"] < before
        kept = [record.loss_nats for record in records if not record.rolled_back]
        assert np.mean(kept[-10:]) < np.mean(kept[:10])


class TestTrainer:
    def test_run_reaches_budget_with_monotone_log(self, tmp_path):
        model = ConvDraw(TINY, seed=1)
        log_path = tmp_path / "train_log.csv"
        checkpoint = tmp_path / "model.ckpt"
        trainer = Trainer(model, _train_cfg(), log_path=log_path, checkpoint_path=checkpoint)
        records = trainer.run(itertools.repeat(binary_images(2)))
        assert model.store.step == 3
        steps = [record.step for record in records]
        assert steps == sorted(set(steps))
        assert checkpoint.exists()
        with log_path.open(encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(row["step"]) for row in rows] == steps
        assert float(rows[0]["loss_nats"]) == pytest.approx(records[0].loss_nats)

    def test_stop_before_run(self):
        model = ConvDraw(TINY, seed=1)
        trainer = Trainer(model, _train_cfg())
        trainer.stop()
        assert trainer.run(itertools.repeat(binary_images(2))) == []
        assert model.store.step == 0

    def test_exhausted_source_ends_training(self):
        model = ConvDraw(TINY, seed=1)
        trainer = Trainer(model, _train_cfg(max_steps=10))
        trainer.run([binary_images(2)] * 2)
        assert model.store.step == 2

    def test_zero_learning_rate_keeps_parameters(self):
        model = ConvDraw(TINY, seed=1)
        before = model.fingerprint()
        Trainer(model, _train_cfg(lr=0.0, max_steps=2)).run(itertools.repeat(binary_images(2)))
        assert model.fingerprint() == before

    def test_log_rejects_non_increasing_steps(self):
        log = TrainLog()
        log.append(_record(1))
        with pytest.raises(ContractViolation):
            log.append(_record(1))

    def test_same_seed_gives_identical_log(self, tmp_path, monkeypatch):
        monkeypatch.setattr("convdraw_compression.trainer.time", SimpleNamespace(perf_counter=lambda: 0.0))
        batches = [pattern_images(2, seed=index) for index in range(5)]
        logs = []
        fingerprints = []
        for name, seed in (("first", 5), ("second", 5), ("reseeded", 6)):
            model = ConvDraw(TINY, seed=1)
            path = tmp_path / f"{name}.csv"
            Trainer(model, _train_cfg(max_steps=5, seed=seed), log_path=path).run(batches)
            logs.append(path.read_bytes())
            fingerprints.append(model.fingerprint())
        assert logs[0] == logs[1] != logs[2]
        assert fingerprints[0] == fingerprints[1] != fingerprints[2]


class TestExperiments:
    def test_evaluate_batch_keys(self):
        result = evaluate_batch(ConvDraw(TINY), binary_images(3), seed=0)
        assert set(result) == {"loss_nats", "loss_bits_per_dim", "kl_nats", "lx_nats"}
        assert result["loss_nats"] == pytest.approx(result["kl_nats"] + result["lx_nats"])

    def test_bench_depth_rows(self, tmp_path):
        rows = bench_depth(
            tiny_config(),
            _train_cfg(),
            lambda _n_t: itertools.repeat(binary_images(2)),
            binary_images(2, seed=1),
            [1, 2],
            budget_examples=4,
            eval_every=1,
            csv_path=tmp_path / "bench.csv",
        )
        assert [row.n_t for row in rows] == [1, 1, 2, 2]
        assert rows[-1].time_scaled_examples == 4 * 2
        assert (tmp_path / "bench.csv").read_text(encoding="utf-8").startswith("n_t,")

    def test_bench_time_leaves_out_evaluation(self, monkeypatch):
        clock = SimpleNamespace(now=0.0)
        monkeypatch.setattr("convdraw_compression.trainer.time", SimpleNamespace(perf_counter=lambda: clock.now))
        real_step = Trainer.train_step

        def one_second_step(self, batch):
            clock.now += 1.0
            return real_step(self, batch)

        def slow_evaluation(*args, **kwargs):
            clock.now += 100.0
            return evaluate_batch(*args, **kwargs)

        monkeypatch.setattr(Trainer, "train_step", one_second_step)
        monkeypatch.setattr("convdraw_compression.trainer.evaluate_batch", slow_evaluation)
        rows = bench_depth(
            tiny_config(),
            _train_cfg(),
            lambda _n_t: itertools.repeat(binary_images(2)),
            binary_images(2, seed=1),
            [1],
            budget_examples=6,
            eval_every=1,
        )
        assert [row.wall_ms for row in rows] == pytest.approx([1000.0, 2000.0, 3000.0])

    @pytest.mark.slow
    def test_beta_sweep_writes_sheets(self, tmp_path):
        result = beta_sweep(
            tiny_config(),
            _train_cfg(max_steps=1),
            lambda _beta, _seed: itertools.repeat(binary_images(2)),
            binary_images(2, seed=1),
            betas=[0.5, 1.0],
            seeds=[0],
            out_dir=tmp_path,
            sample_count=4,
        )
        assert [row.beta for row in result.rows] == [0.5, 1.0]
        assert all(path.exists() for path in result.sheets)
        assert (tmp_path / "beta_sweep.csv").exists()

    @pytest.mark.slow
    def test_small_beta_spends_more_kl(self):
        def batches_for(_beta, seed):
            return (pattern_images(8, seed=100 * seed + step) for step in itertools.count())

        result = beta_sweep(
            tiny_config(),
            _train_cfg(lr=1e-2, batch_size=8, max_steps=150, snapshot_interval=500, log_interval=50),
            batches_for,
            pattern_images(32, seed=999),
            betas=[0.2, 1.0],
            seeds=[0, 1],
        )
        kl = {beta: np.mean([row.kl_nats for row in result.rows if row.beta == beta]) for beta in (0.2, 1.0)}
        assert kl[0.2] > kl[1.0]
