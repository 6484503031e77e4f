"""Training loop with loss-spike rollback, checkpointing and curve logging."""
from __future__ import annotations

import csv
import logging
import math
import signal
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np

from .config import ModelConfig, TrainConfig
from .draw import ConvDraw, RandomNoise
from .errors import ContractViolation, NumericFault
from .imageio import emit_grid
from .likelihood import bits_per_dim
from .models import BenchRow, BetaSweepRow, TrainRecord
from .params import AdamConfig, ParamSnapshot, ParamStore, adam_step, clip_grad_norm
from .reports import BENCH_FIELDS, BETA_SWEEP_FIELDS, TRAIN_LOG_FIELDS, write_csv
from .tensor import no_grad

LOGGER = logging.getLogger(__name__)

KEPT = "kept"
REVERTED = "reverted"
MAX_CONSECUTIVE_ROLLBACKS = 20


@dataclass(slots=True)
class RollbackGuard:
    """Tracks an EMA of the loss and a recent parameter snapshot to revert to."""

    store: ParamStore
    spike_threshold: float = 3.0
    ema_decay: float = 0.99
    snapshot_interval: int = 500
    ema_loss: Optional[float] = None
    snapshot: Optional[ParamSnapshot] = None
    snapshot_step: int = 0
    rollbacks: int = 0

    def take_snapshot(self) -> None:
        self.snapshot = self.store.snapshot()
        self.snapshot_step = self.store.step

    def revert(self) -> None:
        if self.snapshot is None:
            return
        self.store.restore(self.snapshot)
        self.rollbacks += 1


def maybe_rollback(guard: RollbackGuard, current_loss: float) -> str:
    """Revert to the snapshot on a non-finite loss or one above threshold × EMA.

    The comparison is made on the excess over the EMA, ``loss − ema >
    (threshold − 1)·|ema|``, which equals ``loss > threshold·ema`` for positive
    EMAs and stays meaningful for density-ratio losses that dip below zero.
    """

    finite = math.isfinite(current_loss)
    if guard.ema_loss is None:
        if not finite:
            guard.revert()
            LOGGER.warning("Non-finite loss before any loss was observed; batch skipped")
            return REVERTED
        guard.ema_loss = current_loss
        guard.take_snapshot()
        return KEPT
    if not finite or current_loss - guard.ema_loss > (guard.spike_threshold - 1.0) * abs(guard.ema_loss):
        guard.revert()
        LOGGER.warning(
            "Loss %.6g against EMA %.6g; reverted to parameters of step %s",
            current_loss,
            guard.ema_loss,
            guard.snapshot_step,
        )
        return REVERTED
    guard.ema_loss = guard.ema_decay * guard.ema_loss + (1.0 - guard.ema_decay) * current_loss
    if guard.store.step - guard.snapshot_step >= guard.snapshot_interval:
        guard.take_snapshot()
    return KEPT


class TrainLog:
    """Per-step training records, mirrored to CSV when a path is given."""

    def __init__(self, path: Optional[Path] = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: List[TrainRecord] = []
        self._lock = threading.Lock()
        if self.path is not None:
            if not self.path.parent.exists():
                self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", encoding="utf-8", newline="") as fh:
                csv.DictWriter(fh, fieldnames=TRAIN_LOG_FIELDS, lineterminator="\n").writeheader()

    def append(self, record: TrainRecord) -> None:
        with self._lock:
            if self.records and record.step <= self.records[-1].step:
                raise ContractViolation(f"log steps must increase, got {record.step} after {self.records[-1].step}")
            self.records.append(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8", newline="") as fh:
                    writer = csv.DictWriter(fh, fieldnames=TRAIN_LOG_FIELDS, lineterminator="\n")
                    writer.writerow(record.as_csv_row())


def adam_config(cfg: TrainConfig) -> AdamConfig:
    return AdamConfig(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def train_step(
    model: ConvDraw,
    batch: np.ndarray,
    adam: AdamConfig,
    guard: RollbackGuard,
    *,
    iteration: int,
    seed: int = 0,
    grad_clip: Optional[float] = None,
    started: Optional[float] = None,
) -> TrainRecord:
    """Forward the full unroll, check for spikes, backpropagate and apply Adam.

    ``iteration`` numbers the attempt and keys the sampling noise, so the record
    sequence stays monotone even when a rollback rewinds the optimizer step.
    """

    store = model.store
    started = time.perf_counter() if started is None else started
    noise = RandomNoise(np.random.default_rng([seed, iteration, 2]))
    store.zero_grad()
    terms = None
    try:
        terms = model.negative_elbo(batch, noise)
        loss_value = float(terms.loss.data)
    except NumericFault as exc:
        LOGGER.warning("Numeric fault in forward pass at iteration %s: %s", iteration, exc)
        loss_value = math.nan

    dims = model.cfg.dims
    decision = maybe_rollback(guard, loss_value)
    if decision == REVERTED or terms is None:
        return TrainRecord(
            step=iteration,
            wall_ms=1000.0 * (time.perf_counter() - started),
            loss_nats=loss_value,
            loss_bits_per_dim=bits_per_dim(loss_value, dims),
            kl_nats=math.nan,
            lx_nats=math.nan,
            rolled_back=True,
        )

    terms.loss.backward()
    grads = store.gradients()
    if grad_clip is not None:
        grads, norm = clip_grad_norm(grads, grad_clip)
        LOGGER.debug("Gradient norm %.4g (clip %.4g)", norm, grad_clip)
    try:
        adam_step(store, grads, adam)
    except NumericFault as exc:
        LOGGER.warning("Skipping update at iteration %s: %s", iteration, exc)
        guard.revert()
        return TrainRecord(
            step=iteration,
            wall_ms=1000.0 * (time.perf_counter() - started),
            loss_nats=loss_value,
            loss_bits_per_dim=bits_per_dim(loss_value, dims),
            kl_nats=float(terms.kl.data.mean()),
            lx_nats=float(terms.lx.data.mean()),
            rolled_back=True,
        )
    return TrainRecord(
        step=iteration,
        wall_ms=1000.0 * (time.perf_counter() - started),
        loss_nats=loss_value,
        loss_bits_per_dim=bits_per_dim(loss_value, dims),
        kl_nats=float(terms.kl.data.mean()),
        lx_nats=float(terms.lx.data.mean()),
    )


class Trainer:
    """Runs train steps until the step budget is spent or a stop is requested."""

    def __init__(
        self,
        model: ConvDraw,
        cfg: TrainConfig,
        *,
        log_path: Optional[Path] = None,
        checkpoint_path: Optional[Path] = None,
    ) -> None:
        self.model = model
        self.cfg = cfg
        self.adam = adam_config(cfg)
        self.guard = RollbackGuard(
            store=model.store,
            spike_threshold=cfg.spike_threshold,
            ema_decay=cfg.ema_decay,
            snapshot_interval=cfg.snapshot_interval,
        )
        self.log = TrainLog(log_path)
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path is not None else None
        self.iteration = 0
        self._stop_event = threading.Event()
        self._started = time.perf_counter()

    def train_step(self, batch: np.ndarray) -> TrainRecord:
        self.iteration += 1
        record = train_step(
            self.model,
            batch,
            self.adam,
            self.guard,
            iteration=self.iteration,
            seed=self.cfg.seed,
            grad_clip=self.cfg.grad_clip,
            started=self._started,
        )
        self.log.append(record)
        return record

    def run(self, batches: Iterable[np.ndarray], max_steps: Optional[int] = None) -> List[TrainRecord]:
        """Train until ``max_steps`` optimizer steps have been applied."""

        budget = self.cfg.max_steps if max_steps is None else max_steps
        store = self.model.store
        LOGGER.info("Starting training for %s steps (T=%s, batch %s)", budget, self.model.cfg.timesteps, self.cfg.batch_size)
        self._install_signal_handlers()
        consecutive = 0
        iterator: Iterator[np.ndarray] = iter(batches)
        try:
            while store.step < budget and not self._stop_event.is_set():
                try:
                    batch = next(iterator)
                except StopIteration:
                    LOGGER.info("Batch source exhausted at step %s", store.step)
                    break
                record = self.train_step(batch)
                consecutive = consecutive + 1 if record.rolled_back else 0
                if consecutive >= MAX_CONSECUTIVE_ROLLBACKS:
                    raise NumericFault(
                        f"{consecutive} consecutive rollbacks; training cannot make progress",
                        step=store.step,
                    )
                if not record.rolled_back and store.step % self.cfg.log_interval == 0:
                    LOGGER.info(
                        "step %s: %.4f nats (%.5f bits/dim), KL %.4f, L^x %.4f",
                        store.step,
                        record.loss_nats,
                        record.loss_bits_per_dim,
                        record.kl_nats,
                        record.lx_nats,
                    )
                if (
                    self.checkpoint_path is not None
                    and self.cfg.checkpoint_interval
                    and not record.rolled_back
                    and store.step % self.cfg.checkpoint_interval == 0
                ):
                    self.model.save(self.checkpoint_path)
        finally:
            if self.checkpoint_path is not None:
                self.model.save(self.checkpoint_path)
            LOGGER.info("Training stopped at step %s after %s rollbacks", store.step, self.guard.rollbacks)
        return self.log.records

    def stop(self, *_args: object) -> None:
        """Request the loop to stop after the current step."""
        LOGGER.info("Stop requested")
        self._stop_event.set()

    def _install_signal_handlers(self) -> None:
        try:
            signal.signal(signal.SIGTERM, self.stop)
            signal.signal(signal.SIGINT, self.stop)
        except ValueError:
            # Only the main thread may install handlers.
            LOGGER.debug("Signal handlers could not be installed (non-main thread)")


def evaluate_batch(model: ConvDraw, images: np.ndarray, seed: int, beta: float = 1.0) -> Dict[str, float]:
    """Batch-mean bound terms under frozen noise, without recording gradients."""

    with no_grad():
        terms = model.negative_elbo(images, RandomNoise(np.random.default_rng(seed)), beta=beta)
    loss = float(terms.loss.data)
    return {
        "loss_nats": loss,
        "loss_bits_per_dim": float(bits_per_dim(loss, model.cfg.dims)),
        "kl_nats": float(terms.kl.data.mean()),
        "lx_nats": float(terms.lx.data.mean()),
    }


def bench_depth(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    batches_for: Callable[[int], Iterable[np.ndarray]],
    eval_images: np.ndarray,
    n_t_values: Sequence[int],
    budget_examples: int,
    *,
    eval_every: int = 10,
    csv_path: Optional[Path] = None,
) -> List[BenchRow]:
    """Train one model per timestep count on the same data and record learning curves.

    ``time_scaled_examples`` multiplies examples seen by n_t, the per-example
    cost of an unroll, so curves can be compared at equal compute.
    ``wall_ms`` counts train steps only; evaluation time is left out.
    """

    rows: List[BenchRow] = []
    for n_t in n_t_values:
        cfg = replace(model_cfg, timesteps=n_t)
        model = ConvDraw(cfg, seed=train_cfg.seed)
        trainer = Trainer(model, train_cfg)
        examples = 0
        training_s = 0.0
        for batch in batches_for(n_t):
            if examples >= budget_examples:
                break
            step_started = time.perf_counter()
            record = trainer.train_step(batch)
            training_s += time.perf_counter() - step_started
            if record.rolled_back:
                continue
            examples += len(batch)
            if model.store.step % eval_every == 0 or examples >= budget_examples:
                evaluated = evaluate_batch(model, eval_images, train_cfg.seed)
                rows.append(
                    BenchRow(
                        n_t=n_t,
                        examples_seen=examples,
                        wall_ms=1000.0 * training_s,
                        time_scaled_examples=examples * n_t,
                        loss_bits_per_dim=evaluated["loss_bits_per_dim"],
                    )
                )
        LOGGER.info("n_t=%s: %s examples in %.1fs of training", n_t, examples, training_s)
    if csv_path is not None:
        write_csv(csv_path, BENCH_FIELDS, (row.as_csv_row() for row in rows))
    return rows


@dataclass(slots=True)
class BetaSweepResult:
    rows: List[BetaSweepRow] = field(default_factory=list)
    sheets: List[Path] = field(default_factory=list)


def beta_sweep(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    batches_for: Callable[[float, int], Iterable[np.ndarray]],
    eval_images: np.ndarray,
    betas: Sequence[float] = (0.2, 0.4, 0.6, 0.8, 1.0),
    seeds: Sequence[int] = (0,),
    *,
    out_dir: Optional[Path] = None,
    sample_count: int = 16,
) -> BetaSweepResult:
    """Train one model per (β, seed), then measure its bound terms at β = 1.

    With ``out_dir`` each model also gets a λ = 1 sample sheet and the rows go
    to ``beta_sweep.csv``.
    """

    result = BetaSweepResult()
    for seed in seeds:
        for beta in betas:
            cfg = replace(model_cfg, beta=beta)
            model = ConvDraw(cfg, seed=seed)
            trainer = Trainer(model, replace(train_cfg, seed=seed))
            trainer.run(batches_for(beta, seed))
            evaluated = evaluate_batch(model, eval_images, seed)
            result.rows.append(
                BetaSweepRow(
                    beta=beta,
                    seed=seed,
                    kl_nats=evaluated["kl_nats"],
                    lx_nats=evaluated["lx_nats"],
                    bound_bits_per_dim=evaluated["loss_bits_per_dim"],
                )
            )
            LOGGER.info("beta=%s seed=%s: KL %.4f nats, L^x %.4f nats", beta, seed, evaluated["kl_nats"], evaluated["lx_nats"])
            if out_dir is not None:
                samples = model.sample(sample_count, 1.0, seed=seed)
                columns = max(1, int(math.ceil(math.sqrt(sample_count))))
                rows = [list(samples[start : start + columns]) for start in range(0, sample_count, columns)]
                result.sheets.append(emit_grid(rows, Path(out_dir) / f"samples_beta{beta:g}_seed{seed}.ppm"))
    if out_dir is not None:
        write_csv(Path(out_dir) / "beta_sweep.csv", BETA_SWEEP_FIELDS, (row.as_csv_row() for row in result.rows))
    return result
