"""Variational bounds, KL profiles, distortion metrics and progression sheets."""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .data import Preparer, make_preparer
from .draw import ConvDraw, RandomNoise, SamplePolicy
from .errors import ContractViolation
from .imageio import emit_grid
from .likelihood import bits_per_dim
from .models import EvalResult, ImageBatch, KlProfile
from .reports import KL_PROFILE_FIELDS, kl_profile_rows, write_csv
from .tensor import no_grad

LOGGER = logging.getLogger(__name__)

PROGRESSION_SCHEDULE = (2, 4, 6, 8, 10, 14, 18, 25, 32)
PROGRESSION_REFERENCE_STEPS = 32
BASELINE_CLAMP = 1e-3

Images = Union[ImageBatch, np.ndarray]


def default_preparer(model: ConvDraw, *, fmt: str = "raw_u8_tensor", binarize_mode: str = "dynamic") -> Preparer:
    """u8 pixels to model input the way training prepared them."""

    cfg = model.cfg
    return make_preparer(
        fmt=fmt,
        likelihood=cfg.likelihood,
        binarize_mode=binarize_mode,
        dequantize_step=cfg.quantization_step if model.dequantizes_input else None,
    )


def eval_bound(
    model: ConvDraw,
    images: np.ndarray,
    *,
    noise_draws: int = 1,
    seed: int = 0,
    batch_size: int = 64,
    prepare: Optional[Preparer] = None,
    dataset: str = "valid",
) -> EvalResult:
    """Mean negative ELBO at β = 1 over u8 ``images``, averaged over noise draws.

    Each draw redraws the latent noise from ``default_rng([seed, draw])`` and
    binarization or dequantization noise from ``default_rng([seed, draw, 1])``.
    """

    if noise_draws < 1:
        raise ContractViolation(f"noise_draws must be >= 1, got {noise_draws}")
    if len(images) == 0:
        raise ContractViolation("cannot evaluate an empty split")
    prepare = prepare or default_preparer(model)
    cfg = model.cfg
    layers = (1, 2) if model.two_layer else (1,)
    count = len(images)
    lx = np.zeros((noise_draws, count))
    kl = np.zeros((noise_draws, count))
    kl_steps = np.zeros((cfg.timesteps, len(layers)))
    with no_grad():
        for draw in range(noise_draws):
            noise = RandomNoise(np.random.default_rng([seed, draw]))
            data_rng = np.random.default_rng([seed, draw, 1])
            for start in range(0, count, batch_size):
                batch = prepare(images[start : start + batch_size], data_rng)
                inputs = model.as_input(batch)
                state, traces = model.rollout(inputs, SamplePolicy(noise))
                stop = start + len(batch)
                lx[draw, start:stop] = model.output_nll(inputs, state.r).data.astype(np.float64)
                for trace in traces:
                    for column, layer in enumerate(layers):
                        per_image = trace.layer(layer).kl.data.astype(np.float64).sum(axis=(1, 2, 3))
                        kl[draw, start:stop] += per_image
                        kl_steps[trace.t, column] += per_image.sum()
    kl_steps /= noise_draws * count
    per_image = (lx + kl).mean(axis=0)
    nats = float(per_image.mean())
    std_err = float(per_image.std(ddof=1) / math.sqrt(count)) if count > 1 else 0.0
    result = EvalResult(
        dataset=dataset,
        nats_per_image=nats,
        bits_per_dim=float(bits_per_dim(nats, cfg.dims)),
        lx_nats=float(lx.mean()),
        kl_nats=float(kl.mean()),
        samples=count,
        noise_draws=noise_draws,
        std_err_nats=std_err,
        kl_per_step=kl_steps,
    )
    LOGGER.info(result.summary())
    return result


def kl_profile(
    model: ConvDraw,
    images: np.ndarray,
    *,
    csv_path: Optional[Path] = None,
    result: Optional[EvalResult] = None,
    **eval_kwargs,
) -> KlProfile:
    """Mean KL nats per (timestep, layer); reuses ``result`` when given."""

    result = result or eval_bound(model, images, **eval_kwargs)
    layers = (1, 2) if model.two_layer else (1,)
    profile = KlProfile(matrix=result.kl_per_step, layers=layers)
    if csv_path is not None:
        write_csv(csv_path, KL_PROFILE_FIELDS, kl_profile_rows(profile))
    return profile


def _pixels(images: Images) -> np.ndarray:
    return images.data if isinstance(images, ImageBatch) else np.asarray(images, dtype=np.float64)


def mse(a: Images, b: Images) -> np.ndarray:
    """Mean squared error per image."""

    left, right = _pixels(a), _pixels(b)
    if left.shape != right.shape:
        raise ContractViolation(f"cannot compare images of shape {left.shape} and {right.shape}")
    axes = tuple(range(1, left.ndim))
    return np.mean((left - right) ** 2, axis=axes)


def psnr(a: Images, b: Images) -> np.ndarray:
    """Peak signal-to-noise ratio in dB per image; identical images give +inf."""

    errors = mse(a, b)
    with np.errstate(divide="ignore"):
        return np.where(errors == 0.0, np.inf, -10.0 * np.log10(errors))


def marginal_bernoulli_baseline(train: np.ndarray, evaluate: np.ndarray) -> float:
    """NLL in nats per image of a factorised Bernoulli fitted to pixel frequencies."""

    train = np.asarray(train, dtype=np.float64)
    evaluate = np.asarray(evaluate, dtype=np.float64)
    if train.shape[1:] != evaluate.shape[1:]:
        raise ContractViolation(f"train images {train.shape[1:]} and evaluation images {evaluate.shape[1:]} differ")
    frequency = np.clip(train.mean(axis=0), BASELINE_CLAMP, 1.0 - BASELINE_CLAMP)
    log_likelihood = evaluate * np.log(frequency) + (1.0 - evaluate) * np.log1p(-frequency)
    return float(-log_likelihood.reshape(len(evaluate), -1).sum(axis=1).mean())


def default_t_list(timesteps: int) -> List[int]:
    """The 2, 4, …, 25, 32 schedule rescaled to ``timesteps`` steps."""

    scale = timesteps / PROGRESSION_REFERENCE_STEPS
    chosen = sorted({min(timesteps, max(1, round(t * scale))) for t in PROGRESSION_SCHEDULE})
    return chosen


def progression(
    model: ConvDraw,
    images: Images,
    t_list: Sequence[int],
    temperature: float = 0.0,
    *,
    seed: int = 0,
) -> List[np.ndarray]:
    pixels = _pixels(images)
    return [model.reconstruct_partial(pixels, t, temperature, seed=seed) for t in t_list]


def progression_mse(
    model: ConvDraw,
    images: Images,
    t_list: Sequence[int],
    temperature: float = 0.0,
    *,
    seed: int = 0,
) -> List[float]:
    """Mean squared error against the originals for every stored-step count."""

    pixels = _pixels(images)
    return [float(mse(rows, pixels).mean()) for rows in progression(model, pixels, t_list, temperature, seed=seed)]


def progression_sheet(
    model: ConvDraw,
    images: Images,
    path: Path,
    t_list: Optional[Sequence[int]] = None,
    temperature: float = 0.0,
    *,
    seed: int = 0,
) -> Path:
    """One row per t in ``t_list`` of partial reconstructions, originals on the bottom."""

    pixels = _pixels(images)
    steps = list(t_list) if t_list else default_t_list(model.cfg.timesteps)
    for t in steps:
        if not 0 <= t <= model.cfg.timesteps:
            raise ContractViolation(f"progression step {t} outside [0, {model.cfg.timesteps}]")
    rows = progression(model, pixels, steps, temperature, seed=seed)
    rows.append(np.clip(pixels, 0.0, 1.0))
    return emit_grid(rows, path)


def sample_sheet(
    model: ConvDraw, path: Path, count: int = 16, temperature: float = 1.0, *, seed: int = 0, per_row: int = 8
) -> Path:
    samples = model.sample(count, temperature, seed=seed)
    rows = [samples[start : start + per_row] for start in range(0, count, per_row)]
    return emit_grid(rows, path)


