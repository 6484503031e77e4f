"""Gaussian latents, KL terms, pixel likelihoods and the total loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .tensor import Tensor

if TYPE_CHECKING:
    from .draw import TimestepTrace

LOG_VAR_MIN = -14.0
LOG_VAR_MAX = 14.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LN2 = math.log(2.0)


@dataclass(slots=True)
class GaussianParams:
    """Diagonal Gaussian over a latent or pixel map."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self) -> None:
        if self.mu.shape != self.log_var.shape:
            raise ContractViolation(
                f"mean {self.mu.shape} and log-variance {self.log_var.shape} differ in shape"
            )

    @classmethod
    def clamped(cls, mu: Tensor, raw_log_var: Tensor) -> "GaussianParams":
        return cls(mu=mu, log_var=T.clip(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Elementwise KL(q || p) in nats.

    Written as ½(expm1(d) − d) + ½(μq − μp)²·e^(−lv_p) with d = lv_q − lv_p, which
    is non-negative in floating point without any clipping.
    """

    if q.shape != p.shape:
        raise ContractViolation(f"posterior {q.shape} and prior {p.shape} differ in shape")
    diff = q.log_var - p.log_var
    variance_term = (T.expm1(diff) - diff) * 0.5
    mean_term = T.square(q.mu - p.mu) * T.exp(-p.log_var) * 0.5
    return variance_term + mean_term


def _split_canvas(r: Tensor, channels: int) -> GaussianParams:
    if r.shape[1] != 2 * channels:
        raise ContractViolation(
            f"Gaussian canvas needs {2 * channels} channels for {channels} image channels, got {r.shape}"
        )
    return GaussianParams.clamped(T.channel_slice(r, 0, channels), T.channel_slice(r, channels, 2 * channels))


def input_nll_gaussian(x: Tensor, r: Tensor, s: float) -> Tensor:
    """Per-image density-ratio cost Σ[log q⁰(x) − log N(x; r^μ, exp(r^α))], q⁰ = 1/s.

    ``x`` must already carry the uniform dequantization noise. Values may be
    negative when the model density exceeds 1/s.
    """

    if not s > 0.0:
        raise ContractViolation(f"quantization step must be positive, got {s}")
    out = _split_canvas(r, x.shape[1])
    if out.shape != x.shape:
        raise ContractViolation(f"image {x.shape} does not match canvas means {out.shape}")
    per_dim = (
        T.square(x - out.mu) * T.exp(-out.log_var) * 0.5
        + out.log_var * 0.5
        + (HALF_LOG_2PI - math.log(s))
    )
    return T.sum(per_dim, axis=(1, 2, 3))


def input_nll_gaussian_bins(x: Tensor, r: Tensor, s: float) -> Tensor:
    """Per-image −log of the Gaussian mass on each width-``s`` pixel bin."""

    if not s > 0.0:
        raise ContractViolation(f"quantization step must be positive, got {s}")
    out = _split_canvas(r, x.shape[1])
    if out.shape != x.shape:
        raise ContractViolation(f"image {x.shape} does not match canvas means {out.shape}")
    log_mass = T.gaussian_bin_log_mass(x.data, out.mu, out.log_var, 0.5 * s)
    return -T.sum(log_mass, axis=(1, 2, 3))


def input_nll_bernoulli(x: Tensor, logits: Tensor) -> Tensor:
    """Per-image Bernoulli negative log-likelihood, softplus(l) − x·l summed."""

    if x.shape != logits.shape:
        raise ContractViolation(f"image {x.shape} does not match logits {logits.shape}")
    values = x.data
    if not np.all((values == 0.0) | (values == 1.0)):
        raise ContractViolation("Bernoulli likelihood needs binary pixels in {0, 1}")
    return T.sum(T.softplus(logits) - x * logits, axis=(1, 2, 3))


def nll_from_log_density(log_density: np.ndarray, s: float) -> np.ndarray:
    """Per-image density-ratio cost for an arbitrary model log-density map.

    A model density of exactly 1 everywhere gives log(1/s) nats per dimension.
    """

    log_density = np.asarray(log_density, dtype=np.float64)
    if log_density.ndim != 4:
        raise ContractViolation(f"expected an N×C×H×W log-density, got {log_density.shape}")
    return (-math.log(s) - log_density).sum(axis=(1, 2, 3))


def kl_per_image(traces: Sequence["TimestepTrace"]) -> Tensor:
    """Σ_t Σ_layers Σ_units KL for each image of the batch."""

    total: Optional[Tensor] = None
    for trace in traces:
        for layer in trace.layers:
            if layer.kl is None:
                raise ContractViolation(f"step {trace.t} has no posterior, so no KL term")
            term = T.sum(layer.kl, axis=(1, 2, 3))
            total = term if total is None else total + term
    if total is None:
        raise ContractViolation("at least one timestep is needed for a KL total")
    return total


def per_image_elbo(traces: Sequence["TimestepTrace"], lx: Tensor, beta: float) -> Tensor:
    return lx * beta + kl_per_image(traces)


def elbo_loss(
    traces: Sequence["TimestepTrace"],
    lx: Tensor,
    beta: float,
    *,
    steps: Optional[int] = None,
) -> Tensor:
    """Batch-mean β·L^x + Σ_t KL_t in nats; at β = 1 the negative variational bound."""

    if steps is not None and len(traces) != steps:
        raise ContractViolation(f"expected {steps} timestep traces, got {len(traces)}")
    if not beta > 0.0:
        raise ContractViolation(f"beta must be positive, got {beta}")
    return T.mean(per_image_elbo(traces, lx, beta))


def bits_per_dim(nats: float | np.ndarray, dims: int) -> float | np.ndarray:
    return nats / (dims * LN2)


def nats_to_bits(nats: float | np.ndarray) -> float | np.ndarray:
    return nats / LN2
