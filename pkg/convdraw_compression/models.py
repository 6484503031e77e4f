"""Plain data records passed between the trainer, codec and analysis modules."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Tuple

import numpy as np

from .errors import ContractViolation

DEFAULT_STEP = 1.0 / 256.0


@dataclass(slots=True)
class ImageBatch:
    """N×C×H×W real-valued images in [0, 1] plus their discretisation step."""

    data: np.ndarray
    s: float = DEFAULT_STEP

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ContractViolation(f"image batch must be N×C×H×W, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation("image batch contains non-finite values")

    @classmethod
    def from_u8(cls, pixels: np.ndarray, s: float = DEFAULT_STEP) -> "ImageBatch":
        """Scale 8-bit pixels by 1/255 so that 255 maps to exactly 1.0."""

        return cls(np.asarray(pixels, dtype=np.uint8).astype(np.float64) / 255.0, s)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def dims(self) -> int:
        return int(np.prod(self.data.shape[1:]))

    def to_u8(self) -> np.ndarray:
        return np.clip(np.rint(self.data * 255.0), 0, 255).astype(np.uint8)


@dataclass(slots=True)
class TrainRecord:
    """One logged optimisation step."""

    step: int
    wall_ms: float
    loss_nats: float
    loss_bits_per_dim: float
    kl_nats: float
    lx_nats: float
    rolled_back: bool = False

    def as_csv_row(self) -> Dict[str, Any]:
        return {
            "step": int(self.step),
            "wall_ms": f"{self.wall_ms:.3f}",
            "loss_nats": repr(float(self.loss_nats)),
            "loss_bits_per_dim": repr(float(self.loss_bits_per_dim)),
            "kl_nats": repr(float(self.kl_nats)),
            "lx_nats": repr(float(self.lx_nats)),
        }


@dataclass(slots=True)
class EvalResult:
    """Variational bound over a dataset split; always an upper bound on the NLL."""

    dataset: str
    nats_per_image: float
    bits_per_dim: float
    lx_nats: float
    kl_nats: float
    samples: int
    noise_draws: int = 1
    importance_samples: int = 1
    std_err_nats: float = 0.0
    kl_per_step: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def bound_label(self) -> str:
        return "<"

    def summary(self) -> str:
        return (
            f"{self.dataset}: NLL {self.bound_label} {self.nats_per_image:.4f} nats "
            f"({self.bits_per_dim:.6f} bits/dim) over {self.samples} images, "
            f"L^x {self.lx_nats:.4f} + KL {self.kl_nats:.4f}"
        )


@dataclass(slots=True)
class KlProfile:
    """Mean KL nats per (timestep, layer) over a dataset."""

    matrix: np.ndarray
    layers: Tuple[int, ...]

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2 or self.matrix.shape[1] != len(self.layers):
            raise ContractViolation(
                f"profile matrix {self.matrix.shape} does not match {len(self.layers)} layers"
            )

    def rows(self) -> Iterator[Tuple[int, int, float]]:
        for t in range(self.matrix.shape[0]):
            for column, layer in enumerate(self.layers):
                yield t, layer, float(self.matrix[t, column])

    def step_totals(self) -> np.ndarray:
        return self.matrix.sum(axis=1)


@dataclass(slots=True)
class StepRate:
    """Rate accounting of one (timestep, layer) block of latents."""

    t: int
    layer: int
    coded_bits: float
    ideal_bits: float
    kl_bits: float
    symbols: int
    clamped: int = 0


@dataclass(slots=True)
class RateReport:
    """Coded size beside bin-probability and KL-derived ideals for one image."""

    dims: int
    t_keep: int
    steps: List[StepRate] = field(default_factory=list)
    header_bytes: int = 0
    payload_bytes: int = 0

    @property
    def total_coded_bits(self) -> float:
        return float(sum(entry.coded_bits for entry in self.steps))

    @property
    def total_ideal_bits(self) -> float:
        return float(sum(entry.ideal_bits for entry in self.steps))

    @property
    def total_kl_bits(self) -> float:
        """Σ KL / ln 2, the rate a bits-back coder would approach."""

        return float(sum(entry.kl_bits for entry in self.steps))

    @property
    def clamped_symbols(self) -> int:
        return sum(entry.clamped for entry in self.steps)

    @property
    def bits_per_dim(self) -> float:
        return self.total_coded_bits / self.dims

    @property
    def stream_bits_per_dim(self) -> float:
        """Whole file including header and byte padding."""

        return 8.0 * (self.header_bytes + self.payload_bytes) / self.dims

    @property
    def kl_bits_per_dim(self) -> float:
        return self.total_kl_bits / self.dims


@dataclass(slots=True)
class BenchRow:
    n_t: int
    examples_seen: int
    wall_ms: float
    time_scaled_examples: int
    loss_bits_per_dim: float

    def as_csv_row(self) -> Dict[str, Any]:
        return {
            "n_t": self.n_t,
            "examples_seen": self.examples_seen,
            "wall_ms": f"{self.wall_ms:.3f}",
            "time_scaled_examples": self.time_scaled_examples,
            "loss_bits_per_dim": repr(float(self.loss_bits_per_dim)),
        }


@dataclass(slots=True)
class BetaSweepRow:
    beta: float
    seed: int
    kl_nats: float
    lx_nats: float
    bound_bits_per_dim: float

    def as_csv_row(self) -> Dict[str, Any]:
        return {
            "beta": repr(float(self.beta)),
            "seed": self.seed,
            "kl_nats": repr(float(self.kl_nats)),
            "lx_nats": repr(float(self.lx_nats)),
            "bound_bits_per_dim": repr(float(self.bound_bits_per_dim)),
        }
