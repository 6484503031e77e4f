"""Serialised report payloads and CSV emission."""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

from pydantic import BaseModel, ConfigDict, Field

from .models import EvalResult, KlProfile, RateReport

LOGGER = logging.getLogger(__name__)

TRAIN_LOG_FIELDS = ["step", "wall_ms", "loss_nats", "loss_bits_per_dim", "kl_nats", "lx_nats"]
KL_PROFILE_FIELDS = ["t", "layer", "kl_nats"]
BENCH_FIELDS = ["n_t", "examples_seen", "wall_ms", "time_scaled_examples", "loss_bits_per_dim"]
BETA_SWEEP_FIELDS = ["beta", "seed", "kl_nats", "lx_nats", "bound_bits_per_dim"]
RATE_FIELDS = ["t", "layer", "symbols", "coded_bits", "ideal_bits", "kl_bits", "clamped"]


class EvalPayload(BaseModel):
    """Serialised variational bound of one dataset split."""

    model_config = ConfigDict(from_attributes=True)

    dataset: str
    bound: str = Field(default="<", description="The value is an upper bound on the NLL")
    nats_per_image: float
    bits_per_dim: float
    lx_nats: float
    kl_nats: float
    samples: int = Field(..., ge=0)
    noise_draws: int = Field(..., ge=1)
    importance_samples: int = Field(default=1, ge=1)
    std_err_nats: float = Field(default=0.0, ge=0)

    @classmethod
    def from_result(cls, result: EvalResult) -> "EvalPayload":
        return cls.model_validate(result)


class StepRatePayload(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    t: int
    layer: int
    symbols: int
    coded_bits: float
    ideal_bits: float
    kl_bits: float
    clamped: int


class RateReportPayload(BaseModel):
    """Coded bits beside ideal and KL-derived rates for one compressed image."""

    model_config = ConfigDict(from_attributes=True)

    dims: int
    t_keep: int
    header_bytes: int
    payload_bytes: int
    total_coded_bits: float
    total_ideal_bits: float
    total_kl_bits: float
    bits_per_dim: float
    stream_bits_per_dim: float
    kl_bits_per_dim: float
    clamped_symbols: int
    steps: List[StepRatePayload]

    @classmethod
    def from_report(cls, report: RateReport) -> "RateReportPayload":
        return cls.model_validate(report)


def write_csv(path: Path, fieldnames: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
    path = Path(path)
    if not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
            count += 1
    LOGGER.info("Wrote %s rows to %s", count, path)
    return path


def kl_profile_rows(profile: KlProfile) -> List[Dict[str, Any]]:
    return [{"t": t, "layer": layer, "kl_nats": repr(value)} for t, layer, value in profile.rows()]


def rate_rows(report: RateReport) -> List[Dict[str, Any]]:
    return [
        {
            "t": entry.t,
            "layer": entry.layer,
            "symbols": entry.symbols,
            "coded_bits": repr(float(entry.coded_bits)),
            "ideal_bits": repr(float(entry.ideal_bits)),
            "kl_bits": repr(float(entry.kl_bits)),
            "clamped": entry.clamped,
        }
        for entry in report.steps
    ]
