"""Progressive lossy image codec on top of the arithmetic coder.

Latents are quantised on a grid anchored at zero with one bin width per
latent channel, equal to the learned posterior standard deviation. During
compression the decoder consumes the dequantised latents, so the encoder
and decoder run one and the same trajectory. Only the first ``t_keep``
timesteps are stored; decompression generates the rest from the prior.
"""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from scipy import special

from .config import HASH_BYTES
from .coder import FREQ_TOTAL, ArithmeticDecoder, ArithmeticEncoder, FrequencyTable
from .draw import ConvDraw, DrawState, RandomNoise, SamplePolicy
from .errors import ContractViolation, CorruptStreamError, ModelMismatchError
from .likelihood import LN2, LOG_VAR_MAX, LOG_VAR_MIN, GaussianParams, gaussian_kl
from .models import ImageBatch, RateReport, StepRate
from .tensor import Tensor, no_grad

LOGGER = logging.getLogger(__name__)

STREAM_MAGIC = b"CDRW1"
STREAM_VERSION = 1
HEADER_FORMAT = "<5sB8sHHBBBfI"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
MIN_FREQ = 1
CALIBRATION_SIGMAS = 8.0
MAX_ALPHABET = 4096
DEFAULT_TAIL_SEED = 0
_EXTRA_PREFIX = "codec"

ImageInput = Union[ImageBatch, np.ndarray]


@dataclass(slots=True)
class QuantGrid:
    """Bin width and symbol bounds per latent channel of one layer."""

    delta: np.ndarray
    k_min: np.ndarray
    k_max: np.ndarray
    min_freq: int = MIN_FREQ

    def __post_init__(self) -> None:
        self.delta = np.asarray(self.delta, dtype=np.float64).reshape(-1)
        self.k_min = np.asarray(self.k_min, dtype=np.int64).reshape(-1)
        self.k_max = np.asarray(self.k_max, dtype=np.int64).reshape(-1)
        if not (self.delta.shape == self.k_min.shape == self.k_max.shape):
            raise ContractViolation(
                f"grid fields differ in length: delta {self.delta.shape}, "
                f"k_min {self.k_min.shape}, k_max {self.k_max.shape}"
            )
        if np.any(~np.isfinite(self.delta)) or np.any(self.delta <= 0):
            raise ContractViolation("grid bin widths must be positive and finite")
        if np.any(self.k_max < self.k_min):
            raise ContractViolation("grid bounds need k_max >= k_min")
        sizes = self.k_max - self.k_min + 1
        if np.any(sizes * self.min_freq > FREQ_TOTAL):
            raise ContractViolation(f"alphabet of {int(sizes.max())} symbols does not fit {FREQ_TOTAL} frequencies")

    @property
    def channels(self) -> int:
        return int(self.delta.size)

    def alphabet(self, channel: int) -> np.ndarray:
        return np.arange(self.k_min[channel], self.k_max[channel] + 1)


Grids = Dict[int, QuantGrid]


def posterior_widths(model: ConvDraw, layer: int) -> np.ndarray:
    """Learned posterior standard deviation per channel of ``layer``."""

    if not model.cfg.fixed_posterior_variance:
        raise ContractViolation("the codec needs a model trained with fixed_posterior_variance = true")
    log_var = model.store[f"q{layer}.log_var"].data.astype(np.float64)
    return np.exp(0.5 * np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX))


def _bounded_grid(delta: np.ndarray, low: np.ndarray, high: np.ndarray, max_symbols: int) -> QuantGrid:
    k_min = np.minimum(np.floor(low / delta), 0).astype(np.int64)
    k_max = np.maximum(np.ceil(high / delta), 0).astype(np.int64)
    half = max_symbols // 2
    too_wide = (k_max - k_min + 1) > max_symbols
    if np.any(too_wide):
        LOGGER.warning(
            "Capping the alphabet of %s latent channel(s) at %s symbols", int(too_wide.sum()), max_symbols
        )
        k_min = np.maximum(k_min, -half)
        k_max = np.minimum(k_max, max_symbols - half - 1)
    return QuantGrid(delta=delta, k_min=k_min, k_max=k_max)


def default_grids(model: ConvDraw, *, radius: float = CALIBRATION_SIGMAS, max_symbols: int = MAX_ALPHABET) -> Grids:
    """Uncalibrated grids covering ±``radius`` in latent units."""

    grids: Grids = {}
    for layer in _layers(model):
        delta = posterior_widths(model, layer)
        bound = np.full_like(delta, radius)
        grids[layer] = _bounded_grid(delta, -bound, bound, max_symbols)
    return grids


def calibrate_grids(
    model: ConvDraw,
    images: ImageInput,
    *,
    sigmas: float = CALIBRATION_SIGMAS,
    max_symbols: int = MAX_ALPHABET,
    batch_size: int = 32,
) -> Grids:
    """Symbol bounds from μp ± 8σp observed while encoding a calibration set.

    The rollout uses posterior means as latents; the posterior means
    themselves are folded into the bounds so that nothing is clamped on the
    calibration images.
    """

    data = images.data if isinstance(images, ImageBatch) else np.asarray(images, dtype=np.float64)
    if data.ndim != 4 or len(data) == 0:
        raise ContractViolation(f"calibration needs a non-empty N×C×H×W batch, got {data.shape}")
    layers = _layers(model)
    low = {layer: np.full(model.cfg.latent_shape(layer)[0], np.inf) for layer in layers}
    high = {layer: np.full(model.cfg.latent_shape(layer)[0], -np.inf) for layer in layers}
    policy = SamplePolicy(RandomNoise(np.random.default_rng(0)), posterior="mean")
    with no_grad():
        for start in range(0, len(data), batch_size):
            _, traces = model.rollout(model.as_input(data[start : start + batch_size]), policy)
            for trace in traces:
                for entry in trace.layers:
                    mu = entry.p.mu.data.astype(np.float64)
                    spread = sigmas * entry.p.sigma().astype(np.float64)
                    observed_low = np.min(mu - spread, axis=(0, 2, 3))
                    observed_high = np.max(mu + spread, axis=(0, 2, 3))
                    if entry.q is not None:
                        q_mu = entry.q.mu.data.astype(np.float64)
                        observed_low = np.minimum(observed_low, q_mu.min(axis=(0, 2, 3)))
                        observed_high = np.maximum(observed_high, q_mu.max(axis=(0, 2, 3)))
                    low[entry.layer] = np.minimum(low[entry.layer], observed_low)
                    high[entry.layer] = np.maximum(high[entry.layer], observed_high)
    grids = {
        layer: _bounded_grid(posterior_widths(model, layer), low[layer], high[layer], max_symbols)
        for layer in layers
    }
    for layer, grid in grids.items():
        LOGGER.info(
            "Calibrated layer %s grid on %s images: %s..%s symbols per channel",
            layer,
            len(data),
            int((grid.k_max - grid.k_min + 1).min()),
            int((grid.k_max - grid.k_min + 1).max()),
        )
    return grids


def grids_to_extras(grids: Grids) -> Dict[str, np.ndarray]:
    extras: Dict[str, np.ndarray] = {}
    for layer, grid in grids.items():
        extras[f"{_EXTRA_PREFIX}.l{layer}.k_min"] = grid.k_min.astype(np.float64)
        extras[f"{_EXTRA_PREFIX}.l{layer}.k_max"] = grid.k_max.astype(np.float64)
    return extras


def grids_from_extras(model: ConvDraw, extras: Mapping[str, np.ndarray]) -> Optional[Grids]:
    """Grids stored in a checkpoint, or ``None`` when it was never calibrated."""

    grids: Grids = {}
    for layer in _layers(model):
        low = extras.get(f"{_EXTRA_PREFIX}.l{layer}.k_min")
        high = extras.get(f"{_EXTRA_PREFIX}.l{layer}.k_max")
        if low is None or high is None:
            return None
        delta = posterior_widths(model, layer)
        if np.asarray(low).size != delta.size:
            raise ModelMismatchError(
                f"stored grid for layer {layer} has {np.asarray(low).size} channels, model has {delta.size}"
            )
        grids[layer] = QuantGrid(delta=delta, k_min=np.rint(low), k_max=np.rint(high))
    return grids


def load_grids(model: ConvDraw, extras: Mapping[str, np.ndarray]) -> Grids:
    grids = grids_from_extras(model, extras)
    if grids is None:
        LOGGER.warning("Checkpoint carries no calibrated codec grids; using the ±%s default", CALIBRATION_SIGMAS)
        return default_grids(model)
    return grids


def _layers(model: ConvDraw) -> Tuple[int, ...]:
    return (2, 1) if model.two_layer else (1,)


# Symbols and probabilities -------------------------------------------------------


def quantize_latent(mu_q: np.ndarray, delta: np.ndarray | float, k_min, k_max) -> Tuple[np.ndarray, np.ndarray, int]:
    """Round to the nearest grid index and clamp; returns symbols, ẑ and the clamped count."""

    mu_q = np.asarray(mu_q, dtype=np.float64)
    raw = np.rint(mu_q / delta)
    symbols = np.clip(raw, k_min, k_max)
    clamped = int(np.count_nonzero(symbols != raw))
    return symbols.astype(np.int64), symbols * delta, clamped


def _largest_remainder(mass: np.ndarray, budget: int) -> np.ndarray:
    """Integer split of ``budget`` proportional to each row of ``mass``."""

    mass = mass / mass.sum(axis=-1, keepdims=True)
    scaled = mass * budget
    base = np.floor(scaled).astype(np.int64)
    remainder = scaled - base
    deficit = budget - base.sum(axis=-1)
    order = np.argsort(-remainder, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(mass.shape[-1])[None, :].repeat(mass.shape[0], axis=0), axis=-1)
    return base + (ranks < deficit[:, None])


def bin_masses(mu: np.ndarray, sigma: np.ndarray, delta: float, k_min: int, k_max: int) -> np.ndarray:
    """Prior mass of every grid bin for each unit; the edge bins absorb the tails.

    Masses are evaluated on the side of the mean where the CDF is small,
    which keeps far bins accurate.
    """

    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    centres = np.arange(k_min, k_max + 1, dtype=np.float64)[None, :] * delta
    distance = np.abs(centres - mu)
    upper = special.ndtr((0.5 * delta - distance) / sigma)
    lower = special.ndtr((-0.5 * delta - distance) / sigma)
    mass = upper - lower
    below = special.ndtr((centres[:, :1] + 0.5 * delta - mu) / sigma)
    above = special.ndtr((mu - centres[:, -1:] + 0.5 * delta) / sigma)
    if mass.shape[1] == 1:
        return np.ones_like(mass)
    mass[:, :1] = below
    mass[:, -1:] = above
    return np.maximum(mass, 0.0)


def bin_frequencies(
    mu: np.ndarray, sigma: np.ndarray, delta: float, k_min: int, k_max: int, min_freq: int = MIN_FREQ
) -> np.ndarray:
    """Integer frequency rows summing to exactly 2^16, each entry at least ``min_freq``."""

    mass = bin_masses(mu, sigma, delta, k_min, k_max)
    size = mass.shape[1]
    budget = FREQ_TOTAL - size * min_freq
    if budget < 0:
        raise ContractViolation(f"alphabet of {size} symbols does not fit {FREQ_TOTAL} frequencies")
    empty = mass.sum(axis=1) <= 0
    if np.any(empty):
        mass[empty] = 1.0
    return _largest_remainder(mass, budget) + min_freq


def bin_pmf(p: GaussianParams | Tuple[float, float], grid: QuantGrid, channel: int = 0) -> FrequencyTable:
    """Frequency table of a single latent unit under its prior."""

    if isinstance(p, GaussianParams):
        mu = float(np.asarray(p.mu.data).reshape(-1)[0])
        sigma = float(p.sigma().reshape(-1)[0])
    else:
        mu, sigma = float(p[0]), float(p[1])
    if not sigma > 0:
        raise ContractViolation(f"prior standard deviation must be positive, got {sigma}")
    freqs = bin_frequencies(
        np.array([mu]),
        np.array([sigma]),
        float(grid.delta[channel]),
        int(grid.k_min[channel]),
        int(grid.k_max[channel]),
        grid.min_freq,
    )[0]
    return FrequencyTable(freqs, offset=int(grid.k_min[channel]))


def unit_tables(p: GaussianParams, grid: QuantGrid) -> List[FrequencyTable]:
    """Tables for every unit of a 1×L×h×w prior, channel-major then raster order."""

    if p.shape[0] != 1:
        raise ContractViolation(f"the codec works on single images, got a batch of {p.shape[0]}")
    if p.shape[1] != grid.channels:
        raise ContractViolation(f"prior has {p.shape[1]} channels, grid has {grid.channels}")
    mu = p.mu.data[0].astype(np.float64)
    sigma = p.sigma()[0].astype(np.float64)
    tables: List[FrequencyTable] = []
    for channel in range(grid.channels):
        freqs = bin_frequencies(
            mu[channel],
            sigma[channel],
            float(grid.delta[channel]),
            int(grid.k_min[channel]),
            int(grid.k_max[channel]),
            grid.min_freq,
        )
        offset = int(grid.k_min[channel])
        tables.extend(FrequencyTable(row, offset) for row in freqs)
    return tables


# Bitstream -----------------------------------------------------------------------


@dataclass(slots=True)
class Bitstream:
    model_hash: bytes
    height: int
    width: int
    channels: int
    t_total: int
    t_stored: int
    temperature: float
    payload: bytes = b""
    version: int = STREAM_VERSION

    def __post_init__(self) -> None:
        if len(self.model_hash) != 8:
            raise ContractViolation(f"model hash must be 8 bytes, got {len(self.model_hash)}")
        if not 0 <= self.t_stored <= self.t_total:
            raise ContractViolation(f"stored steps {self.t_stored} outside [0, {self.t_total}]")

    def to_bytes(self) -> bytes:
        header = struct.pack(
            HEADER_FORMAT,
            STREAM_MAGIC,
            self.version,
            self.model_hash,
            self.height,
            self.width,
            self.channels,
            self.t_total,
            self.t_stored,
            self.temperature,
            len(self.payload),
        )
        return header + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_SIZE:
            raise CorruptStreamError(f"stream of {len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
        magic, version, model_hash, height, width, channels, t_total, t_stored, temperature, length = (
            struct.unpack_from(HEADER_FORMAT, data)
        )
        if magic != STREAM_MAGIC:
            raise CorruptStreamError(f"bad stream magic {magic!r}")
        if version != STREAM_VERSION:
            raise CorruptStreamError(f"unsupported stream version {version}")
        payload = data[HEADER_SIZE:]
        if len(payload) != length:
            raise CorruptStreamError(f"header announces {length} payload bytes, stream holds {len(payload)}")
        if t_stored > t_total:
            raise CorruptStreamError(f"stream stores {t_stored} of {t_total} steps")
        if not 0.0 <= temperature <= 1.0:
            raise CorruptStreamError(f"stream temperature {temperature} outside [0, 1]")
        return cls(model_hash, height, width, channels, t_total, t_stored, float(temperature), payload, version)

    def write(self, path: Path) -> Path:
        path = Path(path)
        if not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        LOGGER.info("Wrote %s-byte stream (%s of %s steps) to %s", HEADER_SIZE + len(self.payload), self.t_stored, self.t_total, path)
        return path

    @classmethod
    def read(cls, path: Path) -> "Bitstream":
        return cls.from_bytes(Path(path).read_bytes())


# Latent policies -----------------------------------------------------------------


@dataclass(slots=True)
class _BlockAccount:
    t: int
    layer: int
    symbols: int = 0
    coded_bits: float = 0.0
    ideal_bits: float = 0.0
    kl_bits: float = 0.0
    clamped: int = 0


class QuantizePolicy:
    """Encoder side: quantises μq, codes the symbols and feeds ẑ back to the decoder."""

    def __init__(self, grids: Grids, encoder: Optional[ArithmeticEncoder] = None) -> None:
        self.grids = grids
        self.encoder = encoder
        self.blocks: List[_BlockAccount] = []
        self.step_bit_counts: List[int] = []

    def choose(self, t: int, layer: int, q: Optional[GaussianParams], p: GaussianParams) -> Tensor:
        if q is None:
            raise ContractViolation("quantised inference needs the posterior of every stored step")
        grid = self.grids[layer]
        delta = grid.delta[None, :, None, None]
        symbols, z_hat, clamped = quantize_latent(
            q.mu.data, delta, grid.k_min[None, :, None, None], grid.k_max[None, :, None, None]
        )
        tables = unit_tables(p, grid)
        flat = symbols.reshape(-1)
        account = _BlockAccount(t=t, layer=layer, symbols=int(flat.size), clamped=clamped)
        before = self.encoder.bit_count if self.encoder is not None else 0
        for symbol, table in zip(flat, tables):
            account.ideal_bits += table.ideal_bits(int(symbol))
            if self.encoder is not None:
                self.encoder.write(table, int(symbol))
        if self.encoder is not None:
            account.coded_bits = float(self.encoder.bit_count - before)
        account.kl_bits = float(gaussian_kl(q, p).data.astype(np.float64).sum() / LN2)
        if clamped:
            LOGGER.warning("Clamped %s latent symbol(s) at step %s, layer %s", clamped, t, layer)
        self.blocks.append(account)
        return Tensor(z_hat.astype(p.mu.dtype))


class DecodePolicy:
    """Decoder side: reads symbols under the running prior and returns ẑ."""

    def __init__(self, grids: Grids, decoder: ArithmeticDecoder) -> None:
        self.grids = grids
        self.decoder = decoder

    def choose(self, t: int, layer: int, q: Optional[GaussianParams], p: GaussianParams) -> Tensor:
        grid = self.grids[layer]
        tables = unit_tables(p, grid)
        symbols = np.fromiter((self.decoder.read(table) for table in tables), dtype=np.int64, count=len(tables))
        z_hat = symbols.reshape(p.shape).astype(np.float64) * grid.delta[None, :, None, None]
        return Tensor(z_hat.astype(p.mu.dtype))


# Compression ---------------------------------------------------------------------


@dataclass(slots=True)
class EncodeResult:
    bitstream: Bitstream
    state: DrawState
    report: RateReport
    step_bits: List[int] = field(default_factory=list)


def _single_image(model: ConvDraw, x: ImageInput) -> Tensor:
    data = x.data if isinstance(x, ImageBatch) else np.asarray(x, dtype=np.float64)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[0] != 1:
        raise ContractViolation(f"compression works on one image at a time, got shape {data.shape}")
    return model.as_input(data)


def _check_t_keep(model: ConvDraw, t_keep: int) -> None:
    if not 0 <= t_keep <= model.cfg.timesteps:
        raise ContractViolation(f"t_keep must lie in [0, {model.cfg.timesteps}], got {t_keep}")


def _check_temperature(temperature: float) -> None:
    if not 0.0 <= temperature <= 1.0:
        raise ContractViolation(f"temperature must lie in [0, 1], got {temperature}")


def encode_image(
    x: ImageInput, model: ConvDraw, t_keep: int, temperature: float = 0.0, *, grids: Optional[Grids] = None
) -> EncodeResult:
    """Quantised-feedback inference over the first ``t_keep`` steps, coding every latent."""

    cfg = model.cfg
    _check_t_keep(model, t_keep)
    _check_temperature(temperature)
    grids = grids if grids is not None else default_grids(model)
    inputs = _single_image(model, x)
    encoder = ArithmeticEncoder()
    policy = QuantizePolicy(grids, encoder)
    step_bits: List[int] = []
    with no_grad():
        state = model.init_state(1)
        for _ in range(t_keep):
            state, _ = model.step(state, inputs, policy)
            step_bits.append(encoder.bit_count)
    payload = encoder.finish() if t_keep > 0 else b""
    bitstream = Bitstream(
        model_hash=stream_fingerprint(model, grids),
        height=cfg.height,
        width=cfg.width,
        channels=cfg.channels,
        t_total=cfg.timesteps,
        t_stored=t_keep,
        temperature=float(np.float32(temperature)),
        payload=payload,
    )
    report = RateReport(
        dims=cfg.dims,
        t_keep=t_keep,
        steps=[
            StepRate(
                t=block.t,
                layer=block.layer,
                coded_bits=block.coded_bits,
                ideal_bits=block.ideal_bits,
                kl_bits=block.kl_bits,
                symbols=block.symbols,
                clamped=block.clamped,
            )
            for block in policy.blocks
        ],
        header_bytes=HEADER_SIZE,
        payload_bytes=len(payload),
    )
    LOGGER.debug(
        "Encoded %s steps: %.1f coded bits, %.1f ideal, %.1f KL",
        t_keep,
        report.total_coded_bits,
        report.total_ideal_bits,
        report.total_kl_bits,
    )
    return EncodeResult(bitstream=bitstream, state=state, report=report, step_bits=step_bits)


def _generate_tail(model: ConvDraw, state: DrawState, temperature: float, seed: int) -> DrawState:
    policy = SamplePolicy(RandomNoise(np.random.default_rng(seed)), temperature)
    with no_grad():
        while state.t < model.cfg.timesteps:
            state, _ = model.step(state, None, policy)
    return state


def compress(
    x: ImageInput, model: ConvDraw, t_keep: int, temperature: float = 0.0, *, grids: Optional[Grids] = None
) -> Bitstream:
    return encode_image(x, model, t_keep, temperature, grids=grids).bitstream


def quantized_reconstruction(
    x: ImageInput,
    model: ConvDraw,
    t_keep: int,
    temperature: float = 0.0,
    *,
    grids: Optional[Grids] = None,
    seed: int = DEFAULT_TAIL_SEED,
) -> np.ndarray:
    """What the decoder will produce, computed on the encoder side."""

    result = encode_image(x, model, t_keep, temperature, grids=grids)
    state = _generate_tail(model, result.state, float(np.float32(temperature)), seed)
    return model.canvas_means(state.r)


def stream_fingerprint(model: ConvDraw, grids: Grids) -> bytes:
    """8-byte digest of the model fingerprint and the symbol bounds of every layer."""

    digest = hashlib.sha256(model.fingerprint())
    for layer in sorted(grids):
        grid = grids[layer]
        digest.update(struct.pack("<BI", layer, len(grid.k_min)))
        digest.update(np.ascontiguousarray(grid.k_min, dtype="<i8").tobytes())
        digest.update(np.ascontiguousarray(grid.k_max, dtype="<i8").tobytes())
    return digest.digest()[:HASH_BYTES]


def check_stream(bitstream: Bitstream, model: ConvDraw, grids: Optional[Grids] = None) -> None:
    """Refuse a stream made by another model or with other codec grids."""

    cfg = model.cfg
    grids = grids if grids is not None else default_grids(model)
    expected = stream_fingerprint(model, grids)
    if bitstream.model_hash != expected:
        raise ModelMismatchError(
            f"stream was made by model/grids {bitstream.model_hash.hex()}, "
            f"loaded model with its codec grids is {expected.hex()}"
        )
    stream_geometry = (bitstream.channels, bitstream.height, bitstream.width, bitstream.t_total)
    model_geometry = (cfg.channels, cfg.height, cfg.width, cfg.timesteps)
    if stream_geometry != model_geometry:
        raise ModelMismatchError(f"stream geometry C,H,W,T={stream_geometry} but model has {model_geometry}")


def decompress(
    bitstream: Bitstream | bytes,
    model: ConvDraw,
    *,
    grids: Optional[Grids] = None,
    seed: int = DEFAULT_TAIL_SEED,
) -> ImageBatch:
    """Decode the stored steps, generate the rest at the stored temperature."""

    if isinstance(bitstream, (bytes, bytearray)):
        bitstream = Bitstream.from_bytes(bytes(bitstream))
    grids = grids if grids is not None else default_grids(model)
    check_stream(bitstream, model, grids)
    with no_grad():
        state = model.init_state(1)
        if bitstream.t_stored > 0:
            if not bitstream.payload:
                raise CorruptStreamError(f"stream stores {bitstream.t_stored} steps but has no payload")
            decoder = ArithmeticDecoder(bitstream.payload)
            policy = DecodePolicy(grids, decoder)
            for _ in range(bitstream.t_stored):
                state, _ = model.step(state, None, policy)
            decoder.check_length()
        elif bitstream.payload:
            raise CorruptStreamError(f"stream stores no steps but carries {len(bitstream.payload)} payload bytes")
    state = _generate_tail(model, state, bitstream.temperature, seed)
    return ImageBatch(model.canvas_means(state.r), model.cfg.quantization_step)


def rate_report(
    x: ImageInput,
    model: ConvDraw,
    *,
    t_keep: Optional[int] = None,
    grids: Optional[Grids] = None,
) -> RateReport:
    """Coded bits per (step, layer) beside the bin-probability ideal and ΣKL/ln 2."""

    steps = model.cfg.timesteps if t_keep is None else t_keep
    return encode_image(x, model, steps, grids=grids).report


def prefix_payload_bits(result: EncodeResult) -> List[int]:
    """Payload size in bits of a stream keeping 0, 1, …, t steps of ``result``.

    The coded prefix of the first t steps does not depend on how many steps
    follow, so one full encoding gives every stream length.
    """

    sizes = [0]
    for count in result.step_bits:
        sizes.append(8 * math.ceil((count + 2) / 8))
    return sizes


def choose_t_keep(
    x: ImageInput, model: ConvDraw, target_bits_per_dim: float, *, grids: Optional[Grids] = None
) -> int:
    """Largest number of stored steps whose payload stays within ``target_bits_per_dim``."""

    if target_bits_per_dim < 0:
        raise ContractViolation(f"target rate must be non-negative, got {target_bits_per_dim}")
    result = encode_image(x, model, model.cfg.timesteps, grids=grids)
    budget = target_bits_per_dim * model.cfg.dims
    chosen = 0
    for t, bits in enumerate(prefix_payload_bits(result)):
        if bits <= budget:
            chosen = t
    LOGGER.info("Keeping %s of %s steps for a target of %.4f bits/dim", chosen, model.cfg.timesteps, target_bits_per_dim)
    return chosen
