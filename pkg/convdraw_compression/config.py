"""Configuration objects and the flat ``key = value`` file format."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .errors import ContractViolation

LOGGER = logging.getLogger(__name__)

LIKELIHOODS = ("bernoulli", "dequantized_gaussian")
LIKELIHOOD_MODES = ("density", "bin_integrated")
PRECISIONS = ("float32", "float64")
DATASET_FORMATS = ("raw_u8_tensor", "binarized")
BINARIZE_MODES = ("dynamic", "threshold", "none")
HASH_BYTES = 8

_MODEL_ALIASES = {"T": "timesteps", "n_t": "timesteps", "s": "quantization_step"}


@dataclass(slots=True)
class ModelConfig:
    """Architecture of a convolutional DRAW model.

    Hidden maps live at ``height / stride`` by ``width / stride``. With
    ``layers == 2`` and ``latent_maps_2 == 0`` no second layer is built.
    """

    layers: int = 1
    timesteps: int = 32
    channels: int = 1
    height: int = 28
    width: int = 28
    lstm_feature_maps: int = 160
    lstm_feature_maps_2: int = 160
    latent_maps: int = 12
    latent_maps_2: int = 12
    kernel: int = 5
    stride: int = 2
    recurrent_kernel: int = 3
    beta: float = 1.0
    likelihood: str = "bernoulli"
    likelihood_mode: str = "density"
    fixed_posterior_variance: bool = True
    quantization_step: float = 1.0 / 256.0
    precision: str = "float32"

    def __post_init__(self) -> None:
        if self.layers not in (1, 2):
            raise ContractViolation(f"'layers' must be 1 or 2, got {self.layers}")
        for key in ("timesteps", "channels", "height", "width", "lstm_feature_maps", "latent_maps", "stride"):
            if getattr(self, key) < 1:
                raise ContractViolation(f"'{key}' must be >= 1, got {getattr(self, key)}")
        if self.layers == 2 and self.latent_maps_2 > 0 and self.lstm_feature_maps_2 < 1:
            raise ContractViolation("'lstm_feature_maps_2' must be >= 1 for a two-layer model")
        if self.latent_maps_2 < 0:
            raise ContractViolation(f"'latent_maps_2' must be >= 0, got {self.latent_maps_2}")
        if self.timesteps > 255:
            raise ContractViolation(f"'timesteps' must fit in one byte, got {self.timesteps}")
        for key in ("kernel", "recurrent_kernel"):
            value = getattr(self, key)
            if value < 1 or value % 2 == 0:
                raise ContractViolation(f"'{key}' must be a positive odd integer, got {value}")
        if self.height % self.stride or self.width % self.stride:
            raise ContractViolation(
                f"input {self.height}x{self.width} is not divisible by stride {self.stride}"
            )
        if not self.beta > 0.0:
            raise ContractViolation(f"'beta' must be positive, got {self.beta}")
        if self.likelihood not in LIKELIHOODS:
            raise ContractViolation(f"'likelihood' must be one of {LIKELIHOODS}, got {self.likelihood!r}")
        if self.likelihood_mode not in LIKELIHOOD_MODES:
            raise ContractViolation(
                f"'likelihood_mode' must be one of {LIKELIHOOD_MODES}, got {self.likelihood_mode!r}"
            )
        if self.likelihood == "dequantized_gaussian" and not self.quantization_step > 0.0:
            raise ContractViolation("'quantization_step' must be positive for Gaussian likelihood")
        if self.precision not in PRECISIONS:
            raise ContractViolation(f"'precision' must be one of {PRECISIONS}, got {self.precision!r}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        values = _canonical_keys(data, _MODEL_ALIASES, cls, "model")
        defaults = cls()
        return cls(
            layers=_to_int(values.get("layers"), "layers", defaults.layers),
            timesteps=_to_int(values.get("timesteps"), "timesteps", defaults.timesteps),
            channels=_to_int(values.get("channels"), "channels", defaults.channels),
            height=_to_int(values.get("height"), "height", defaults.height),
            width=_to_int(values.get("width"), "width", defaults.width),
            lstm_feature_maps=_to_int(values.get("lstm_feature_maps"), "lstm_feature_maps", defaults.lstm_feature_maps),
            lstm_feature_maps_2=_to_int(
                values.get("lstm_feature_maps_2"), "lstm_feature_maps_2", defaults.lstm_feature_maps_2
            ),
            latent_maps=_to_int(values.get("latent_maps"), "latent_maps", defaults.latent_maps),
            latent_maps_2=_to_int(
                values.get("latent_maps_2"), "latent_maps_2", defaults.latent_maps_2, allow_zero=True
            ),
            kernel=_to_int(values.get("kernel"), "kernel", defaults.kernel),
            stride=_to_int(values.get("stride"), "stride", defaults.stride),
            recurrent_kernel=_to_int(values.get("recurrent_kernel"), "recurrent_kernel", defaults.recurrent_kernel),
            beta=_to_float(values.get("beta"), "beta", defaults.beta),
            likelihood=str(values.get("likelihood", defaults.likelihood)).strip().lower(),
            likelihood_mode=str(values.get("likelihood_mode", defaults.likelihood_mode)).strip().lower(),
            fixed_posterior_variance=_to_bool(
                values.get("fixed_posterior_variance"), defaults.fixed_posterior_variance
            ),
            quantization_step=_to_float(values.get("quantization_step"), "quantization_step", defaults.quantization_step),
            precision=str(values.get("precision", defaults.precision)).strip().lower(),
        )

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_dict(parse_key_values(text))

    def to_dict(self) -> Dict[str, Any]:
        return {item.name: getattr(self, item.name) for item in fields(self)}

    def to_text(self) -> str:
        """Canonical serialisation embedded in checkpoints and hashed into bitstreams."""

        return "".join(f"{key} = {_format_value(value)}\n" for key, value in self.to_dict().items())

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return self.channels, self.height, self.width

    @property
    def dims(self) -> int:
        return self.channels * self.height * self.width

    @property
    def hidden_shape(self) -> Tuple[int, int]:
        return self.height // self.stride, self.width // self.stride

    @property
    def canvas_channels(self) -> int:
        return 2 * self.channels if self.likelihood == "dequantized_gaussian" else self.channels

    @property
    def dequantizes_input(self) -> bool:
        """Whether training inputs need uniform dequantization noise."""

        return self.likelihood == "dequantized_gaussian" and self.likelihood_mode == "density"

    @property
    def active_layers(self) -> int:
        return 2 if self.layers == 2 and self.latent_maps_2 > 0 else 1

    def latent_shape(self, layer: int) -> Tuple[int, int, int]:
        maps = self.latent_maps if layer == 1 else self.latent_maps_2
        return (maps, *self.hidden_shape)

    def fingerprint(self, params: Mapping[str, np.ndarray]) -> bytes:
        """8-byte digest over this configuration and the float32 parameter bytes."""

        digest = hashlib.sha256(self.to_text().encode("utf-8"))
        for name in sorted(params):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
        return digest.digest()[:HASH_BYTES]


@dataclass(slots=True)
class TrainConfig:
    """Optimisation, rollback and checkpointing settings."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 1000
    seed: int = 1234
    spike_threshold: float = 3.0
    ema_decay: float = 0.99
    snapshot_interval: int = 500
    grad_clip: Optional[float] = None
    checkpoint_interval: int = 1000
    log_interval: int = 50
    prefetch: int = 2
    calibration_images: int = 256

    def __post_init__(self) -> None:
        if self.lr < 0.0:
            raise ContractViolation(f"'lr' must be non-negative, got {self.lr}")
        for key in ("batch_size", "snapshot_interval", "log_interval"):
            if getattr(self, key) < 1:
                raise ContractViolation(f"'{key}' must be >= 1, got {getattr(self, key)}")
        if not self.spike_threshold > 1.0:
            raise ContractViolation(f"'spike_threshold' must exceed 1, got {self.spike_threshold}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ContractViolation(f"'ema_decay' must lie in (0, 1), got {self.ema_decay}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        values = _canonical_keys(data, {}, cls, "train")
        defaults = cls()
        return cls(
            lr=_to_float(values.get("lr"), "lr", defaults.lr, allow_zero=True),
            beta1=_to_float(values.get("beta1"), "beta1", defaults.beta1),
            beta2=_to_float(values.get("beta2"), "beta2", defaults.beta2),
            eps=_to_float(values.get("eps"), "eps", defaults.eps),
            batch_size=_to_int(values.get("batch_size"), "batch_size", defaults.batch_size),
            max_steps=_to_int(values.get("max_steps"), "max_steps", defaults.max_steps, allow_zero=True),
            seed=_to_int(values.get("seed"), "seed", defaults.seed, allow_zero=True),
            spike_threshold=_to_float(values.get("spike_threshold"), "spike_threshold", defaults.spike_threshold),
            ema_decay=_to_float(values.get("ema_decay"), "ema_decay", defaults.ema_decay),
            snapshot_interval=_to_int(values.get("snapshot_interval"), "snapshot_interval", defaults.snapshot_interval),
            grad_clip=_to_float_or_none(values.get("grad_clip"), "grad_clip"),
            checkpoint_interval=_to_int(
                values.get("checkpoint_interval"), "checkpoint_interval", defaults.checkpoint_interval, allow_zero=True
            ),
            log_interval=_to_int(values.get("log_interval"), "log_interval", defaults.log_interval),
            prefetch=_to_int(values.get("prefetch"), "prefetch", defaults.prefetch, allow_zero=True),
            calibration_images=_to_int(
                values.get("calibration_images"), "calibration_images", defaults.calibration_images
            ),
        )


@dataclass(slots=True)
class DatasetSpec:
    """Location and layout of a header-less u8 image tensor file."""

    path: Optional[Path] = None
    format: str = "raw_u8_tensor"
    channels: int = 1
    height: int = 28
    width: int = 28
    train_count: Optional[int] = None
    valid_count: int = 0
    shuffle_seed: int = 0
    binarize: str = "dynamic"

    def __post_init__(self) -> None:
        if self.format not in DATASET_FORMATS:
            raise ContractViolation(f"'format' must be one of {DATASET_FORMATS}, got {self.format!r}")
        if self.binarize not in BINARIZE_MODES:
            raise ContractViolation(f"'binarize' must be one of {BINARIZE_MODES}, got {self.binarize!r}")
        for key in ("channels", "height", "width"):
            if getattr(self, key) < 1:
                raise ContractViolation(f"'{key}' must be >= 1, got {getattr(self, key)}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DatasetSpec":
        values = _canonical_keys(data, {}, cls, "data")
        defaults = cls()
        raw_path = values.get("path")
        return cls(
            path=Path(str(raw_path)).expanduser() if raw_path else None,
            format=str(values.get("format", defaults.format)).strip().lower(),
            channels=_to_int(values.get("channels"), "channels", defaults.channels),
            height=_to_int(values.get("height"), "height", defaults.height),
            width=_to_int(values.get("width"), "width", defaults.width),
            train_count=_to_int_or_none(values.get("train_count"), "train_count"),
            valid_count=_to_int(values.get("valid_count"), "valid_count", defaults.valid_count, allow_zero=True),
            shuffle_seed=_to_int(values.get("shuffle_seed"), "shuffle_seed", defaults.shuffle_seed, allow_zero=True),
            binarize=str(values.get("binarize", defaults.binarize)).strip().lower(),
        )

    @property
    def image_bytes(self) -> int:
        return self.channels * self.height * self.width


@dataclass(slots=True)
class RunConfig:
    """Top level configuration object."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    log_level: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        sections: Dict[str, Dict[str, Any]] = {"model": {}, "train": {}, "data": {}}
        log_level = None
        for key, value in data.items():
            if key == "log_level":
                log_level = str(value).upper()
                continue
            section, _, name = key.partition(".")
            if section not in sections or not name:
                raise ContractViolation(f"unknown configuration key {key!r}")
            sections[section][name] = value
        return cls(
            model=ModelConfig.from_dict(sections["model"]),
            train=TrainConfig.from_dict(sections["train"]),
            data=DatasetSpec.from_dict(sections["data"]),
            log_level=log_level,
        )


def parse_key_values(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines. ``#`` starts a comment."""

    values: Dict[str, str] = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ContractViolation(f"line {number}: expected 'key = value', got {raw_line!r}")
        values[key] = value.strip()
    return values


def parse_override(item: str) -> Tuple[str, str]:
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise ContractViolation(f"override {item!r} must look like key=value")
    return key.strip(), value.strip()


def load_config(path: Optional[Path], overrides: Iterable[str] = ()) -> RunConfig:
    """Layer defaults, the optional config file and ``key=value`` overrides."""

    values: Dict[str, str] = {}
    if path is not None:
        path = Path(path).expanduser()
        values.update(parse_key_values(path.read_text(encoding="utf-8")))
        LOGGER.debug("Read %s keys from %s", len(values), path)
    for item in overrides:
        key, value = parse_override(item)
        values[key] = value
    return RunConfig.from_dict(values)


def _canonical_keys(
    data: Mapping[str, Any], aliases: Mapping[str, str], cls: type, section: str
) -> Dict[str, Any]:
    known = {item.name for item in fields(cls)}
    values: Dict[str, Any] = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        if name not in known:
            raise ContractViolation(f"unknown configuration key '{section}.{key}'")
        values[name] = value
    return values


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _to_bool(value: Any, default: bool = False) -> bool:
    """Flags such as ``model.fixed_posterior_variance``: true/false, yes/no, on/off or 1/0."""

    if isinstance(value, bool):
        return value
    if value is None:
        return default
    if isinstance(value, (int, float)):
        return value != 0
    if isinstance(value, str):
        normalised = value.strip().lower()
        if normalised in {"true", "1", "yes", "on"}:
            return True
        if normalised in {"false", "0", "no", "off"}:
            return False
    raise ContractViolation(f"cannot interpret {value!r} as a boolean")


def _to_int(value: Any, key: str, default: int, *, allow_zero: bool = False) -> int:
    if value is None:
        return default
    try:
        result = int(str(value).strip()) if not isinstance(value, int) else value
    except ValueError as exc:
        raise ContractViolation(f"'{key}' must be an integer, got {value!r}") from exc
    if result < 0 or (result == 0 and not allow_zero):
        raise ContractViolation(f"'{key}' must be {'non-negative' if allow_zero else 'positive'}, got {result}")
    return result


def _to_float(value: Any, key: str, default: float, *, allow_zero: bool = False) -> float:
    if value is None:
        return default
    try:
        result = float(value)
    except (TypeError, ValueError) as exc:
        raise ContractViolation(f"'{key}' must be a number, got {value!r}") from exc
    if not np.isfinite(result) or result < 0 or (result == 0 and not allow_zero):
        raise ContractViolation(f"'{key}' must be a finite {'non-negative' if allow_zero else 'positive'} number, got {value!r}")
    return result


OFF_WORDS = {"", "none", "off"}


def _to_float_or_none(value: Any, key: str) -> Optional[float]:
    """``train.grad_clip``: a positive norm; ``0``, ``none``, ``off`` or empty disable clipping."""

    if value is None or (isinstance(value, str) and value.strip().lower() in OFF_WORDS):
        return None
    try:
        result = float(value)
    except (TypeError, ValueError) as exc:
        raise ContractViolation(f"'{key}' must be a number or 'none', got {value!r}") from exc
    if not np.isfinite(result) or result < 0:
        raise ContractViolation(f"'{key}' must be a finite non-negative number, got {value!r}")
    return result if result > 0 else None


def _to_int_or_none(value: Any, key: str) -> Optional[int]:
    """``data.train_count``: a non-negative image count; ``none`` or empty skips the file-size check."""

    if value is None or (isinstance(value, str) and value.strip().lower() in OFF_WORDS):
        return None
    if isinstance(value, bool):
        raise ContractViolation(f"'{key}' must be an integer, got {value!r}")
    try:
        result = int(str(value).strip()) if not isinstance(value, int) else value
    except ValueError as exc:
        raise ContractViolation(f"'{key}' must be an integer or 'none', got {value!r}") from exc
    if result < 0:
        raise ContractViolation(f"'{key}' must be non-negative, got {result}")
    return result


def ensure_list(value: Any) -> List[str]:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    if isinstance(value, Iterable):
        return [str(item) for item in value]
    return []
