"""Parameter storage, the Adam optimizer and the binary checkpoint format."""
from __future__ import annotations

import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from .errors import ContractViolation, CorruptStreamError, NumericFault
from .tensor import Tensor

LOGGER = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CDRWPARM"
CHECKPOINT_VERSION = 1
FLAG_OPTIMIZER_STATE = 0x01
_FIRST_MOMENT_PREFIX = "adam.m/"
_SECOND_MOMENT_PREFIX = "adam.v/"


@dataclass(slots=True)
class AdamConfig:
    """Adam hyperparameters.

    A learning rate of exactly zero is accepted and freezes the parameters,
    which is useful for evaluation-only runs of the training loop.
    """

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.lr >= 0.0 or not math.isfinite(self.lr):
            raise ContractViolation(f"learning rate must be a finite non-negative value, got {self.lr}")
        for label, value in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 < value < 1.0:
                raise ContractViolation(f"{label} must lie in (0, 1), got {value}")
        if not self.eps > 0.0:
            raise ContractViolation(f"eps must be positive, got {self.eps}")


@dataclass(slots=True)
class ParamSnapshot:
    """Deep copy of every parameter and optimizer moment at one step."""

    step: int
    values: Dict[str, np.ndarray]
    first_moments: Dict[str, np.ndarray]
    second_moments: Dict[str, np.ndarray]


class ParamStore:
    """Named trainable tensors plus their Adam moments and step counter."""

    def __init__(self, dtype: np.dtype | str = np.float64) -> None:
        self.dtype = np.dtype(dtype)
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.first_moments: Dict[str, np.ndarray] = {}
        self.second_moments: Dict[str, np.ndarray] = {}
        self.step = 0

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractViolation(f"parameter {name!r} registered twice")
        tensor = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = tensor
        self.first_moments[name] = np.zeros_like(tensor.data)
        self.second_moments[name] = np.zeros_like(tensor.data)
        return tensor

    def assign(self, name: str, value: np.ndarray) -> None:
        """Overwrite a parameter in place, keeping the tensor object identity."""

        tensor = self._params[name]
        array = np.asarray(value, dtype=self.dtype)
        if array.shape != tensor.shape:
            raise ContractViolation(
                f"parameter {name!r} expects shape {tensor.shape}, got {array.shape}"
            )
        tensor.data[...] = array

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def gradients(self) -> Dict[str, np.ndarray]:
        """Current gradients, with zeros for parameters the loss did not reach."""

        return {
            name: tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            for name, tensor in self._params.items()
        }

    def snapshot(self) -> ParamSnapshot:
        return ParamSnapshot(
            step=self.step,
            values={name: tensor.data.copy() for name, tensor in self._params.items()},
            first_moments={name: m.copy() for name, m in self.first_moments.items()},
            second_moments={name: v.copy() for name, v in self.second_moments.items()},
        )

    def restore(self, snapshot: ParamSnapshot) -> None:
        for name, tensor in self._params.items():
            tensor.data[...] = snapshot.values[name]
            self.first_moments[name][...] = snapshot.first_moments[name]
            self.second_moments[name][...] = snapshot.second_moments[name]
        self.step = snapshot.step

    def values(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self._params.items()}


def adam_step(store: ParamStore, grads: Mapping[str, Optional[np.ndarray]], cfg: AdamConfig) -> ParamStore:
    """Apply one bias-corrected Adam update in place and return ``store``."""

    for name, grad in grads.items():
        if grad is None:
            continue
        if name not in store:
            raise ContractViolation(f"gradient for unknown parameter {name!r}")
        if grad.shape != store[name].shape:
            raise ContractViolation(
                f"gradient for {name!r} has shape {grad.shape}, parameter has {store[name].shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise NumericFault(f"non-finite gradient for parameter {name!r}", param=name)

    store.step += 1
    correction1 = 1.0 - cfg.beta1**store.step
    correction2 = 1.0 - cfg.beta2**store.step
    for name, tensor in store.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        m = store.first_moments[name]
        v = store.second_moments[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(tensor.dtype, copy=False)
    return store


def clip_grad_norm(
    grads: Mapping[str, np.ndarray], max_norm: float
) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale gradients so their global L2 norm does not exceed ``max_norm``."""

    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return dict(grads), total
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}, total


# Checkpoint IO ----------------------------------------------------------------


@dataclass(slots=True)
class Checkpoint:
    """Decoded contents of a parameter checkpoint file."""

    config_text: str
    params: Dict[str, np.ndarray]
    extras: Dict[str, np.ndarray] = field(default_factory=dict)
    first_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    step: Optional[int] = None


def _write_entry(fh, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    array = np.asarray(array)
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def save_checkpoint(
    path: Path,
    store: ParamStore,
    config_text: str,
    *,
    extras: Optional[Mapping[str, np.ndarray]] = None,
    include_optimizer: bool = True,
) -> None:
    """Write parameters (and optionally Adam state) as little-endian float32."""

    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict(store.values())
    for name, value in (extras or {}).items():
        entries[name] = value
    if include_optimizer:
        for name in store:
            entries[_FIRST_MOMENT_PREFIX + name] = store.first_moments[name]
            entries[_SECOND_MOMENT_PREFIX + name] = store.second_moments[name]

    config_bytes = config_text.encode("utf-8")
    flags = FLAG_OPTIMIZER_STATE if include_optimizer else 0
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HB", CHECKPOINT_VERSION, flags))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        if include_optimizer:
            fh.write(struct.pack("<Q", store.step))
        fh.write(struct.pack("<I", len(entries)))
        for name, array in entries.items():
            _write_entry(fh, name, array)
    LOGGER.info("Wrote checkpoint with %s entries to %s", len(entries), path)


class _Reader:
    def __init__(self, payload: bytes, path: Path) -> None:
        self._payload = payload
        self._offset = 0
        self._path = path

    def take(self, size: int) -> bytes:
        end = self._offset + size
        if end > len(self._payload):
            raise CorruptStreamError(
                f"checkpoint {self._path} truncated: needed {end} bytes, file has {len(self._payload)}"
            )
        chunk = self._payload[self._offset : end]
        self._offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Path, *, param_names: Optional[set[str]] = None) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Entries whose name is not an optimizer moment and not in ``param_names``
    (when given) are returned as ``extras``.
    """

    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CorruptStreamError(f"{path} is not a parameter checkpoint (bad magic)")
    version, flags = reader.unpack("<HB")
    if version != CHECKPOINT_VERSION:
        raise CorruptStreamError(f"unsupported checkpoint version {version} in {path}")
    (config_len,) = reader.unpack("<I")
    config_text = reader.take(config_len).decode("utf-8")
    step = reader.unpack("<Q")[0] if flags & FLAG_OPTIMIZER_STATE else None
    (count,) = reader.unpack("<I")

    checkpoint = Checkpoint(config_text=config_text, params=OrderedDict(), step=step)
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if dims else 1
        array = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(dims).copy()
        if name.startswith(_FIRST_MOMENT_PREFIX):
            checkpoint.first_moments[name[len(_FIRST_MOMENT_PREFIX) :]] = array
        elif name.startswith(_SECOND_MOMENT_PREFIX):
            checkpoint.second_moments[name[len(_SECOND_MOMENT_PREFIX) :]] = array
        elif param_names is not None and name not in param_names:
            checkpoint.extras[name] = array
        else:
            checkpoint.params[name] = array
    LOGGER.debug("Read %s entries from %s", count, path)
    return checkpoint


def restore_store(store: ParamStore, checkpoint: Checkpoint) -> None:
    """Copy checkpoint parameters (and optimizer state when present) into ``store``."""

    missing = [name for name in store if name not in checkpoint.params]
    if missing:
        raise CorruptStreamError(f"checkpoint lacks parameters: {', '.join(missing)}")
    for name in store:
        store.assign(name, checkpoint.params[name])
        if name in checkpoint.first_moments and name in checkpoint.second_moments:
            store.first_moments[name][...] = checkpoint.first_moments[name]
            store.second_moments[name][...] = checkpoint.second_moments[name]
    if checkpoint.step is not None:
        store.step = checkpoint.step
