"""Dataset files, minibatch streams, binarization, dequantization and prefetching."""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from queue import Empty, Full, Queue
from typing import Callable, Generic, Iterator, Optional, Tuple, TypeVar

import numpy as np

from .config import DatasetSpec
from .errors import ContractViolation, DatasetError
from .models import DEFAULT_STEP, ImageBatch

LOGGER = logging.getLogger(__name__)

Item = TypeVar("Item")
Preparer = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass(slots=True)
class Dataset:
    """u8 images split into a training part and a trailing validation part."""

    spec: DatasetSpec
    train: np.ndarray
    valid: np.ndarray

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train
        if name in {"valid", "validation"}:
            return self.valid
        raise ContractViolation(f"unknown split {name!r}; expected 'train' or 'valid'")


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Read a header-less count×C×H×W u8 file and split it."""

    if spec.path is None:
        raise DatasetError("dataset path is not configured (set data.path)")
    path = Path(spec.path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError as exc:
        raise DatasetError(f"dataset file {path} does not exist") from exc
    per_image = spec.image_bytes
    if spec.train_count is not None:
        expected = (spec.train_count + spec.valid_count) * per_image
        if len(payload) != expected:
            raise DatasetError(
                f"dataset {path} has {len(payload)} bytes, expected {expected} "
                f"({spec.train_count + spec.valid_count} images of {per_image} bytes)"
            )
    elif len(payload) % per_image or not payload:
        raise DatasetError(
            f"dataset {path} has {len(payload)} bytes, not a whole number of {per_image}-byte images"
        )
    count = len(payload) // per_image
    if spec.valid_count >= count:
        raise DatasetError(f"validation split of {spec.valid_count} leaves no training images out of {count}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, spec.channels, spec.height, spec.width)
    train_end = count - spec.valid_count
    LOGGER.info("Loaded %s images from %s (%s train, %s valid)", count, path, train_end, spec.valid_count)
    return Dataset(spec=spec, train=images[:train_end], valid=images[train_end:])


def iterate_batches(images: np.ndarray, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """One epoch of shuffled minibatches; the order depends only on (seed, epoch)."""

    if batch_size < 1:
        raise ContractViolation(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(images))
    for start in range(0, len(images), batch_size):
        yield images[order[start : start + batch_size]]


def to_unit(pixels: np.ndarray, fmt: str = "raw_u8_tensor") -> np.ndarray:
    """u8 pixels to [0, 1]; pre-binarized files map every non-zero byte to 1."""

    pixels = np.asarray(pixels, dtype=np.uint8)
    if fmt == "binarized":
        return (pixels > 0).astype(np.float64)
    return pixels.astype(np.float64) / 255.0


def binarize(images: np.ndarray, mode: str, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Bernoulli-sample (``dynamic``) or threshold at 0.5 (``threshold``) grey levels."""

    if mode == "dynamic":
        if rng is None:
            raise ContractViolation("dynamic binarization needs a random generator")
        return (rng.random(images.shape) < images).astype(np.float64)
    if mode == "threshold":
        return (images >= 0.5).astype(np.float64)
    if mode == "none":
        if not np.all((images == 0.0) | (images == 1.0)):
            raise DatasetError("binarize = none but the data is not binary")
        return images
    raise ContractViolation(f"unknown binarize mode {mode!r}")


def dequantize(
    batch: ImageBatch | np.ndarray,
    s: Optional[float] = None,
    seed: int | np.random.Generator = 0,
) -> ImageBatch:
    """Add iid U(−s/2, s/2) noise; s = 0 returns the input unchanged."""

    if not isinstance(batch, ImageBatch):
        batch = ImageBatch(np.asarray(batch), DEFAULT_STEP if s is None else s)
    width = batch.s if s is None else s
    if width < 0:
        raise ContractViolation(f"dequantization width must be non-negative, got {width}")
    if width == 0:
        return ImageBatch(batch.data.copy(), batch.s)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.uniform(-0.5 * width, 0.5 * width, size=batch.data.shape)
    return ImageBatch(batch.data + noise, batch.s)


def make_preparer(
    *,
    fmt: str,
    likelihood: str,
    binarize_mode: str,
    dequantize_step: Optional[float],
) -> Preparer:
    """Build the u8 → model-input transform applied to every minibatch."""

    def prepare(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        images = to_unit(pixels, fmt)
        if likelihood == "bernoulli":
            images = binarize(images, binarize_mode, rng)
        elif dequantize_step:
            images = dequantize(images, dequantize_step, rng).data
        return images

    return prepare


class BatchSource:
    """Endless stream of prepared minibatches over successive epochs.

    Shuffling uses ``default_rng([seed, epoch])``; binarization and
    dequantization noise use ``default_rng([seed, epoch, 1])``, so noise is
    redrawn every epoch but the stream is reproducible.
    """

    def __init__(self, images: np.ndarray, batch_size: int, seed: int, prepare: Preparer) -> None:
        if len(images) == 0:
            raise DatasetError("cannot draw batches from an empty split")
        self.images = images
        self.batch_size = batch_size
        self.seed = seed
        self.prepare = prepare

    def epoch(self, epoch: int) -> Iterator[np.ndarray]:
        noise_rng = np.random.default_rng([self.seed, epoch, 1])
        for pixels in iterate_batches(self.images, self.batch_size, self.seed, epoch):
            yield self.prepare(pixels, noise_rng)

    def stream(self, start_epoch: int = 0) -> Iterator[Tuple[int, np.ndarray]]:
        epoch = start_epoch
        while True:
            for batch in self.epoch(epoch):
                yield epoch, batch
            epoch += 1


class _Failure:
    __slots__ = ("error",)

    def __init__(self, error: BaseException) -> None:
        self.error = error


_END = object()


class Prefetcher(Generic[Item]):
    """Runs an iterator in a background thread, handing items over a bounded queue."""

    def __init__(self, source: Iterator[Item], depth: int = 2, *, name: str = "prefetch") -> None:
        self._source = source
        self._depth = depth
        self._queue: "Queue[object]" = Queue(maxsize=max(depth, 1))
        self._stop_event = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._name = name

    def __enter__(self) -> "Prefetcher[Item]":
        self.start()
        return self

    def __exit__(self, *_exc: object) -> None:
        self.close()

    def start(self) -> None:
        if self._depth <= 0 or self._thread is not None:
            return
        self._stop_event.clear()
        self._thread = threading.Thread(target=self._fill_loop, name=self._name, daemon=True)
        self._thread.start()

    def __iter__(self) -> Iterator[Item]:
        return self

    def __next__(self) -> Item:
        if self._depth <= 0:
            return next(self._source)
        if self._thread is None:
            self.start()
        item = self._queue.get()
        if item is _END:
            raise StopIteration
        if isinstance(item, _Failure):
            raise item.error
        return item  # type: ignore[return-value]

    def close(self) -> None:
        self._stop_event.set()
        thread = self._thread
        if thread and thread.is_alive():
            while True:
                try:
                    self._queue.get_nowait()
                except Empty:
                    break
            thread.join(timeout=5.0)
        self._thread = None

    def _put(self, item: object) -> bool:
        while not self._stop_event.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except Full:
                continue
        return False

    def _fill_loop(self) -> None:
        try:
            for item in self._source:
                if not self._put(item):
                    return
        except Exception as exc:  # handed to the consumer
            LOGGER.debug("Prefetch source %s failed: %s", self._name, exc)
            self._put(_Failure(exc))
            return
        self._put(_END)


def read_raw_image(path: Path, channels: int, height: int, width: int) -> np.ndarray:
    """Read one header-less C×H×W u8 image as a 1×C×H×W array."""

    path = Path(path)
    payload = path.read_bytes()
    expected = channels * height * width
    if len(payload) != expected:
        raise DatasetError(f"raw image {path} has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(1, channels, height, width).copy()


def write_raw_image(path: Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 4:
        if pixels.shape[0] != 1:
            raise ContractViolation(f"raw image files hold one image, got batch of {pixels.shape[0]}")
        pixels = pixels[0]
    Path(path).write_bytes(np.ascontiguousarray(pixels).tobytes())
