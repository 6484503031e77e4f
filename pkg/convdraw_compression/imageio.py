"""PPM P6 reading and writing, image mosaics and optional PNG output."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from .errors import ContractViolation, DatasetError
from .models import ImageBatch

LOGGER = logging.getLogger(__name__)

PPM_MAGIC = b"P6"
PPM_MAXVAL = 255
SEPARATOR = 255

Tile = np.ndarray
Row = Union[ImageBatch, np.ndarray, Sequence[np.ndarray]]


def _as_tiles(row: Row) -> List[Tile]:
    if isinstance(row, ImageBatch):
        return [image for image in row.data]
    if isinstance(row, np.ndarray):
        if row.ndim == 3:
            return [row]
        if row.ndim == 4:
            return [image for image in row]
        raise ContractViolation(f"grid row must be C×H×W or N×C×H×W, got {row.shape}")
    return [np.asarray(image) for image in row]


def to_rgb_u8(image: np.ndarray) -> np.ndarray:
    """C×H×W values in [0, 1] to H×W×3 bytes; one channel is replicated."""

    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ContractViolation(f"expected a 1- or 3-channel C×H×W image, got {image.shape}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if pixels.shape[0] == 1:
        pixels = np.repeat(pixels, 3, axis=0)
    return np.ascontiguousarray(pixels.transpose(1, 2, 0))


def mosaic(rows: Sequence[Row]) -> np.ndarray:
    """Lay tiles out on a white canvas with one-pixel separators.

    An R×K grid of H×W tiles becomes (R·H + R + 1) × (K·W + K + 1) pixels.
    Short rows are padded with blank (white) tiles.
    """

    grid = [_as_tiles(row) for row in rows]
    grid = [row for row in grid if row]
    if not grid:
        raise ContractViolation("cannot build a grid without images")
    shape = grid[0][0].shape
    for row in grid:
        for tile in row:
            if tile.shape != shape:
                raise ContractViolation(f"grid tiles differ in shape: {tile.shape} vs {shape}")
    _, height, width = shape
    columns = max(len(row) for row in grid)
    canvas = np.full(
        (len(grid) * height + len(grid) + 1, columns * width + columns + 1, 3), SEPARATOR, dtype=np.uint8
    )
    for r, row in enumerate(grid):
        top = 1 + r * (height + 1)
        for k, tile in enumerate(row):
            left = 1 + k * (width + 1)
            canvas[top : top + height, left : left + width] = to_rgb_u8(tile)
    return canvas


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ContractViolation(f"rgb must be H×W×3, got {rgb.shape}")
    height, width = rgb.shape[:2]
    header = b"P6\n%d %d\n%d\n" % (width, height, PPM_MAXVAL)
    return header + np.ascontiguousarray(rgb).tobytes()


def write_ppm(path: Path, rgb: np.ndarray) -> Path:
    path = Path(path)
    try:
        if not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_ppm(rgb))
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc.strerror or exc}") from exc
    return path


def write_png(path: Path, rgb: np.ndarray) -> Path:
    """Write RGB bytes as PNG. Requires Pillow."""

    try:
        from PIL import Image
    except ImportError:
        raise ContractViolation("PNG output requires Pillow: pip install Pillow") from None
    path = Path(path)
    if not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)
    return path


def png_available() -> bool:
    try:
        import PIL  # noqa: F401
    except ImportError:
        return False
    return True


def emit_grid(rows: Sequence[Row], path: Path) -> Path:
    """Write a mosaic of image rows; PNG when asked for and Pillow is present."""

    path = Path(path)
    canvas = mosaic(rows)
    if path.suffix.lower() == ".png":
        if png_available():
            written = write_png(path, canvas)
        else:
            LOGGER.warning("Pillow is not installed; writing %s as PPM instead", path)
            written = write_ppm(path.with_suffix(".ppm"), canvas)
    else:
        written = write_ppm(path, canvas)
    LOGGER.info("Wrote %s×%s image grid to %s", canvas.shape[0], canvas.shape[1], written)
    return written


def save_image(path: Path, image: np.ndarray) -> Path:
    """Write one C×H×W image without borders, as PNG or PPM by suffix."""

    path = Path(path)
    rgb = to_rgb_u8(image)
    if path.suffix.lower() == ".png" and png_available():
        return write_png(path, rgb)
    return write_ppm(path, rgb)


def _next_token(payload: bytes, pos: int) -> tuple[bytes, int]:
    # Header tokens are separated by whitespace; '#' comments run to end of line.
    length = len(payload)
    while pos < length:
        char = payload[pos : pos + 1]
        if char == b"#":
            end = payload.find(b"\n", pos)
            pos = length if end < 0 else end + 1
        elif char.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < length and not payload[pos : pos + 1].isspace() and payload[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DatasetError("PPM header is truncated")
    return payload[start:pos], pos


def decode_ppm(payload: bytes) -> np.ndarray:
    """Strict binary P6 with maxval 255 to H×W×3 bytes."""

    magic, pos = _next_token(payload, 0)
    if magic != PPM_MAGIC:
        raise DatasetError(f"not a binary PPM (magic {magic[:8]!r})")
    fields = []
    for _ in range(3):
        token, pos = _next_token(payload, pos)
        if not token.isdigit():
            raise DatasetError(f"malformed PPM header field {token[:16]!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != PPM_MAXVAL:
        raise DatasetError(f"only maxval {PPM_MAXVAL} PPM files are supported, got {maxval}")
    if width < 1 or height < 1:
        raise DatasetError(f"PPM has empty dimensions {width}×{height}")
    if pos >= len(payload) or not payload[pos : pos + 1].isspace():
        raise DatasetError("PPM header must end with a single whitespace byte")
    body = payload[pos + 1 :]
    expected = width * height * 3
    if len(body) != expected:
        raise DatasetError(f"PPM pixel data has {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def read_ppm(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError as exc:
        raise DatasetError(f"image file {path} does not exist") from exc
    return decode_ppm(payload)


def read_ppm_image(path: Path, channels: int) -> np.ndarray:
    """Read a PPM as a 1×C×H×W u8 array; one channel keeps only the red plane."""

    rgb = read_ppm(path)
    if channels == 1:
        if not (np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 0], rgb[..., 2])):
            LOGGER.warning("%s is not grey; using its red channel", path)
        planes = rgb[..., :1]
    elif channels == 3:
        planes = rgb
    else:
        raise ContractViolation(f"PPM input supports 1 or 3 channels, got {channels}")
    return np.ascontiguousarray(planes.transpose(2, 0, 1))[None]
