"""Binary portable graymap (PGM, P5) codec for model-space images."""

import math
import re
from pathlib import Path
from typing import Union

import numpy as np

from .validators import DimensionError, ValidationError

_HEADER = re.compile(rb"\AP5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def to_pixels(values: np.ndarray) -> np.ndarray:
    """Map model-space values in [-1, 1] to bytes: round(clamp((x+1)/2, 0, 1) * 255)."""
    scaled = np.clip((np.asarray(values, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0) * 255.0
    # Half-up rounding; np.round would round half to even.
    return np.floor(scaled + 0.5).astype(np.uint8)


def from_pixels(pixels: np.ndarray) -> np.ndarray:
    """Inverse of ``to_pixels`` up to quantization."""
    return np.asarray(pixels, dtype=np.float64) / 255.0 * 2.0 - 1.0


def image_side(size: int) -> int:
    """Side of a square image with ``size`` pixels.

    Raises:
        DimensionError: If size is not a perfect square.
    """
    side = math.isqrt(size)
    if side * side != size:
        raise DimensionError(f"{size} values do not form a square image")
    return side


def encode_pgm(values: np.ndarray, width: int, height: int) -> bytes:
    """Encode row-major model-space values as a P5 graymap."""
    values = np.asarray(values).ravel()
    if values.size != width * height:
        raise DimensionError(f"{values.size} values for a {width}x{height} image")
    return f"P5\n{width} {height}\n255\n".encode("ascii") + to_pixels(values).tobytes()


def decode_pgm(blob: bytes) -> tuple[np.ndarray, int, int]:
    """Decode a P5 graymap with maxval 255.

    Returns:
        Model-space values (row-major, flat), width and height.

    Raises:
        ValidationError: If the header or pixel count is wrong.
    """
    match = _HEADER.match(blob)
    if match is None:
        raise ValidationError("not a binary PGM (P5) image")
    width, height, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise ValidationError(f"unsupported PGM maxval {maxval}")
    pixels = np.frombuffer(blob[match.end():], dtype=np.uint8)
    if pixels.size != width * height:
        raise ValidationError(f"PGM holds {pixels.size} pixels, header says {width * height}")
    return from_pixels(pixels), width, height


def write_pgm(path: Union[str, Path], values: np.ndarray) -> Path:
    """Write a flat square image."""
    values = np.asarray(values).ravel()
    side = image_side(values.size)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_pgm(values, side, side))
    return path


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a PGM into flat model-space values."""
    values, _, _ = decode_pgm(Path(path).read_bytes())
    return values
