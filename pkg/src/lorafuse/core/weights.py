"""Weight-file codec.

Layout (little-endian throughout):

    [8 bytes]  unsigned manifest length N
    [N bytes]  UTF-8 JSON manifest: name -> {"dtype": "f32", "shape": [...],
               "data_offsets": [start, end)} with offsets relative to the payload
    [rest]     raw float32 payload

Values are held as float64 in memory and converted to float32 on save.
"""

import json
import math
import struct
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np

from ..utils.validators import ValidationError, WeightFormatError
from .numerics import Tensor

HEADER_SIZE = 8
DTYPE = "f32"
_LE_F32 = np.dtype("<f4")


def encode_weights(tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> bytes:
    """Serialize named tensors to the weight-file byte layout.

    Raises:
        ValidationError: If a name is empty or a value does not fit in float32.
    """
    manifest: dict[str, Any] = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if not name:
            raise ValidationError("tensor names must be non-empty")
        array = np.asarray(tensors[name].data if isinstance(tensors[name], Tensor) else tensors[name])
        with np.errstate(over="ignore"):
            raw = np.ascontiguousarray(array, dtype=_LE_F32)
        if not np.all(np.isfinite(raw)):
            raise ValidationError(f"tensor '{name}' has values that are not finite in float32")
        payload = raw.tobytes()
        manifest[name] = {
            "dtype": DTYPE,
            "shape": list(array.shape),
            "data_offsets": [offset, offset + len(payload)],
        }
        chunks.append(payload)
        offset += len(payload)

    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_weights(blob: bytes) -> dict[str, Tensor]:
    """Parse the weight-file byte layout.

    Returns:
        Tensors by name, as float64.

    Raises:
        WeightFormatError: On truncation, bad manifest, unknown dtype, or
            overlapping/out-of-bounds offsets. Nothing is returned on error.
    """
    if len(blob) < HEADER_SIZE:
        raise WeightFormatError(f"file is {len(blob)} bytes, shorter than the length prefix")
    (header_len,) = struct.unpack("<Q", blob[:HEADER_SIZE])
    if HEADER_SIZE + header_len > len(blob):
        raise WeightFormatError(f"manifest length {header_len} runs past the end of the file")

    try:
        manifest = json.loads(blob[HEADER_SIZE:HEADER_SIZE + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightFormatError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise WeightFormatError("manifest must be a mapping of tensor names")

    payload = memoryview(blob)[HEADER_SIZE + header_len:]
    spans = []
    for name, entry in manifest.items():
        start, end, shape = _check_entry(name, entry, len(payload))
        spans.append((start, end, name, shape))

    spans.sort()
    for (_, prev_end, prev_name, _), (start, _, name, _) in zip(spans, spans[1:]):
        if start < prev_end:
            raise WeightFormatError(f"data overlaps tensor '{prev_name}'", tensor_name=name)

    tensors = {}
    for start, end, name, shape in spans:
        values = np.frombuffer(payload[start:end], dtype=_LE_F32).astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise WeightFormatError("payload holds non-finite values", tensor_name=name)
        tensors[name] = Tensor(values.reshape(shape))
    return dict(sorted(tensors.items()))


def _check_entry(name: str, entry: Any, payload_len: int) -> tuple[int, int, tuple[int, ...]]:
    if not isinstance(entry, dict):
        raise WeightFormatError("descriptor must be a mapping", tensor_name=name)
    if entry.get("dtype") != DTYPE:
        raise WeightFormatError(f"unknown dtype {entry.get('dtype')!r}", tensor_name=name)

    shape = entry.get("shape")
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise WeightFormatError(f"invalid shape {shape!r}", tensor_name=name)

    offsets = entry.get("data_offsets")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) for o in offsets)
    ):
        raise WeightFormatError(f"invalid data_offsets {offsets!r}", tensor_name=name)
    start, end = offsets
    if not 0 <= start <= end:
        raise WeightFormatError(f"invalid data_offsets {offsets}", tensor_name=name)
    if end > payload_len:
        raise WeightFormatError(
            f"data ends at byte {end} but the payload has {payload_len} bytes (truncated file)",
            tensor_name=name,
        )
    if end - start != _LE_F32.itemsize * math.prod(shape):
        raise WeightFormatError(
            f"{end - start} bytes do not hold shape {tuple(shape)}", tensor_name=name
        )
    return start, end, tuple(shape)


def save_weights(path: Union[str, Path], tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> Path:
    """Write named tensors to a weight file.

    Args:
        path: Destination file; parent directories are created.
        tensors: Tensors by unique name.

    Returns:
        The written path.
    """
    path = Path(path)
    blob = encode_weights(tensors)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


def load_weights(path: Union[str, Path]) -> dict[str, Tensor]:
    """Read a weight file written by ``save_weights``.

    Raises:
        FileNotFoundError: If the file does not exist.
        WeightFormatError: If the file is malformed.
    """
    return decode_weights(Path(path).read_bytes())
