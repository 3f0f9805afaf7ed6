"""Synthetic content/style images.

Content classes draw a shape on a dark background, style classes modulate the
whole image with a texture. Every image is a pure function of
(content, style, seed, index).
"""

import csv
import io
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from ..utils.images import read_pgm, write_pgm
from ..utils.validators import (
    ValidationError,
    validate_finite_scalar,
    validate_non_negative,
    validate_non_negative_integer,
    validate_positive_integer,
)

BACKGROUND = -0.5
FOREGROUND = 0.5
TEXTURE_AMPLITUDE = 0.5
DISK_RADIUS = 5.0
BAR_WIDTH = 3
CHECKER_CELL = 4
MANIFEST_NAME = "labels.csv"
MANIFEST_HEADER = ("file", "content", "style", "index")


class ContentClass(str, Enum):
    DISK = "disk"
    CROSS = "cross"


class StyleClass(str, Enum):
    PLAIN = "plain"
    STRIPES = "stripes"
    CHECKER = "checker"


ALL_CELLS: tuple[tuple[ContentClass, StyleClass], ...] = tuple(
    (c, s) for c in ContentClass for s in StyleClass
)
CONTENT_ADAPTER_CELLS = ((ContentClass.CROSS, StyleClass.PLAIN),)
STYLE_ADAPTER_CELLS = (
    (ContentClass.DISK, StyleClass.STRIPES),
    (ContentClass.CROSS, StyleClass.STRIPES),
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings."""

    image_side: int = 16
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        validate_positive_integer(self.image_side, "image_side")
        validate_non_negative(validate_finite_scalar(self.noise, "noise"), "noise")
        validate_non_negative_integer(self.seed, "seed")

    @property
    def input_dim(self) -> int:
        return self.image_side * self.image_side


@dataclass(frozen=True)
class LabeledImage:
    content: ContentClass
    style: StyleClass
    index: int
    pixels: np.ndarray

    @property
    def filename(self) -> str:
        return f"{self.content.value}_{self.style.value}_{self.index:04d}.pgm"


def _shape_mask(content: ContentClass, side: int) -> np.ndarray:
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    centre = (side - 1) / 2.0
    if content is ContentClass.DISK:
        return (rows - centre) ** 2 + (cols - centre) ** 2 <= DISK_RADIUS**2
    lo = side // 2 - BAR_WIDTH // 2 - 1
    band = (np.arange(side) >= lo) & (np.arange(side) < lo + BAR_WIDTH)
    span = (np.arange(side) >= 2) & (np.arange(side) < side - 2)
    return (band[:, None] & span[None, :]) | (span[:, None] & band[None, :])


def _texture(style: StyleClass, side: int) -> np.ndarray:
    rows, cols = np.mgrid[0:side, 0:side]
    if style is StyleClass.STRIPES:
        return np.where(rows % 2 == 0, TEXTURE_AMPLITUDE, -TEXTURE_AMPLITUDE)
    if style is StyleClass.CHECKER:
        parity = (rows // CHECKER_CELL + cols // CHECKER_CELL) % 2
        return np.where(parity == 0, TEXTURE_AMPLITUDE, -TEXTURE_AMPLITUDE)
    return np.zeros((side, side))


def make_image(
    spec: SyntheticSpec,
    content: Union[ContentClass, str],
    style: Union[StyleClass, str],
    index: int,
) -> LabeledImage:
    """One deterministic image, flattened row-major, values in [-1, 1]."""
    content, style = ContentClass(content), StyleClass(style)
    index = validate_non_negative_integer(index, "index")
    side = spec.image_side
    base = np.where(_shape_mask(content, side), FOREGROUND, BACKGROUND) + _texture(style, side)
    rng = np.random.default_rng(
        [spec.seed, list(ContentClass).index(content), list(StyleClass).index(style), index]
    )
    noisy = base + rng.normal(0.0, spec.noise, size=base.shape) if spec.noise > 0 else base
    pixels = np.clip(noisy, -1.0, 1.0).ravel()
    pixels.flags.writeable = False
    return LabeledImage(content=content, style=style, index=index, pixels=pixels)


def make_dataset(
    spec: SyntheticSpec,
    n_per_cell: int,
    cells: Sequence[tuple[ContentClass, StyleClass]] = ALL_CELLS,
) -> list[LabeledImage]:
    """``n_per_cell`` images for each (content, style) cell, cell by cell."""
    n_per_cell = validate_positive_integer(n_per_cell, "n_per_cell")
    return [make_image(spec, c, s, i) for c, s in cells for i in range(n_per_cell)]


def make_round_robin(spec: SyntheticSpec, total: int) -> list[LabeledImage]:
    """``total`` images assigned to the cells in turn (used by ``gen-data``)."""
    total = validate_non_negative_integer(total, "total")
    return [
        make_image(spec, *ALL_CELLS[k % len(ALL_CELLS)], k // len(ALL_CELLS)) for k in range(total)
    ]


def as_matrix(images: Iterable[LabeledImage]) -> np.ndarray:
    """Stack images into an (N, D) array."""
    rows = [image.pixels for image in images]
    if not rows:
        raise ValidationError("no images to stack")
    return np.stack(rows)


def select_cells(
    images: Iterable[LabeledImage], cells: Sequence[tuple[ContentClass, StyleClass]]
) -> list[LabeledImage]:
    wanted = set(cells)
    return [image for image in images if (image.content, image.style) in wanted]


def manifest_text(images: Sequence[LabeledImage]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for image in images:
        writer.writerow([image.filename, image.content.value, image.style.value, image.index])
    return buffer.getvalue()


def write_dataset(images: Sequence[LabeledImage], out_dir: Union[str, Path]) -> list[Path]:
    """Write one PGM per image plus the ``labels.csv`` manifest.

    Returns:
        Paths written, manifest last.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_pgm(out_dir / image.filename, image.pixels) for image in images]
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text(manifest_text(images), encoding="utf-8")
    written.append(manifest)
    return written


def read_dataset(
    data_dir: Union[str, Path],
    cells: Optional[Sequence[tuple[ContentClass, StyleClass]]] = None,
) -> list[LabeledImage]:
    """Load a directory written by ``write_dataset``.

    Pixels come back quantized to 8 bits.

    Raises:
        ValidationError: If the manifest is malformed.
    """
    data_dir = Path(data_dir)
    lines = (data_dir / MANIFEST_NAME).read_text(encoding="utf-8").splitlines()
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or tuple(header) != MANIFEST_HEADER:
        raise ValidationError(f"{data_dir / MANIFEST_NAME} has no '{','.join(MANIFEST_HEADER)}' header")

    images = []
    for number, row in enumerate(reader, start=2):
        try:
            name, content, style, index = row
            image = LabeledImage(
                content=ContentClass(content),
                style=StyleClass(style),
                index=int(index),
                pixels=read_pgm(data_dir / name),
            )
        except ValueError as e:
            raise ValidationError(f"{MANIFEST_NAME} line {number}: {e}") from e
        images.append(image)
    return images if cells is None else select_cells(images, cells)
