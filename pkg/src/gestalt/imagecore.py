"""Image and mask primitives.

Images are 2-D ``float64`` arrays with intensities in ``[0, 1]`` (0 = black ink,
1 = white paper). Masks are boolean arrays of the same shape where ``True``
marks an observed (known) pixel.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .errors import (
    AllWhite,
    BadCellCount,
    DimensionMismatch,
    IndexOutOfRange,
    LengthMismatch,
    MismatchedCellSizes,
    OutOfBounds,
)

DEFAULT_FILL = 0.5
DEFAULT_WHITE_THRESHOLD = 0.95


def as_image(pixels) -> np.ndarray:
    """Validate and return ``pixels`` as a float64 image array."""
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be a nonempty 2-D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return img


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle ``[top, top+height) x [left, left+width)``."""

    top: int
    left: int
    height: int
    width: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return (slice(self.top, self.top + self.height), slice(self.left, self.left + self.width))


@dataclass(frozen=True)
class Composite:
    """A problem matrix flattened into one image plus the mask of its missing cell."""

    image: np.ndarray
    mask: np.ndarray
    grid: tuple[int, int]
    cell_size: tuple[int, int]
    missing_cell: tuple[int, int]

    def cell_rect(self, row: int, col: int) -> Rect:
        ch, cw = self.cell_size
        return Rect(row * ch, col * cw, ch, cw)

    @property
    def missing_rect(self) -> Rect:
        return self.cell_rect(*self.missing_cell)


def compose_matrix(
    cells: Sequence[np.ndarray],
    grid: tuple[int, int],
    missing: tuple[int, int],
    fill: float = DEFAULT_FILL,
) -> Composite:
    """Tile ``cells`` row-major into a ``grid``, leaving ``missing`` filled with ``fill``."""
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise BadCellCount(f"grid must be at least 1x1, got {grid}")
    mr, mc = missing
    if not (0 <= mr < rows and 0 <= mc < cols):
        raise IndexOutOfRange(f"missing cell {missing} outside grid {grid}")
    if len(cells) != rows * cols - 1:
        raise BadCellCount(f"expected {rows * cols - 1} cells for grid {grid}, got {len(cells)}")
    cells = [as_image(c) for c in cells]
    shape = cells[0].shape if cells else None
    if any(c.shape != shape for c in cells):
        raise MismatchedCellSizes(f"cell shapes differ: {sorted({c.shape for c in cells})}")
    ch, cw = shape
    image = np.empty((rows * ch, cols * cw), dtype=np.float64)
    mask = np.ones_like(image, dtype=bool)
    it = iter(cells)
    for r in range(rows):
        for c in range(cols):
            block = (slice(r * ch, (r + 1) * ch), slice(c * cw, (c + 1) * cw))
            if (r, c) == (mr, mc):
                image[block] = fill
                mask[block] = False
            else:
                image[block] = next(it)
    return Composite(image, mask, (rows, cols), (ch, cw), (mr, mc))


def extract_region(image: np.ndarray, region: Rect) -> np.ndarray:
    """Return a copy of the pixels inside ``region``."""
    h, w = image.shape
    if (
        region.top < 0
        or region.left < 0
        or region.height < 1
        or region.width < 1
        or region.top + region.height > h
        or region.left + region.width > w
    ):
        raise OutOfBounds(f"{region} does not fit in a {h}x{w} image")
    return image[region.slices].copy()


def content_box(image: np.ndarray, white_threshold: float = DEFAULT_WHITE_THRESHOLD) -> Rect:
    """Bounding box of pixels darker than ``white_threshold``."""
    ink = np.asarray(image) < white_threshold
    if not ink.any():
        raise AllWhite("image has no content pixel")
    rows = np.flatnonzero(ink.any(axis=1))
    cols = np.flatnonzero(ink.any(axis=0))
    return Rect(int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


def union_box(boxes: Sequence[Rect]) -> Rect:
    top = min(b.top for b in boxes)
    left = min(b.left for b in boxes)
    bottom = max(b.top + b.height for b in boxes)
    right = max(b.left + b.width for b in boxes)
    return Rect(top, left, bottom - top, right - left)


def crop_whitespace(image: np.ndarray, white_threshold: float = DEFAULT_WHITE_THRESHOLD) -> np.ndarray:
    """Crop ``image`` to the bounding box of its non-white pixels."""
    image = np.asarray(image, dtype=np.float64)
    return extract_region(image, content_box(image, white_threshold))


def paste_known(generated: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep ``original`` where ``mask`` is known and ``generated`` elsewhere."""
    if not (generated.shape == original.shape == mask.shape):
        raise DimensionMismatch(
            f"shapes differ: generated {generated.shape}, original {original.shape}, mask {mask.shape}"
        )
    return np.where(mask, original, generated)


def resize_nearest(image: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Nearest-neighbour resample to ``new_h`` x ``new_w``."""
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be positive, got {new_h}x{new_w}")
    h, w = image.shape
    # pixel-centre sampling; integer arithmetic keeps exact block duplication
    rows = (2 * np.arange(new_h) + 1) * h // (2 * new_h)
    cols = (2 * np.arange(new_w) + 1) * w // (2 * new_w)
    return image[np.ix_(rows, cols)].copy()


def l2_distance(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise LengthMismatch(f"feature lengths differ: {a.size} vs {b.size}")
    return float(np.linalg.norm(a - b))


def read_image(path) -> np.ndarray:
    """Read a PNG/PGM file as a grayscale image (0 -> 0.0, 255 -> 1.0)."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit grid so that file roundtrips are exact."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def write_image(path, image: np.ndarray) -> None:
    """Write an 8-bit PNG, or binary PGM (P5) when the suffix is ``.pgm``."""
    path = Path(path)
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if path.suffix.lower() == ".pgm":
        h, w = data.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
    else:
        PILImage.fromarray(data, mode="L").save(path)
