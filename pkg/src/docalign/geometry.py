"""Box geometry against a patch grid and the token-to-patch target matrix.

Targets are intersection-over-text-area: entry (i, j) is the fraction of
token i's box that falls inside patch j.  Boxes are clamped to the image
first, so each valid row is an exact probability distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels, origin top-left, y pointing down."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x0 <= self.x1 and self.y0 <= self.y1):
            raise DomainError(f"invalid box {self.as_tuple()}: need x0<=x1 and y0<=y1")

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise DomainError(f"bbox needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def degenerate(self) -> bool:
        return self.area <= 0.0

    def as_tuple(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)

    def translate(self, dx: float = 0.0, dy: float = 0.0) -> "BBox":
        return BBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)


@dataclass(frozen=True)
class PatchGrid:
    """Row-major tiling of an image into square patches."""

    image_width: int
    image_height: int
    patch_size: int

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_width <= 0 or self.image_height <= 0:
            raise DomainError("image and patch sizes must be positive")
        if self.image_width % self.patch_size or self.image_height % self.patch_size:
            raise DomainError(
                f"image {self.image_width}x{self.image_height} is not a multiple "
                f"of patch size {self.patch_size}"
            )

    @property
    def n_rows(self) -> int:
        return self.image_height // self.patch_size

    @property
    def n_cols(self) -> int:
        return self.image_width // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.n_rows * self.n_cols

    # short alias matching the usual N
    N = n_patches

    def row_col(self, j: int) -> tuple:
        if not 0 <= j < self.n_patches:
            raise DomainError(f"patch index {j} out of range [0, {self.n_patches})")
        return divmod(int(j), self.n_cols)


@dataclass
class TargetMatrix:
    values: np.ndarray  # (D, N) float64
    row_valid: np.ndarray  # (D,) bool

    @property
    def context_length(self) -> int:
        return self.values.shape[0]


def patch_bbox(grid: PatchGrid, j: int) -> BBox:
    row, col = grid.row_col(j)
    p = grid.patch_size
    return BBox(col * p, row * p, (col + 1) * p, (row + 1) * p)


def intersection_area(a: BBox, b: BBox) -> float:
    w = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    h = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    return w * h


def clamp_bbox(b: BBox, grid: PatchGrid) -> Optional[BBox]:
    """Clip ``b`` to the image; ``None`` if nothing of positive area remains."""
    x0 = min(max(b.x0, 0.0), grid.image_width)
    x1 = min(max(b.x1, 0.0), grid.image_width)
    y0 = min(max(b.y0, 0.0), grid.image_height)
    y1 = min(max(b.y1, 0.0), grid.image_height)
    out = BBox(float(x0), float(y0), float(x1), float(y1))
    return None if out.degenerate else out


def _axis_overlap(lo: float, hi: float, n: int, p: int) -> np.ndarray:
    edges = np.arange(n + 1, dtype=np.float64) * p
    return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0.0, None)


def target_row(grid: PatchGrid, text_box: BBox) -> Optional[np.ndarray]:
    """Fraction of ``text_box`` covered by each patch, or ``None`` if degenerate.

    The box must already be clamped to the image.  Overlap is separable, so the
    row is the outer product of per-axis overlaps divided by the box area.
    """
    area = text_box.area
    if area <= 0.0:
        return None
    ox = _axis_overlap(text_box.x0, text_box.x1, grid.n_cols, grid.patch_size)
    oy = _axis_overlap(text_box.y0, text_box.y1, grid.n_rows, grid.patch_size)
    return (np.outer(oy, ox) / area).ravel()


def build_target_matrix(
    grid: PatchGrid,
    token_boxes: Sequence[Optional[BBox]],
    context_length: int,
) -> TargetMatrix:
    if len(token_boxes) > context_length:
        raise DomainError(f"{len(token_boxes)} token boxes exceed context length {context_length}")
    values = np.zeros((context_length, grid.n_patches), dtype=np.float64)
    valid = np.zeros(context_length, dtype=bool)
    for i, box in enumerate(token_boxes):
        if box is None:
            continue
        clamped = clamp_bbox(box, grid)
        if clamped is None:
            continue
        row = target_row(grid, clamped)
        if row is not None:
            values[i] = row
            valid[i] = True
    return TargetMatrix(values, valid)
