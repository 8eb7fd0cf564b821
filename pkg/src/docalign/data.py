"""Page manifests, reading order, token/box alignment, whitespace and mask sampling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, DomainError
from .geometry import BBox, PatchGrid, clamp_bbox
from .tokenizer import WordTokenizer

logger = logging.getLogger(__name__)

DEFAULT_MASK_RATIO = 0.6
DEFAULT_WHITESPACE_THRESHOLD = 0.95
DEFAULT_LINE_TOLERANCE = 0.5


@dataclass(frozen=True)
class WordRecord:
    text: str
    bbox: BBox

    def to_json(self) -> dict:
        return {"text": self.text, "bbox": list(self.bbox.as_tuple())}


@dataclass
class PageRecord:
    image_ref: object  # path, or an in-memory H x W x C array
    width: int
    height: int
    words: List[WordRecord] = field(default_factory=list)

    def load_image(self) -> np.ndarray:
        """Return the raster as float64 H x W x C in [0, 1]."""
        if isinstance(self.image_ref, np.ndarray):
            arr = np.asarray(self.image_ref, dtype=np.float64)
            if arr.ndim == 2:
                arr = arr[:, :, None]
        else:
            try:
                arr = load_raster(self.image_ref)
            except OSError as exc:
                raise DataError(f"cannot read image {self.image_ref}: {exc}") from exc
        if arr.shape[:2] != (self.height, self.width):
            raise DataError(
                f"image {self.image_ref} is {arr.shape[1]}x{arr.shape[0]}, "
                f"manifest says {self.width}x{self.height}"
            )
        return arr

    def to_json(self, image_path: Optional[str] = None) -> dict:
        return {
            "image_path": image_path if image_path is not None else str(self.image_ref),
            "width": self.width,
            "height": self.height,
            "words": [w.to_json() for w in self.words],
        }


@dataclass
class TokenAlignment:
    token_ids: np.ndarray  # (L_T,) int64
    token_boxes: List[Optional[BBox]]
    valid: np.ndarray  # (L_T,) bool
    word_index: np.ndarray  # (L_T,) int64, -1 for special/padding tokens

    @property
    def context_length(self) -> int:
        return len(self.token_ids)


@dataclass
class MaskPlan:
    masked: np.ndarray  # (N,) bool
    whitespace: np.ndarray  # (N,) bool
    ratio: float

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())


def load_raster(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_raster(path, image: np.ndarray) -> None:
    """Write an H x W x C raster in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def parse_page(obj: dict, base_dir: Optional[Path] = None) -> PageRecord:
    """Build a PageRecord from one decoded manifest object.

    Words with empty text or a non-positive box area are dropped.
    """
    try:
        width, height = int(obj["width"]), int(obj["height"])
        image_path = obj["image_path"]
        raw_words = obj["words"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"missing or invalid field: {exc}") from exc
    if width <= 0 or height <= 0:
        raise DataError(f"non-positive page size {width}x{height}")
    if not isinstance(image_path, str) or not isinstance(raw_words, list):
        raise DataError("image_path must be a string and words a list")
    path = Path(image_path)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    words = []
    for w in raw_words:
        try:
            text = str(w["text"]).strip()
            box = [float(v) for v in w["bbox"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad word entry {w!r}") from exc
        if len(box) != 4 or not all(math.isfinite(v) for v in box):
            raise DataError(f"bad bbox {w.get('bbox')!r}")
        if not text or box[2] <= box[0] or box[3] <= box[1]:
            continue
        words.append(WordRecord(text, BBox(*box)))
    return PageRecord(path, width, height, words)


class ManifestStream:
    """Iterates the pages of a JSON-lines manifest.

    Malformed lines are skipped; ``n_malformed`` and ``warnings`` record them.
    """

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.is_file():
            raise FileNotFoundError(f"manifest not found: {self.path}")
        self.n_malformed = 0
        self.warnings: List[str] = []

    def __iter__(self) -> Iterator[PageRecord]:
        self.n_malformed = 0
        self.warnings = []
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    if not isinstance(obj, dict):
                        raise DataError("line is not a JSON object")
                    page = parse_page(obj, self.path.parent)
                except (json.JSONDecodeError, DataError) as exc:
                    self.n_malformed += 1
                    msg = f"{self.path}:{lineno}: skipped malformed line ({exc})"
                    self.warnings.append(msg)
                    logger.warning(msg)
                    continue
                yield page


def load_manifest(path) -> ManifestStream:
    return ManifestStream(path)


def read_pages(path) -> List[PageRecord]:
    return list(load_manifest(path))


def reading_order(
    words: Sequence[WordRecord], line_tolerance: float = DEFAULT_LINE_TOLERANCE
) -> List[WordRecord]:
    """Order words top-to-bottom by line, then left-to-right.

    A word joins the current line when its vertical centre lies within
    ``line_tolerance`` times the median word height of the line's first word.
    """
    if not words:
        return []
    words = list(words)
    heights = np.array([w.bbox.height for w in words], dtype=np.float64)
    tol = line_tolerance * float(np.median(heights))
    centres = np.array([(w.bbox.y0 + w.bbox.y1) / 2.0 for w in words])
    order = np.argsort(centres, kind="stable")

    lines: List[List[int]] = []
    anchor = None
    for idx in order:
        if anchor is None or centres[idx] - anchor > tol:
            lines.append([])
            anchor = centres[idx]
        lines[-1].append(int(idx))

    out = []
    for line in lines:
        line.sort(key=lambda i: (words[i].bbox.x0, i))
        out.extend(words[i] for i in line)
    return out


def _split_box(box: BBox, span, n_chars: int) -> BBox:
    if n_chars <= 0:
        return box
    a, b = span
    return BBox(
        box.x0 + box.width * a / n_chars, box.y0, box.x0 + box.width * b / n_chars, box.y1
    )


def tokenize_with_boxes(
    words: Sequence[WordRecord],
    tokenizer: WordTokenizer,
    context_length: int,
    grid: Optional[PatchGrid] = None,
    box_mode: str = "inherit",
) -> TokenAlignment:
    """Tokenize words (already in reading order) into a fixed-length sequence.

    Layout is ``[BOS] tokens... [EOS] [PAD]...``; content is truncated so the
    end marker always fits.  With ``box_mode="inherit"`` every subword carries
    its word's box; ``"split"`` divides the box horizontally by character span.
    When ``grid`` is given boxes are clamped to the image and tokens whose box
    vanishes are marked invalid.
    """
    if context_length < 2:
        raise DomainError("context length must leave room for [BOS] and [EOS]")
    if box_mode not in ("inherit", "split"):
        raise DomainError(f"unknown box_mode {box_mode!r}")
    budget = context_length - 2

    ids = [tokenizer.bos_id]
    boxes: List[Optional[BBox]] = [None]
    widx = [-1]
    encoded = tokenizer.encode_words([w.text for w in words])
    flat = [(k, t, span) for k, pieces in enumerate(encoded) for t, span in pieces][:budget]
    for k, tok_id, span in flat:
        box = words[k].bbox
        if box_mode == "split":
            box = _split_box(box, span, len(words[k].text))
        if grid is not None:
            box = clamp_bbox(box, grid)
        ids.append(tok_id)
        boxes.append(box)
        widx.append(k)
    ids.append(tokenizer.eos_id)
    boxes.append(None)
    widx.append(-1)

    n_pad = context_length - len(ids)
    ids.extend([tokenizer.pad_id] * n_pad)
    boxes.extend([None] * n_pad)
    widx.extend([-1] * n_pad)
    valid = np.array([b is not None and not b.degenerate for b in boxes], dtype=bool)
    return TokenAlignment(
        np.asarray(ids, dtype=np.int64), boxes, valid, np.asarray(widx, dtype=np.int64)
    )


def whitespace_mask(
    image: np.ndarray, grid: PatchGrid, brightness_threshold: float = DEFAULT_WHITESPACE_THRESHOLD
) -> np.ndarray:
    """True for patches whose darkest pixel (channel mean) is at least the threshold."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[:2] != (grid.image_height, grid.image_width):
        raise DomainError(
            f"image {img.shape[1]}x{img.shape[0]} does not match grid "
            f"{grid.image_width}x{grid.image_height}"
        )
    p = grid.patch_size
    lum = img.mean(axis=2).reshape(grid.n_rows, p, grid.n_cols, p)
    return (lum.min(axis=(1, 3)) >= brightness_threshold).ravel()


def mask_count(n_eligible: int, ratio: float) -> int:
    """round(ratio * n_eligible), halves rounded up."""
    return int(math.floor(ratio * n_eligible + 0.5))


def sample_mask(whitespace: np.ndarray, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Mask round(ratio * eligible) non-whitespace patches uniformly without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise DomainError(f"mask ratio must lie in [0, 1), got {ratio}")
    whitespace = np.asarray(whitespace, dtype=bool)
    eligible = np.flatnonzero(~whitespace)
    masked = np.zeros(whitespace.shape[0], dtype=bool)
    k = mask_count(len(eligible), ratio)
    if k:
        masked[rng.choice(eligible, size=k, replace=False)] = True
    return MaskPlan(masked, whitespace.copy(), ratio)


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    chans = [
        np.asarray(
            Image.fromarray(image[:, :, c].astype(np.float32), mode="F").resize(
                (size, size), Image.BILINEAR
            ),
            dtype=np.float64,
        )
        for c in range(image.shape[2])
    ]
    return np.clip(np.stack(chans, axis=2), 0.0, 1.0)


def _transform_words(words, dx, dy, scale) -> List[WordRecord]:
    return [
        WordRecord(
            w.text,
            BBox(
                (w.bbox.x0 + dx) * scale,
                (w.bbox.y0 + dy) * scale,
                (w.bbox.x1 + dx) * scale,
                (w.bbox.y1 + dy) * scale,
            ),
        )
        for w in words
    ]


def fit_page(
    image: np.ndarray,
    words: Sequence[WordRecord],
    size: int,
    rng: Optional[np.random.Generator] = None,
    pad_fraction: float = 0.5,
    min_crop_scale: float = 0.6,
):
    """Bring a page to ``size`` x ``size``, transforming word boxes alongside.

    Without ``rng`` the page is padded to a square (white fill) and resized.
    With ``rng`` it is padded with probability ``pad_fraction``, otherwise a
    random square crop of side in ``[min_crop_scale, 1] * min(H, W)`` is taken
    and resized.  Boxes are not clamped here.
    """
    h, w = image.shape[:2]
    if rng is None or rng.random() < pad_fraction:
        side = max(h, w)
        canvas = np.ones((side, side, image.shape[2]), dtype=np.float64)
        canvas[:h, :w] = image
        return _resize(canvas, size), _transform_words(words, 0.0, 0.0, size / side)
    side = int(round(min(h, w) * rng.uniform(min_crop_scale, 1.0)))
    side = max(side, 1)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    crop = image[top : top + side, left : left + side]
    return _resize(crop, size), _transform_words(words, -left, -top, size / side)


def shift_page(image: np.ndarray, words: Sequence[WordRecord], dx: int, dy: int):
    """Translate the page by whole pixels (white fill); boxes move with it."""
    h, w = image.shape[:2]
    out = np.ones_like(image)
    src_y, dst_y = slice(max(0, -dy), min(h, h - dy)), slice(max(0, dy), min(h, h + dy))
    src_x, dst_x = slice(max(0, -dx), min(w, w - dx)), slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = image[src_y, src_x]
    return out, _transform_words(words, float(dx), float(dy), 1.0)
