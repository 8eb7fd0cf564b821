"""Synthetic document pages rendered from a built-in bitmap font.

Every word's box is the tight bounding box of its own ink, so the word
geometry is exact; there is no OCR step and no OCR noise.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import WordRecord, save_raster
from .errors import DomainError
from .geometry import BBox
from .tokenizer import WordTokenizer

logger = logging.getLogger(__name__)

GLYPH_W, GLYPH_H = 3, 5

# 3x5 monospaced glyphs, top row first
_FONT_ROWS = {
    "a": ".#. #.# ### #.# #.#", "b": "##. #.# ##. #.# ##.", "c": ".## #.. #.. #.. .##",
    "d": "##. #.# #.# #.# ##.", "e": "### #.. ##. #.. ###", "f": "### #.. ##. #.. #..",
    "g": ".## #.. #.# #.# .##", "h": "#.# #.# ### #.# #.#", "i": "### .#. .#. .#. ###",
    "j": "..# ..# ..# #.# .#.", "k": "#.# #.# ##. #.# #.#", "l": "#.. #.. #.. #.. ###",
    "m": "#.# ### ### #.# #.#", "n": "##. #.# #.# #.# #.#", "o": ".#. #.# #.# #.# .#.",
    "p": "##. #.# ##. #.. #..", "q": ".#. #.# #.# ##. .##", "r": "##. #.# ##. #.# #.#",
    "s": ".## #.. .#. ..# ##.", "t": "### .#. .#. .#. .#.", "u": "#.# #.# #.# #.# ###",
    "v": "#.# #.# #.# #.# .#.", "w": "#.# #.# ### ### #.#", "x": "#.# #.# .#. #.# #.#",
    "y": "#.# #.# .#. .#. .#.", "z": "### ..# .#. #.. ###",
    "0": "### #.# #.# #.# ###", "1": ".#. ##. .#. .#. ###", "2": "##. ..# .#. #.. ###",
    "3": "##. ..# .#. ..# ##.", "4": "#.# #.# ### ..# ..#", "5": "### #.. ##. ..# ##.",
    "6": ".## #.. ### #.# ###", "7": "### ..# .#. .#. .#.", "8": "### #.# ### #.# ###",
    "9": "### #.# ### ..# ##.",
}
GLYPHS: Dict[str, np.ndarray] = {
    ch: np.array([[c == "#" for c in row] for row in rows.split()], dtype=bool)
    for ch, rows in _FONT_ROWS.items()
}

DEFAULT_VOCAB = (
    "add age air all and any arm art ask bad bag bar bed big box boy bus buy can cap car "
    "cat cup cut day dog dry ear eat egg end eye far fat few fit fix fly fun gas get god "
    "gun hat hot ice ink job key kid law leg lie lot low map men mix net new oil old pay "
    "pen pot put raw red row run sea set sky son sun tax tea ten tie top toy two use war "
    "way wet win yes"
).split()

ELEMENT_KINDS = ("paragraph", "title", "table", "blank")


def glyph_advance(scale: int) -> int:
    return (GLYPH_W + 1) * scale


def word_width(text: str, scale: int) -> int:
    return len(text) * glyph_advance(scale) - scale


@dataclass
class PageSpec:
    width: int = 64
    height: int = 64
    n_columns: int = 1
    font_size_range: Tuple[int, int] = (5, 10)  # glyph heights in pixels
    vocab: Sequence[str] = field(default_factory=lambda: list(DEFAULT_VOCAB))
    seed: int = 0
    element_mix: Dict[str, float] = field(
        default_factory=lambda: {"paragraph": 0.5, "title": 0.2, "table": 0.15, "blank": 0.15}
    )
    margin: int = 2
    gutter: int = 4
    patch_size: int = 8

    def __post_init__(self):
        self.font_size_range = tuple(int(v) for v in self.font_size_range)
        self.vocab = [w for w in self.vocab]
        self.element_mix = {k: float(v) for k, v in self.element_mix.items()}

    @property
    def scales(self) -> Tuple[int, int]:
        lo, hi = self.font_size_range
        return max(1, lo // GLYPH_H), max(1, hi // GLYPH_H)

    @property
    def column_width(self) -> int:
        usable = self.width - 2 * self.margin - (self.n_columns - 1) * self.gutter
        return usable // self.n_columns

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise DomainError("page size must be positive")
        if self.width % self.patch_size or self.height % self.patch_size:
            raise DomainError(f"page size must be a multiple of patch size {self.patch_size}")
        unknown = set(self.element_mix) - set(ELEMENT_KINDS)
        if unknown:
            raise DomainError(f"unknown element kinds {sorted(unknown)}")
        probs = np.array(list(self.element_mix.values()))
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise DomainError("element_mix probabilities must be nonnegative and sum to 1")
        lo, hi = self.font_size_range
        if lo < GLYPH_H or hi < lo:
            raise DomainError(f"font_size_range must satisfy {GLYPH_H} <= lo <= hi")
        if not self.vocab:
            raise DomainError("vocab is empty")
        bad = {c for w in self.vocab for c in w if c not in GLYPHS}
        if bad:
            raise DomainError(f"vocab uses characters without glyphs: {sorted(bad)}")
        longest = max(word_width(w, self.scales[1]) for w in self.vocab)
        if longest > self.column_width:
            raise DomainError(
                f"longest word at the largest font is {longest}px, wider than the "
                f"{self.column_width}px column"
            )


class _Canvas:
    def __init__(self, width: int, height: int):
        self.ink = np.zeros((height, width), dtype=bool)
        self.words: List[WordRecord] = []

    def draw_word(self, text: str, x: int, y: int, scale: int) -> None:
        stamp = np.zeros((GLYPH_H * scale, word_width(text, scale)), dtype=bool)
        for k, ch in enumerate(text):
            g = np.kron(GLYPHS[ch], np.ones((scale, scale), dtype=bool))
            x0 = k * glyph_advance(scale)
            stamp[:, x0 : x0 + GLYPH_W * scale] = g
        h, w = stamp.shape
        self.ink[y : y + h, x : x + w] |= stamp
        ys, xs = np.nonzero(stamp)
        box = BBox(x + xs.min(), y + ys.min(), x + xs.max() + 1, y + ys.max() + 1)
        self.words.append(WordRecord(text, box))

    def hline(self, x0: int, x1: int, y: int) -> None:
        self.ink[y, x0:x1] = True


def _place_line(canvas, rng, vocab, x0, x1, y, scale, max_words) -> int:
    """Draw words left to right on one line; returns the number placed."""
    x = x0
    placed = 0
    space = glyph_advance(scale)
    while placed < max_words:
        text = vocab[int(rng.integers(len(vocab)))]
        w = word_width(text, scale)
        if x + w > x1:
            break
        canvas.draw_word(text, x, y, scale)
        x += w + space
        placed += 1
    return placed


def render_page(spec: PageSpec, rng: Optional[np.random.Generator] = None):
    """Render one page.

    Returns ``(raster, words, ink_map)``: a float64 H x W x 1 raster in [0, 1]
    with white background and black ink, the word records in drawing order,
    and the boolean ink map.  Elements that would overflow the page bottom
    are not placed.
    """
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    canvas = _Canvas(spec.width, spec.height)
    kinds = list(spec.element_mix)
    probs = np.array([spec.element_mix[k] for k in kinds])
    lo_s, hi_s = spec.scales
    bottom = spec.height - spec.margin
    col_w = spec.column_width

    for col in range(spec.n_columns):
        left = spec.margin + col * (col_w + spec.gutter)
        right = left + col_w
        y = spec.margin
        while True:
            kind = kinds[int(rng.choice(len(kinds), p=probs))]
            if kind == "blank":
                y += int(rng.integers(4, 13))
            elif kind == "title":
                scale = hi_s
                if y + GLYPH_H * scale > bottom:
                    break
                _place_line(canvas, rng, spec.vocab, left, right, y, scale, int(rng.integers(1, 3)))
                y += GLYPH_H * scale + 2 * scale + 1
            elif kind == "paragraph":
                scale = int(rng.integers(lo_s, hi_s + 1)) if hi_s > lo_s and rng.random() < 0.2 else lo_s
                pitch = GLYPH_H * scale + 2 * scale + 1
                n_lines = int(rng.integers(1, 4))
                for _ in range(n_lines):
                    if y + GLYPH_H * scale > bottom:
                        break
                    _place_line(canvas, rng, spec.vocab, left, right, y, scale, 99)
                    y += pitch
                y += 1
            else:  # table
                scale = lo_s
                row_h = GLYPH_H * scale + 2 * scale + 2
                n_rows = int(rng.integers(2, 4))
                if y + n_rows * row_h > bottom:
                    break
                n_cells = 2 if col_w < 40 else 3
                cell_w = col_w // n_cells
                for r in range(n_rows):
                    for c in range(n_cells):
                        cx = left + c * cell_w
                        _place_line(canvas, rng, spec.vocab, cx, cx + cell_w - 1, y, scale, 1)
                    if r == 0:
                        canvas.hline(left, right, y + GLYPH_H * scale + scale)
                    y += row_h
            if y >= bottom:
                break

    raster = np.where(canvas.ink, 0.0, 1.0)[:, :, None]
    return raster, canvas.words, canvas.ink


def page_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def _render_indexed(args):
    spec, index, out_dir = args
    seed = page_seed(spec.seed, index)
    raster, words, _ = render_page(replace(spec, seed=seed), np.random.default_rng(seed))
    name = f"images/page_{index:05d}.png"
    save_raster(Path(out_dir) / name, raster)
    record = {
        "image_path": name,
        "width": spec.width,
        "height": spec.height,
        "words": [w.to_json() for w in words],
    }
    return record, {"page": index, "image_path": name, "seed": seed, "n_words": len(words)}


def generate_corpus(
    spec_template: PageSpec,
    n_pages: int,
    out_dir,
    workers: int = 1,
    tokenizer_vocab_size: int = 512,
) -> Path:
    """Render ``n_pages`` pages into ``out_dir``.

    Writes ``images/*.png``, ``manifest.jsonl`` (one page per line),
    ``generator_log.jsonl`` (per-page word counts) and ``tokenizer.json``
    trained on the page vocabulary.  Returns the manifest path.
    """
    spec_template.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    jobs = [(spec_template, i, str(out)) for i in range(n_pages)]
    if workers > 1 and n_pages > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_render_indexed, jobs, chunksize=16))
    else:
        results = [_render_indexed(j) for j in jobs]

    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for record, _ in results:
            fh.write(json.dumps(record) + "\n")
    with open(out / "generator_log.jsonl", "w", encoding="utf-8") as fh:
        for _, entry in results:
            fh.write(json.dumps(entry) + "\n")
    WordTokenizer.train(spec_template.vocab, vocab_size=tokenizer_vocab_size).save(
        out / "tokenizer.json"
    )
    logger.info("wrote %d pages to %s", n_pages, out)
    return manifest
