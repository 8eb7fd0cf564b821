"""Post-training analysis: retrieval probe, heatmaps, target dumps, encoder export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt_io
from .config import DataConfig, TrainConfig
from .data import PageRecord, read_pages, sample_mask
from .errors import CheckpointIntegrityError, DomainError, QueryNotFoundError
from .geometry import intersection_area, patch_bbox
from .models import DocAlignModel, ImageEncoder, ModelConfig
from .objectives import normalize_patches, similarity_logits
from .tokenizer import WordTokenizer
from .train import Example, PageCorpus, build_example

FONT_BUCKETS = ((0.0, 6.0, "small"), (6.0, 12.0, "medium"), (12.0, float("inf"), "large"))


@dataclass
class LoadedModel:
    model: DocAlignModel
    tokenizer: WordTokenizer
    config: TrainConfig
    step: int


def load_model(path) -> LoadedModel:
    payload = ckpt_io.load_checkpoint(path)
    if payload["kind"] != "full":
        raise CheckpointIntegrityError(f"{path} is an encoder-only checkpoint")
    try:
        cfg = TrainConfig.from_dict(payload["config"])
        tokenizer = WordTokenizer.from_str(payload["tokenizer"])
        model = DocAlignModel(cfg.model, pad_id=payload.get("pad_id", tokenizer.pad_id))
        if cfg.precision == "float64":
            model = model.double()
        model.load_state_dict(payload["state_dict"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointIntegrityError(f"checkpoint {path} is inconsistent: {exc}") from exc
    model.eval()
    return LoadedModel(model, tokenizer, cfg, int(payload["step"]))


def load_image_encoder(path) -> ImageEncoder:
    """Image encoder from either a full or an encoder-only checkpoint."""
    payload = ckpt_io.load_checkpoint(path)
    try:
        if payload["kind"] == "encoder":
            cfg = ModelConfig.from_dict(payload["model_config"])
            state = payload["state_dict"]
            dtype = torch.float64 if payload.get("precision") == "float64" else torch.float32
        else:
            tcfg = TrainConfig.from_dict(payload["config"])
            cfg = tcfg.model
            prefix = "image_encoder."
            state = {k[len(prefix):]: v for k, v in payload["state_dict"].items() if k.startswith(prefix)}
            dtype = torch.float64 if tcfg.precision == "float64" else torch.float32
        enc = ImageEncoder(cfg).to(dtype)
        enc.load_state_dict(state)
    except (KeyError, RuntimeError) as exc:
        raise CheckpointIntegrityError(f"checkpoint {path} is inconsistent: {exc}") from exc
    enc.eval()
    return enc


def export_encoder(checkpoint, out_path) -> Path:
    """Write an image-encoder-only checkpoint (no text encoder, decoder or optimizer)."""
    payload = ckpt_io.load_checkpoint(checkpoint)
    if payload["kind"] == "encoder":
        ckpt_io.save_checkpoint({k: v for k, v in payload.items() if k != "kind"}, out_path, "encoder")
        return Path(out_path)
    try:
        cfg = TrainConfig.from_dict(payload["config"])
        prefix = "image_encoder."
        state = {k[len(prefix):]: v for k, v in payload["state_dict"].items() if k.startswith(prefix)}
    except KeyError as exc:
        raise CheckpointIntegrityError(f"checkpoint {checkpoint} is inconsistent: {exc}") from exc
    out = {
        "model_config": cfg.model.to_dict(),
        "precision": cfg.precision,
        "state_dict": state,
        "step": payload["step"],
    }
    ckpt_io.save_checkpoint(out, out_path, kind="encoder")
    return Path(out_path)


def _eval_data(data_cfg: DataConfig) -> DataConfig:
    """Evaluation always sees the page as stored: no augmentation or shifts."""
    return replace(data_cfg, augment=False, max_shift=0)


def _as_loaded(model_or_path) -> LoadedModel:
    return model_or_path if isinstance(model_or_path, LoadedModel) else load_model(model_or_path)


@torch.no_grad()
def page_similarity(loaded: LoadedModel, ex: Example) -> np.ndarray:
    """Normalized dot-product similarity (L x N) of every token with every patch."""
    model = loaded.model
    dtype = next(model.parameters()).dtype
    patches = torch.from_numpy(ex.patches).to(dtype)[None]
    _, image_emb = model.encode_image(patches)
    text_emb = model.encode_text(torch.from_numpy(ex.token_ids)[None])
    sim = similarity_logits(text_emb[0], image_emb[0], torch.tensor(0.0), normalize=True)
    return sim.numpy()


def retrieval_hits(similarity: np.ndarray, targets: np.ndarray, row_valid: np.ndarray) -> np.ndarray:
    """Hit per valid token: its most similar patch overlaps the token's box.

    A target entry is positive exactly when the patch and the clamped token
    box intersect with positive area.
    """
    rows = np.flatnonzero(row_valid)
    best = np.argmax(similarity[rows], axis=1)
    return targets[rows, best] > 0


def chance_rate(targets: np.ndarray, row_valid: np.ndarray) -> np.ndarray:
    """Per valid token, the hit probability of a uniformly random patch."""
    rows = np.flatnonzero(row_valid)
    return (targets[rows] > 0).mean(axis=1)


@dataclass
class ProbeReport:
    hit_rate: float
    chance_baseline: float
    n_tokens: int
    n_pages: int
    per_bucket: Dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "hit_rate": self.hit_rate,
            "chance_baseline": self.chance_baseline,
            "n_tokens": self.n_tokens,
            "n_pages": self.n_pages,
            "per_bucket": self.per_bucket,
        }


def _bucket(height: float) -> str:
    for lo, hi, name in FONT_BUCKETS:
        if lo <= height < hi:
            return name
    return FONT_BUCKETS[-1][2]


def _corpus_for(loaded: LoadedModel, manifest, n_pages) -> PageCorpus:
    data_cfg = _eval_data(loaded.config.data)
    return PageCorpus.from_manifest(manifest, loaded.tokenizer, loaded.config.model, data_cfg, n_pages)


def retrieval_probe(checkpoint, manifest, n_pages: Optional[int] = None, similarity_fn=None) -> ProbeReport:
    """Token-to-patch retrieval hit rate over the first ``n_pages`` pages.

    ``similarity_fn(example) -> (L, N)`` replaces the model similarities,
    e.g. to inject oracle scores.
    """
    loaded = _as_loaded(checkpoint)
    corpus = _corpus_for(loaded, manifest, n_pages)
    all_hits, all_chance, heights = [], [], []
    for i in range(len(corpus)):
        ex = corpus.example(i)
        sim = similarity_fn(ex) if similarity_fn else page_similarity(loaded, ex)
        all_hits.append(retrieval_hits(sim, ex.targets, ex.row_valid))
        all_chance.append(chance_rate(ex.targets, ex.row_valid))
        rows = np.flatnonzero(ex.row_valid)
        heights.extend(ex.words[ex.word_index[r]].bbox.height for r in rows)
    hits = np.concatenate(all_hits) if all_hits else np.zeros(0, bool)
    chance = np.concatenate(all_chance) if all_chance else np.zeros(0)
    per_bucket = {}
    names = np.array([_bucket(h) for h in heights])
    for _, _, name in FONT_BUCKETS:
        sel = names == name
        if sel.any():
            per_bucket[name] = {
                "hit_rate": float(hits[sel].mean()),
                "chance_baseline": float(chance[sel].mean()),
                "n_tokens": int(sel.sum()),
            }
    return ProbeReport(
        hit_rate=float(hits.mean()) if hits.size else float("nan"),
        chance_baseline=float(chance.mean()) if chance.size else float("nan"),
        n_tokens=int(hits.size),
        n_pages=len(corpus),
        per_bucket=per_bucket,
    )


@torch.no_grad()
def reconstruction_probe(checkpoint, manifest, n_pages: Optional[int] = None, mask_ratio=None, seed: int = 0) -> float:
    """Masked-patch MSE in normalized pixel space with seeded masks per page."""
    loaded = _as_loaded(checkpoint)
    model = loaded.model
    ratio = loaded.config.mask_ratio if mask_ratio is None else mask_ratio
    if ratio <= 0:
        raise DomainError("reconstruction probe needs a positive mask ratio")
    corpus = _corpus_for(loaded, manifest, n_pages)
    dtype = next(model.parameters()).dtype
    sq_err, count = 0.0, 0
    for i in range(len(corpus)):
        ex = corpus.example(i)
        plan = sample_mask(ex.whitespace, ratio, np.random.default_rng([seed, i]))
        if plan.n_masked == 0:
            continue
        patches = torch.from_numpy(ex.patches).to(dtype)[None]
        mask = torch.from_numpy(plan.masked)[None]
        hidden, _ = model.encode_image(patches, mask)
        pred = model.decode_pixels(hidden)[0].double()
        target = normalize_patches(patches[0])
        err = ((pred - target) ** 2)[mask[0]]
        sq_err += float(err.sum())
        count += err.numel()
    return sq_err / count if count else float("nan")


def _query_rows(ex: Example, tokenizer, query: str, average_subwords: bool) -> List[int]:
    for k, w in enumerate(ex.words):
        if w.text == query:
            rows = [r for r in np.flatnonzero(ex.word_index == k) if ex.row_valid[r]]
            if rows:
                return rows if average_subwords else rows[:1]
    raise QueryNotFoundError(query, [w.text for w in ex.words])


def heatmap_grid(loaded: LoadedModel, ex: Example, query: str, average_subwords: bool = False):
    """Min-max normalized (n_rows, n_cols) similarity of the query token to each patch.

    Also returns the query word's box in model pixels.
    """
    rows = _query_rows(ex, loaded.tokenizer, query, average_subwords)
    sim = page_similarity(loaded, ex)[rows].mean(axis=0)
    lo, hi = sim.min(), sim.max()
    norm = (sim - lo) / (hi - lo) if hi > lo else np.zeros_like(sim)
    grid = loaded.config.model.grid
    word = ex.words[ex.word_index[rows[0]]]
    return norm.reshape(grid.n_rows, grid.n_cols), word.bbox


def _overlay(image: np.ndarray, heat: np.ndarray, patch_size: int) -> Image.Image:
    gray = image.mean(axis=2)
    up = np.kron(heat, np.ones((patch_size, patch_size)))
    rgb = np.stack([gray, gray, gray], axis=2) * 0.5
    rgb[:, :, 0] += 0.5 * up
    rgb[:, :, 2] += 0.5 * (1.0 - up) * 0.3
    return Image.fromarray(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8))


def heatmap_localization(checkpoint, manifest, n_pages: Optional[int] = None) -> dict:
    """Fraction of queries whose heatmap argmax patch overlaps the query word's box.

    Every distinct word of each page is queried once (first occurrence).
    """
    loaded = _as_loaded(checkpoint)
    corpus = _corpus_for(loaded, manifest, n_pages)
    grid = loaded.config.model.grid
    hits = []
    for i in range(len(corpus)):
        ex = corpus.example(i)
        for text in dict.fromkeys(w.text for w in ex.words):
            try:
                heat, box = heatmap_grid(loaded, ex, text)
            except QueryNotFoundError:  # word truncated out of the context
                continue
            j = int(np.argmax(heat))
            hits.append(intersection_area(patch_bbox(grid, j), box) > 0)
    return {"hit_rate": float(np.mean(hits)) if hits else float("nan"), "n_queries": len(hits)}


def emit_heatmap(
    checkpoint,
    page: PageRecord,
    query_word: str,
    out_path,
    average_subwords: bool = False,
) -> np.ndarray:
    """Write ``<out>.csv`` (numeric grid) and ``<out>.png`` (overlay); return the grid."""
    loaded = _as_loaded(checkpoint)
    data_cfg = _eval_data(loaded.config.data)
    ex = build_example(page.load_image(), page.words, loaded.tokenizer, loaded.config.model, data_cfg)
    grid, _ = heatmap_grid(loaded, ex, query_word, average_subwords)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        csv.writer(fh).writerows(grid.tolist())
    _overlay(ex.image, grid, loaded.config.model.patch_size).save(out.with_suffix(".png"))
    return grid


def dump_targets(
    manifest,
    page_index: int,
    out_path,
    tokenizer: WordTokenizer,
    model_cfg: ModelConfig,
    data_cfg: Optional[DataConfig] = None,
) -> dict:
    """Write the target matrix of one page as JSON and return the written object."""
    pages = read_pages(manifest)
    if not 0 <= page_index < len(pages):
        raise DomainError(f"page index {page_index} out of range [0, {len(pages)})")
    data_cfg = _eval_data(data_cfg or DataConfig())
    page = pages[page_index]
    ex = build_example(page.load_image(), page.words, tokenizer, model_cfg, data_cfg)
    grid = model_cfg.grid
    obj = {
        "format": "docalign-targets",
        "version": 1,
        "shape": [int(ex.targets.shape[0]), int(ex.targets.shape[1])],
        "grid": {"n_rows": grid.n_rows, "n_cols": grid.n_cols, "patch_size": grid.patch_size},
        "tokens": [tokenizer.id_to_token(t) for t in ex.token_ids],
        "row_valid": ex.row_valid.tolist(),
        "values": ex.targets.tolist(),
    }
    Path(out_path).write_text(json.dumps(obj), encoding="utf-8")
    return obj


def read_targets(path) -> dict:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    obj["values"] = np.asarray(obj["values"], dtype=np.float64).reshape(obj["shape"])
    obj["row_valid"] = np.asarray(obj["row_valid"], dtype=bool)
    return obj
