"""Pre-training loop.

Each step's batch (page choice, masks, augmentation) is drawn from an rng
seeded with ``(seed, step)``, so a resumed run sees exactly the batches an
uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import TrainConfig, dump_config
from .data import (
    PageRecord,
    WordRecord,
    fit_page,
    shift_page,
    read_pages,
    reading_order,
    sample_mask,
    tokenize_with_boxes,
    whitespace_mask,
)
from .errors import ConfigError, DataError, NumericError
from .geometry import build_target_matrix
from .models import DocAlignModel, ModelConfig, patchify
from .objectives import combined_loss, reconstruction_loss, text_to_patch_loss
from .tokenizer import WordTokenizer

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "l_tp", "l_r", "total", "lambda_scale", "lr", "wall_ms")


@dataclass
class Example:
    patches: np.ndarray  # (N, P*P*C) float32
    whitespace: np.ndarray  # (N,) bool
    token_ids: np.ndarray  # (L,) int64
    targets: np.ndarray  # (L, N) float64
    row_valid: np.ndarray  # (L,) bool
    words: List[WordRecord]  # reading order, in model pixel frame
    word_index: np.ndarray  # (L,) source word per token, -1 if none
    image: np.ndarray  # (H, W, C) float64 at model resolution


def _match_channels(image: np.ndarray, channels: int) -> np.ndarray:
    if image.shape[2] == channels:
        return image
    if channels == 1:
        return image.mean(axis=2, keepdims=True)
    return np.repeat(image[:, :, :1], channels, axis=2)


def build_example(image, words, tokenizer, model_cfg: ModelConfig, data_cfg, rng=None) -> Example:
    """Turn one page into model inputs and alignment targets."""
    aug_rng = rng if data_cfg.augment else None
    rng = rng if data_cfg.randomized else None
    image, words = fit_page(
        image, words, model_cfg.image_size, aug_rng, data_cfg.pad_fraction, data_cfg.min_crop_scale
    )
    image = _match_channels(image, model_cfg.channels)
    if rng is not None and data_cfg.max_shift > 0:
        dx, dy = rng.integers(-data_cfg.max_shift, data_cfg.max_shift + 1, size=2)
        image, words = shift_page(image, words, int(dx), int(dy))
    grid = model_cfg.grid
    ordered = reading_order(words, data_cfg.line_tolerance)
    align = tokenize_with_boxes(ordered, tokenizer, model_cfg.context_length, grid, data_cfg.box_mode)
    targets = build_target_matrix(grid, align.token_boxes, model_cfg.context_length)
    return Example(
        patches=patchify(image, model_cfg.patch_size).values.astype(np.float32),
        whitespace=whitespace_mask(image, grid, data_cfg.whitespace_threshold),
        token_ids=align.token_ids,
        targets=targets.values,
        row_valid=targets.row_valid,
        words=ordered,
        word_index=align.word_index,
        image=image,
    )


class PageCorpus:
    """Pages from a manifest, prepared for training or probing.

    Without augmentation every page is converted once up front.  Pages whose
    image cannot be read are skipped and counted in ``n_skipped``.
    """

    def __init__(self, pages: List[PageRecord], tokenizer, model_cfg, data_cfg):
        self.tokenizer = tokenizer
        self.model_cfg = model_cfg
        self.data_cfg = data_cfg
        self.pages: List[PageRecord] = []
        self._raw = []
        self._cache: List[Example] = []
        self.n_skipped = 0
        for page in pages:
            try:
                image = page.load_image()
                ex = None if data_cfg.randomized else build_example(
                    image, page.words, tokenizer, model_cfg, data_cfg
                )
            except DataError as exc:
                self.n_skipped += 1
                logger.warning("skipping page %s: %s", page.image_ref, exc)
                continue
            self.pages.append(page)
            if data_cfg.randomized:
                self._raw.append(image)
            else:
                self._cache.append(ex)

    @classmethod
    def from_manifest(cls, path, tokenizer, model_cfg, data_cfg, limit: Optional[int] = None):
        pages = read_pages(path)
        if limit is not None:
            pages = pages[:limit]
        return cls(pages, tokenizer, model_cfg, data_cfg)

    def __len__(self):
        return len(self.pages)

    def example(self, i: int, rng=None) -> Example:
        if not self.data_cfg.randomized:
            return self._cache[i]
        return build_example(
            self._raw[i], self.pages[i].words, self.tokenizer, self.model_cfg, self.data_cfg, rng
        )

    def batch(self, indices, rng: np.random.Generator, mask_ratio: float) -> dict:
        exs = [self.example(int(i), rng) for i in indices]
        masks = [sample_mask(e.whitespace, mask_ratio, rng).masked for e in exs]
        return {
            "patches": torch.from_numpy(np.stack([e.patches for e in exs])),
            "mask": torch.from_numpy(np.stack(masks)),
            "token_ids": torch.from_numpy(np.stack([e.token_ids for e in exs])),
            "targets": torch.from_numpy(np.stack([e.targets for e in exs])),
            "row_valid": torch.from_numpy(np.stack([e.row_valid for e in exs])),
        }


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def sample_batch(corpus: PageCorpus, cfg: TrainConfig, step: int) -> dict:
    rng = step_rng(cfg.seed, step)
    n = len(corpus)
    idx = rng.choice(n, size=cfg.batch_size, replace=cfg.batch_size > n)
    return corpus.batch(idx, rng, cfg.mask_ratio)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for update ``step`` (0-based): linear warmup, then cosine to zero."""
    warm = cfg.resolved_warmup
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    span = max(1, cfg.total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.ndim < 2 or name.endswith(("pos_embed", "mask_token", "log_scale")):
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=cfg.betas)


def compute_losses(model, batch, cfg: TrainConfig):
    """Forward one batch; returns ``(l_tp, l_r, total)`` tensors."""
    dtype = next(model.parameters()).dtype
    patches = batch["patches"].to(dtype)
    hidden, image_emb = model.image_encoder(patches, batch["mask"])
    # a disabled term is still evaluated for the metrics log, without a graph
    with torch.set_grad_enabled(torch.is_grad_enabled() and cfg.use_alignment):
        text_emb = model.text_encoder(batch["token_ids"])
    with torch.set_grad_enabled(torch.is_grad_enabled() and bool(cfg.w_r)):
        pred = model.decoder(hidden)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        l_tp, _ = text_to_patch_loss(
            text_emb,
            image_emb,
            batch["targets"],
            batch["row_valid"],
            model.log_scale,
            normalize=cfg.normalize_embeddings,
            average=cfg.loss_average,
        )
    l_r, _ = reconstruction_loss(pred, patches, batch["mask"])
    # disabled terms are detached so they neither train nor decay their modules
    tp_term = l_tp if cfg.use_alignment else l_tp.detach() * 0.0
    r_term = l_r if cfg.w_r else l_r.detach()
    total = combined_loss(tp_term, r_term, cfg.w_r, allow_continuous=cfg.allow_continuous_w_r)
    return l_tp, l_r, total


def resolve_tokenizer(cfg: TrainConfig) -> WordTokenizer:
    if cfg.data.tokenizer:
        return WordTokenizer.load(cfg.data.tokenizer)
    beside = Path(cfg.data.manifest).parent / "tokenizer.json"
    if beside.is_file():
        return WordTokenizer.load(beside)
    logger.info("no tokenizer found; training one on manifest words")
    words = [w.text for page in read_pages(cfg.data.manifest) for w in page.words]
    return WordTokenizer.train(words)


def build_model(cfg: TrainConfig, tokenizer: WordTokenizer) -> DocAlignModel:
    torch.manual_seed(cfg.seed)
    model = DocAlignModel(cfg.model, pad_id=tokenizer.pad_id)
    if cfg.precision == "float64":
        model = model.double()
    return model


def make_payload(model, optimizer, cfg, tokenizer, step, history) -> dict:
    return {
        "config": cfg.to_dict(),
        "tokenizer": tokenizer.to_str(),
        "pad_id": tokenizer.pad_id,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "rng": {"torch": torch.get_rng_state()},
        "history": list(history),
    }


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    metrics_path: Path
    step: int
    history: List[dict] = field(default_factory=list)
    n_skipped: int = 0


def _write_failure(out_dir: Path, step: int, l_tp, l_r, total, model) -> Path:
    bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
    diag = {
        "step": step,
        "l_tp": float(l_tp.detach()),
        "l_r": float(l_r.detach()),
        "total": float(total.detach()),
        "lambda_scale": float(model.log_scale.detach().exp()),
        "non_finite_parameters": bad,
    }
    path = out_dir / "numeric_failure.json"
    path.write_text(json.dumps(diag, indent=2))
    return path


def _prefetch(corpus, cfg, start, stop):
    """Yield batches for steps [start, stop), built by a background thread."""
    q: "queue.Queue" = queue.Queue(maxsize=max(1, cfg.prefetch_batches))
    done = object()

    def produce():
        try:
            for s in range(start, stop):
                q.put((s, sample_batch(corpus, cfg, s)))
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=produce, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def pretrain(
    cfg: TrainConfig,
    out_dir,
    resume=None,
    stop_at: Optional[int] = None,
    corpus: Optional[PageCorpus] = None,
    tokenizer: Optional[WordTokenizer] = None,
) -> TrainResult:
    """Train until ``cfg.total_steps`` (or ``stop_at``), checkpointing along the way.

    Writes into ``out_dir``: ``config.yaml`` (resolved), ``metrics.jsonl``
    (one record per step, appended), ``tokenizer.json``,
    ``checkpoints/step_XXXXXX.pt`` and ``final.pt``.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    state = None
    if resume is not None:
        state = ckpt_io.load_checkpoint(resume)
        if state["kind"] != "full":
            raise ConfigError("cannot resume from an encoder-only checkpoint")
        tokenizer = WordTokenizer.from_str(state["tokenizer"])

    if corpus is None:
        if not cfg.data.manifest:
            raise ConfigError("data.manifest is required")
        if tokenizer is None:
            tokenizer = resolve_tokenizer(cfg)
        cfg.model.vocab_size = tokenizer.vocab_size
        corpus = PageCorpus.from_manifest(cfg.data.manifest, tokenizer, cfg.model, cfg.data)
    else:
        tokenizer = corpus.tokenizer
        cfg.model.vocab_size = tokenizer.vocab_size
    if len(corpus) == 0:
        raise DataError("no usable pages in the training manifest")

    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    model = build_model(cfg, tokenizer)
    optimizer = build_optimizer(model, cfg)
    history: List[dict] = []
    start = 0
    if state is not None:
        model.load_state_dict(state["state_dict"])
        optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["rng"]["torch"])
        start = int(state["step"])
        history = list(state.get("history", []))

    dump_config(cfg, out / "config.yaml")
    tokenizer.save(out / "tokenizer.json")
    metrics_path = out / "metrics.jsonl"
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)

    batches = (
        ((s, sample_batch(corpus, cfg, s)) for s in range(start, end))
        if cfg.deterministic
        else _prefetch(corpus, cfg, start, end)
    )
    model.train()
    last_ckpt = None
    with open(metrics_path, "a", encoding="utf-8") as mfh:
        for s, batch in batches:
            t0 = time.perf_counter()
            lr = lr_at(cfg, s)
            for g in optimizer.param_groups:
                g["lr"] = lr
            try:
                l_tp, l_r, total = compute_losses(model, batch, cfg)
            except NumericError as exc:
                nan = torch.tensor(float("nan"))
                diag = _write_failure(out, s + 1, nan, nan, nan, model)
                raise NumericError(f"{exc} at step {s + 1}; diagnostics in {diag}") from exc
            if not torch.isfinite(total):
                diag = _write_failure(out, s + 1, l_tp, l_r, total, model)
                raise NumericError(f"non-finite loss at step {s + 1}; diagnostics in {diag}")
            if total.requires_grad:
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
            step = s + 1
            row = {
                "step": step,
                "l_tp": float(l_tp.detach()),
                "l_r": float(l_r.detach()),
                "total": float(total.detach()),
                "lambda_scale": float(model.log_scale.detach().exp()),
                "lr": lr,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            history.append(row)
            mfh.write(json.dumps(row) + "\n")
            mfh.flush()
            if step % cfg.checkpoint_every == 0 or step == end:
                last_ckpt = out / "checkpoints" / f"step_{step:06d}.pt"
                ckpt_io.save_checkpoint(
                    make_payload(model, optimizer, cfg, tokenizer, step, history), last_ckpt
                )

    final = out / "final.pt"
    ckpt_io.save_checkpoint(
        make_payload(model, optimizer, cfg, tokenizer, max(end, start), history), final
    )
    return TrainResult(out, final, metrics_path, max(end, start), history, corpus.n_skipped)


def read_metrics(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
