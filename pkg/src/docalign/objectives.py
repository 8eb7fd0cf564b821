"""Token-to-patch alignment loss, masked-patch reconstruction loss, and their sum."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DomainError, NumericError

VARIANCE_FLOOR = 1e-6


@dataclass
class LossBundle:
    l_tp: torch.Tensor
    l_r: torch.Tensor
    total: torch.Tensor
    n_valid_tokens: int
    n_masked_patches: int


@dataclass
class Temperature:
    """Softmax scale kept positive by storing its logarithm."""

    log_scale: torch.Tensor

    @property
    def scale(self) -> torch.Tensor:
        return self.log_scale.exp()


def _check_finite(name, t):
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} contains non-finite values")


def similarity_logits(text_emb, image_emb, log_scale, normalize: bool = True):
    """exp(log_scale) * <text_i, image_j> for every token/patch pair, in float64."""
    t = text_emb.double()
    v = image_emb.double()
    if normalize:
        t = F.normalize(t, dim=-1)
        v = F.normalize(v, dim=-1)
    return torch.as_tensor(log_scale).double().exp() * (t @ v.transpose(-1, -2))


def text_to_patch_loss(
    text_emb,
    image_emb,
    targets,
    row_valid,
    log_scale,
    normalize: bool = True,
    average: str = "valid",
):
    """Soft-target cross-entropy from each token to the patches of its own page.

    Shapes: ``text_emb`` (..., L, d), ``image_emb`` (..., N, d), ``targets``
    (..., L, N), ``row_valid`` (..., L).  A leading batch dimension is treated
    as independent pages and the per-page losses are averaged over pages that
    have at least one valid token.

    ``average="valid"`` divides each page's token sum by its valid-token count;
    ``average="context"`` divides by the full context length L.

    Returns ``(loss, n_valid)``.  When no token is valid the loss is a zero
    that still participates in autograd, and a RuntimeWarning is issued.
    """
    if average not in ("valid", "context"):
        raise DomainError(f"unknown averaging mode {average!r}")
    _check_finite("text embeddings", text_emb)
    _check_finite("image embeddings", image_emb)
    targets = torch.as_tensor(targets, dtype=torch.float64, device=text_emb.device)
    row_valid = torch.as_tensor(row_valid, dtype=torch.bool, device=text_emb.device)
    if targets.shape[:-1] != text_emb.shape[:-1] or targets.shape[-1] != image_emb.shape[-2]:
        raise DomainError(
            f"targets {tuple(targets.shape)} do not match text {tuple(text_emb.shape)} "
            f"and image {tuple(image_emb.shape)} embeddings"
        )

    logp = torch.log_softmax(similarity_logits(text_emb, image_emb, log_scale, normalize), dim=-1)
    # 0 * log p is taken as 0 even where log p underflows
    per_token = -torch.where(targets > 0, targets * logp, torch.zeros_like(logp)).sum(-1)
    per_token = torch.where(row_valid, per_token, torch.zeros_like(per_token))
    n_valid_rows = row_valid.sum(-1)
    n_valid = int(n_valid_rows.sum())
    if n_valid == 0:
        warnings.warn("no valid text tokens; alignment loss is zero", RuntimeWarning, stacklevel=2)
        return per_token.sum() * 0.0, 0

    denom = n_valid_rows.clamp(min=1).double() if average == "valid" else float(per_token.shape[-1])
    per_page = per_token.sum(-1) / denom
    has_rows = n_valid_rows > 0
    loss = per_page[has_rows].mean() if per_page.ndim else per_page
    return loss, n_valid


def normalize_patches(patches, floor: float = VARIANCE_FLOOR):
    """Per-patch zero mean, unit variance; variance floored at ``floor``."""
    x = patches.double()
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / var.clamp(min=floor).sqrt()


def reconstruction_loss(predicted, original, masked):
    """Mean squared error over all pixels of masked patches, in normalized pixel space.

    Shapes: ``predicted`` and ``original`` (..., N, P*P*C), ``masked`` (..., N).
    Returns ``(loss, n_masked)``; with no masked patch the loss is zero.
    """
    original = torch.as_tensor(original, device=predicted.device)
    masked = torch.as_tensor(masked, dtype=torch.bool, device=predicted.device)
    if predicted.shape != original.shape or masked.shape != predicted.shape[:-1]:
        raise DomainError(
            f"shape mismatch: predicted {tuple(predicted.shape)}, original "
            f"{tuple(original.shape)}, mask {tuple(masked.shape)}"
        )
    n_masked = int(masked.sum())
    if n_masked == 0:
        return predicted.double().sum() * 0.0, 0
    err = (predicted.double() - normalize_patches(original)) ** 2
    err = torch.where(masked.unsqueeze(-1), err, torch.zeros_like(err))
    return err.sum() / (n_masked * predicted.shape[-1]), n_masked


def combined_loss(l_tp, l_r, w_r, allow_continuous: bool = False):
    """l_tp + w_r * l_r, with w_r restricted to {0, 1} unless explicitly allowed."""
    if not allow_continuous and w_r not in (0, 1):
        raise DomainError(f"reconstruction weight must be 0 or 1, got {w_r}")
    if allow_continuous and not (isinstance(w_r, (int, float)) and math.isfinite(w_r) and w_r >= 0):
        raise DomainError(f"reconstruction weight must be a finite nonnegative number, got {w_r}")
    return l_tp + w_r * l_r
