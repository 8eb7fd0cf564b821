"""Image encoder, text encoder and pixel decoder.

The image encoder is a plain ViT whose masked patch projections are swapped
for one learned [MASK] vector before positions are added.  Both encoders end
in a linear head into a shared similarity space.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DomainError
from .geometry import PatchGrid

# initial exp(log_scale); the usual CLIP starting temperature 1/0.07
DEFAULT_LOGIT_SCALE = 1.0 / 0.07


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 1
    d_img: int = 64
    d_txt: int = 64
    d_dec: int = 64
    n_layers_img: int = 2
    n_layers_txt: int = 2
    decoder_layers: int = 2
    n_heads: int = 4
    decoder_heads: int = 4
    mlp_ratio: float = 2.0
    context_length: int = 32
    proj_dim: int = 64
    vocab_size: int = 512
    dropout: float = 0.1  # residual, MLP and embedding dropout
    attn_dropout: float = 0.0  # on attention probabilities
    causal_text: bool = False
    init_logit_scale: float = DEFAULT_LOGIT_SCALE

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise DomainError("image_size must be a multiple of patch_size")
        if self.channels not in (1, 3):
            raise DomainError("channels must be 1 or 3")
        for width, heads, name in (
            (self.d_img, self.n_heads, "d_img"),
            (self.d_txt, self.n_heads, "d_txt"),
            (self.d_dec, self.decoder_heads, "d_dec"),
        ):
            if width % heads:
                raise DomainError(f"{name}={width} is not divisible by {heads} heads")
        if self.context_length < 2:
            raise DomainError("context_length must be at least 2")
        if self.init_logit_scale <= 0:
            raise DomainError("init_logit_scale must be positive")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.attn_dropout < 1.0):
            raise DomainError("dropout rates must lie in [0, 1)")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.image_size, self.patch_size)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def full_scale_model_config(vocab_size: int = 49408) -> ModelConfig:
    """Full-size architecture: 512px pages, P=16, 12-layer encoders."""
    return ModelConfig(
        image_size=512, patch_size=16, channels=3, d_img=768, d_txt=512, d_dec=512,
        n_layers_img=12, n_layers_txt=12, decoder_layers=2, n_heads=8, decoder_heads=8,
        mlp_ratio=4.0, context_length=512, proj_dim=512, vocab_size=vocab_size, dropout=0.1,
    )


# ----------------------------------------------------------------------------
# patch layout


def _permute(x, axes):
    return x.permute(*axes) if isinstance(x, torch.Tensor) else np.transpose(x, axes)


@dataclass
class PatchSequence:
    values: object  # (..., N, P*P*C), numpy array or tensor
    grid: PatchGrid


def patchify(image, patch_size: int) -> PatchSequence:
    """Split an (..., H, W, C) raster into row-major flattened patches.

    Each patch is flattened in (row, col, channel) order.
    """
    if image.ndim < 3:
        raise DomainError("image must be (..., H, W, C)")
    *lead, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise DomainError(f"image {w}x{h} is not divisible by patch size {p}")
    nr, nc = h // p, w // p
    k = len(lead)
    x = image.reshape(*lead, nr, p, nc, p, c)
    x = _permute(x, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return PatchSequence(x.reshape(*lead, nr * nc, p * p * c), PatchGrid(w, h, p))


def unpatchify(seq: PatchSequence):
    g = seq.grid
    p = g.patch_size
    x = seq.values
    *lead, n, d = x.shape
    c = d // (p * p)
    if n != g.n_patches or c * p * p != d:
        raise DomainError("patch sequence does not match its grid")
    k = len(lead)
    x = x.reshape(*lead, g.n_rows, g.n_cols, p, p, c)
    x = _permute(x, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return x.reshape(*lead, g.image_height, g.image_width, c)


def interpolate_positions(pos_table, new_len: int):
    """Linearly resample a (old_len, d) position table to ``new_len`` rows.

    Output row i samples source position i * (old_len - 1) / (new_len - 1);
    both endpoints are kept exactly.
    """
    table = torch.as_tensor(pos_table)
    if table.ndim != 2 or table.shape[0] < 2:
        raise DomainError("position table must be 2-D with at least 2 rows")
    if new_len < 2:
        raise DomainError("new_len must be at least 2")
    if new_len == table.shape[0]:
        return table.clone()
    # (1, d, L) layout for 1-d linear interpolation along positions
    out = F.interpolate(table.T.unsqueeze(0), size=new_len, mode="linear", align_corners=True)
    out = out[0].T.contiguous()
    out[0], out[-1] = table[0], table[-1]
    return out


# ----------------------------------------------------------------------------
# transformer blocks


class Attention(nn.Module):
    def __init__(self, dim, num_heads, dropout=0.0):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.dropout = dropout

    def forward(self, x, attn_mask=None):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        drop = self.dropout if self.training else 0.0
        x = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask, dropout_p=drop)
        x = x.transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4.0, dropout=0.0, attn_dropout=0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, attn_dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, attn_mask=None):
        x = x + self.drop(self.attn(self.norm1(x), attn_mask))
        x = x + self.drop(self.fc2(self.drop(F.gelu(self.fc1(self.norm2(x))))))
        return x


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Embedding):
        nn.init.trunc_normal_(m.weight, std=0.02)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.d_img)
        self.mask_token = nn.Parameter(torch.zeros(cfg.d_img))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.n_patches, cfg.d_img))
        self.pos_drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(
            Block(cfg.d_img, cfg.n_heads, cfg.mlp_ratio, cfg.dropout, cfg.attn_dropout)
            for _ in range(cfg.n_layers_img)
        )
        self.norm = nn.LayerNorm(cfg.d_img)
        self.head = nn.Linear(cfg.d_img, cfg.proj_dim)

    def forward(self, patches, mask=None):
        """Return ``(hidden, projected)`` for (B, N, P*P*C) patches.

        ``mask`` is a (B, N) bool tensor; True positions get the [MASK] vector
        in place of their patch projection.
        """
        if patches.ndim != 3 or patches.shape[1:] != (self.cfg.n_patches, self.cfg.patch_dim):
            raise DomainError(
                f"expected patches (B, {self.cfg.n_patches}, {self.cfg.patch_dim}), "
                f"got {tuple(patches.shape)}"
            )
        x = self.patch_embed(patches)
        if mask is not None:
            if mask.shape != patches.shape[:2]:
                raise DomainError(f"mask shape {tuple(mask.shape)} does not match patches")
            x = torch.where(mask.unsqueeze(-1), self.mask_token.to(x.dtype), x)
        x = self.pos_drop(x + self.pos_embed)
        for blk in self.blocks:
            x = blk(x)
        hidden = self.norm(x)
        return hidden, self.head(hidden)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, pad_id: int = 0):
        super().__init__()
        self.cfg = cfg
        self.pad_id = pad_id
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.d_txt)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.context_length, cfg.d_txt))
        self.pos_drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(
            Block(cfg.d_txt, cfg.n_heads, cfg.mlp_ratio, cfg.dropout, cfg.attn_dropout)
            for _ in range(cfg.n_layers_txt)
        )
        self.norm = nn.LayerNorm(cfg.d_txt)
        self.head = nn.Linear(cfg.d_txt, cfg.proj_dim)

    def attention_mask(self, token_ids):
        B, L = token_ids.shape
        keep = token_ids != self.pad_id
        # an all-padding row attends everywhere rather than nowhere
        keep = keep | ~keep.any(dim=1, keepdim=True)
        allowed = keep[:, None, None, :].expand(B, 1, L, L)
        if self.cfg.causal_text:
            causal = torch.ones(L, L, dtype=torch.bool, device=token_ids.device).tril()
            allowed = allowed & causal
            # padding queries must still see something
            allowed = allowed | ~allowed.any(dim=-1, keepdim=True)
        return allowed

    def forward(self, token_ids):
        if token_ids.ndim != 2 or token_ids.shape[1] != self.cfg.context_length:
            raise DomainError(
                f"expected token ids (B, {self.cfg.context_length}), got {tuple(token_ids.shape)}"
            )
        if token_ids.numel() and (token_ids.min() < 0 or token_ids.max() >= self.cfg.vocab_size):
            raise DomainError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        x = self.pos_drop(self.token_embed(token_ids) + self.pos_embed)
        mask = self.attention_mask(token_ids)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.head(self.norm(x))


class PixelDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.d_img, cfg.d_dec)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.n_patches, cfg.d_dec))
        self.blocks = nn.ModuleList(
            Block(cfg.d_dec, cfg.decoder_heads, cfg.mlp_ratio, cfg.dropout, cfg.attn_dropout)
            for _ in range(cfg.decoder_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_dec)
        self.pred = nn.Linear(cfg.d_dec, cfg.patch_dim)

    def forward(self, hidden):
        if hidden.ndim != 3 or hidden.shape[1:] != (self.cfg.n_patches, self.cfg.d_img):
            raise DomainError(
                f"expected encoder states (B, {self.cfg.n_patches}, {self.cfg.d_img}), "
                f"got {tuple(hidden.shape)}"
            )
        x = self.embed(hidden) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.pred(self.norm(x))


class DocAlignModel(nn.Module):
    """Image encoder, text encoder, pixel decoder and the learnt logit scale."""

    def __init__(self, cfg: ModelConfig, pad_id: int = 0):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.text_encoder = TextEncoder(cfg, pad_id)
        self.decoder = PixelDecoder(cfg)
        self.log_scale = nn.Parameter(torch.tensor(float(np.log(cfg.init_logit_scale))))
        self.apply(_init_weights)
        for module in (self.image_encoder, self.text_encoder, self.decoder):
            nn.init.trunc_normal_(module.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.image_encoder.mask_token, std=0.02)

    def encode_image(self, patches, mask=None):
        return self.image_encoder(patches, mask)

    def encode_text(self, token_ids):
        return self.text_encoder(token_ids)

    def decode_pixels(self, hidden):
        return self.decoder(hidden)

    def forward(self, patches, mask, token_ids, decode: bool = True):
        hidden, image_emb = self.image_encoder(patches, mask)
        text_emb = self.text_encoder(token_ids)
        pred = self.decoder(hidden) if decode else None
        return image_emb, text_emb, pred


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
