"""Training configuration, presets, and YAML (de)serialization.

Config file schema (version 1)::

    version: 1
    preset: desk            # optional; fields below override the preset
    model:   {ModelConfig fields}
    data:    {DataConfig fields}
    mask_ratio: 0.6         # fraction of non-whitespace patches masked
    w_r: 1                  # reconstruction weight, 0 or 1
    use_alignment: true     # token-to-patch loss on/off
    batch_size: 32
    learning_rate: 1.0e-3
    total_steps: 10000
    ...                     # remaining TrainConfig fields

CLI overrides use dotted keys, e.g. ``--set model.d_img=128 --set seed=3``.
"""

from __future__ import annotations

import copy
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError, DomainError
from .models import ModelConfig, full_scale_model_config

CONFIG_VERSION = 1


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _yaml_load(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    tokenizer: Optional[str] = None  # defaults to tokenizer.json beside the manifest
    eval_manifest: Optional[str] = None
    augment: bool = False
    pad_fraction: float = 0.5  # share of padded (vs. square-cropped) views when augmenting
    min_crop_scale: float = 0.6
    max_shift: int = 0  # random whole-pixel translation, applied after fitting
    whitespace_threshold: float = 0.95
    line_tolerance: float = 0.5
    box_mode: str = "inherit"

    @property
    def randomized(self) -> bool:
        """Whether examples change from draw to draw (and so cannot be cached)."""
        return self.augment or self.max_shift > 0


@dataclass
class TrainConfig:
    version: int = CONFIG_VERSION
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    mask_ratio: float = 0.6
    w_r: float = 1
    allow_continuous_w_r: bool = False
    use_alignment: bool = True
    normalize_embeddings: bool = True
    loss_average: str = "valid"
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.98)
    warmup_steps: Optional[int] = None  # None: 1% of total_steps
    grad_clip: Optional[float] = 1.0
    total_steps: int = 10000
    seed: int = 0
    checkpoint_every: int = 1000
    precision: str = "float32"
    deterministic: bool = True
    prefetch_batches: int = 4

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return int(self.warmup_steps)
        return max(1, round(0.01 * self.total_steps))

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if not self.allow_continuous_w_r and self.w_r not in (0, 1):
            raise ConfigError("w_r must be 0 or 1 (set allow_continuous_w_r to sweep)")
        if self.w_r < 0:
            raise ConfigError("w_r must be nonnegative")
        if self.loss_average not in ("valid", "context"):
            raise ConfigError("loss_average must be 'valid' or 'context'")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.checkpoint_every <= 0:
            raise ConfigError("checkpoint_every must be positive")
        if self.data.box_mode not in ("inherit", "split"):
            raise ConfigError("data.box_mode must be 'inherit' or 'split'")
        if self.data.max_shift < 0:
            raise ConfigError("data.max_shift must be nonnegative")
        if not 0.0 <= self.data.pad_fraction <= 1.0:
            raise ConfigError("data.pad_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            model = ModelConfig(**d.pop("model", {}) or {})
            data = DataConfig(**d.pop("data", {}) or {})
            return cls(model=model, data=data, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc


def desk_preset() -> dict:
    """64x64 grayscale pages, P=8, two-layer encoders of width 64, batch 32."""
    return TrainConfig().to_dict()


def full_preset() -> dict:
    """Full-scale hyperparameters: 512px, P=16, batch 2048, lr 1e-3, dropout 0.1, M=0.6."""
    cfg = TrainConfig(
        model=full_scale_model_config(),
        mask_ratio=0.6,
        batch_size=2048,
        learning_rate=1e-3,
        total_steps=250_000,
        checkpoint_every=5000,
    )
    return cfg.to_dict()


PRESETS = {"desk": desk_preset, "full": full_preset}

# Loss-combination and masking-ratio ablations, as config overrides on a preset.
ABLATIONS = {
    "baseline": {"use_alignment": False, "w_r": 0, "mask_ratio": 0.0},
    "reconstruction_only": {"use_alignment": False, "w_r": 1, "mask_ratio": 0.6},
    "alignment_only": {"use_alignment": True, "w_r": 0, "mask_ratio": 0.0},
    "combined": {"use_alignment": True, "w_r": 1, "mask_ratio": 0.6},
    "mask_0.2": {"use_alignment": True, "w_r": 1, "mask_ratio": 0.2},
    "mask_0.4": {"use_alignment": True, "w_r": 1, "mask_ratio": 0.4},
    "mask_0.6": {"use_alignment": True, "w_r": 1, "mask_ratio": 0.6},
}


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(expr: str) -> dict:
    """Turn ``a.b=value`` into ``{"a": {"b": value}}`` with YAML-typed value."""
    if "=" not in expr:
        raise ConfigError(f"override {expr!r} is not of the form key=value")
    key, raw = expr.split("=", 1)
    try:
        value = _yaml_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in override {expr!r}") from exc
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def resolve_config(raw: Optional[dict] = None, overrides=(), ablation: Optional[str] = None) -> TrainConfig:
    raw = dict(raw or {})
    preset = raw.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset](), raw)
    if ablation is not None:
        if ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
        merged = _merge(merged, ABLATIONS[ablation])
    for expr in overrides:
        merged = _merge(merged, parse_override(expr))
    return TrainConfig.from_dict(merged)


def load_config(path=None, overrides=(), ablation: Optional[str] = None) -> TrainConfig:
    raw = {}
    if path is not None:
        try:
            raw = _yaml_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a mapping")
    return resolve_config(raw, overrides, ablation)


def dump_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
