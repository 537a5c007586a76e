"""Run configuration: typed sections, TOML parsing and validation.

A config file has up to five sections (``[model]``, ``[data]``,
``[pretrain]``, ``[train]``, ``[sampler]``).  Missing keys take the defaults
below; unknown sections or keys are rejected.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .errors import ConfigError

TRAIN_MODES = ("sft", "dpo", "lora_sft", "lora_dpo")
AID_MODES = ("off", "learned", "sparse_enhanced")


def _require(cond: bool, field_name: str, bound: str, value: Any) -> None:
    if not cond:
        raise ConfigError(f"{field_name} = {value!r} violates bound: {bound}")


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 6
    feature_dim: int = 32
    num_heads: int = 4
    text_len: int = 8
    image_len: int = 16
    vocab_size: int = 16
    aid_hidden_dim: int = 64
    seed: int = 0

    def validate(self) -> None:
        _require(self.num_blocks >= 1, "model.num_blocks", ">= 1", self.num_blocks)
        _require(self.feature_dim >= 2, "model.feature_dim", ">= 2", self.feature_dim)
        _require(self.num_heads >= 1, "model.num_heads", ">= 1", self.num_heads)
        _require(
            self.feature_dim % self.num_heads == 0,
            "model.feature_dim",
            f"divisible by num_heads={self.num_heads}",
            self.feature_dim,
        )
        _require(self.feature_dim % 2 == 0, "model.feature_dim", "even (sinusoidal embedding)", self.feature_dim)
        _require(self.text_len >= 0, "model.text_len", ">= 0", self.text_len)
        _require(self.image_len >= 1, "model.image_len", ">= 1", self.image_len)
        _require(self.vocab_size >= 2, "model.vocab_size", ">= 2", self.vocab_size)
        _require(self.aid_hidden_dim >= 1, "model.aid_hidden_dim", ">= 1", self.aid_hidden_dim)


@dataclass(frozen=True)
class DataConfig:
    grid_size: int = 4
    num_colors: int = 4
    max_count: int = 4
    train_size: int = 2048
    val_size: int = 256
    seed: int = 0

    def validate(self) -> None:
        _require(self.grid_size >= 1, "data.grid_size", ">= 1", self.grid_size)
        _require(self.num_colors >= 2, "data.num_colors", ">= 2", self.num_colors)
        _require(
            1 <= self.max_count <= self.grid_size**2,
            "data.max_count",
            f"in [1, grid_size^2={self.grid_size ** 2}]",
            self.max_count,
        )
        _require(self.max_count >= 2, "data.max_count", ">= 2 (count must be corruptible)", self.max_count)
        _require(self.train_size >= 1, "data.train_size", ">= 1", self.train_size)
        _require(self.val_size >= 1, "data.val_size", ">= 1", self.val_size)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 2e-3
    cond_dropout: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        _require(self.steps >= 0, "pretrain.steps", ">= 0", self.steps)
        _require(self.batch_size >= 1, "pretrain.batch_size", ">= 1", self.batch_size)
        _require(self.learning_rate > 0, "pretrain.learning_rate", "> 0", self.learning_rate)
        _require(0.0 <= self.cond_dropout <= 1.0, "pretrain.cond_dropout", "in [0, 1]", self.cond_dropout)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch_size: int = 32
    learning_rate: float = 1e-3
    lambda_dpo: float = 1.0
    lambda_reg: float = 0.1
    beta: float = 0.1
    skip_p: float = 0.1
    seed: int = 0
    mode: str = "dpo"
    lora_rank: int = 4
    grad_accum: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self) -> None:
        _require(self.steps >= 0, "train.steps", ">= 0", self.steps)
        _require(self.batch_size >= 1, "train.batch_size", ">= 1", self.batch_size)
        _require(self.learning_rate > 0, "train.learning_rate", "> 0", self.learning_rate)
        _require(self.lambda_dpo >= 0, "train.lambda_dpo", ">= 0", self.lambda_dpo)
        _require(self.lambda_reg >= 0, "train.lambda_reg", ">= 0", self.lambda_reg)
        _require(self.beta > 0, "train.beta", "> 0", self.beta)
        _require(0.0 <= self.skip_p <= 1.0, "train.skip_p", "in [0, 1]", self.skip_p)
        _require(self.mode in TRAIN_MODES, "train.mode", f"one of {TRAIN_MODES}", self.mode)
        _require(self.lora_rank >= 1, "train.lora_rank", ">= 1", self.lora_rank)
        _require(self.grad_accum >= 1, "train.grad_accum", ">= 1", self.grad_accum)
        _require(0 <= self.adam_beta1 < 1, "train.adam_beta1", "in [0, 1)", self.adam_beta1)
        _require(0 <= self.adam_beta2 < 1, "train.adam_beta2", "in [0, 1)", self.adam_beta2)
        _require(self.adam_eps > 0, "train.adam_eps", "> 0", self.adam_eps)
        _require(self.weight_decay >= 0, "train.weight_decay", ">= 0", self.weight_decay)

    @property
    def uses_aid(self) -> bool:
        return self.mode in ("sft", "dpo")

    @property
    def uses_dpo(self) -> bool:
        return self.mode in ("dpo", "lora_dpo")


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 28
    cfg_scale: float = 3.0
    seed: int = 0
    capture_alpha: bool = False
    capture_attention_norm: bool = False
    aid_mode: str = "off"
    enhance_blocks: tuple[int, ...] = ()
    enhance_value: float = 0.5
    num_prompts: int = 200

    def validate(self) -> None:
        _require(self.num_steps >= 1, "sampler.num_steps", ">= 1", self.num_steps)
        _require(self.cfg_scale >= 0, "sampler.cfg_scale", ">= 0", self.cfg_scale)
        _require(self.aid_mode in AID_MODES, "sampler.aid_mode", f"one of {AID_MODES}", self.aid_mode)
        _require(-1 < self.enhance_value < 1, "sampler.enhance_value", "in (-1, 1)", self.enhance_value)
        _require(self.num_prompts >= 1, "sampler.num_prompts", ">= 1", self.num_prompts)


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def validate(self) -> "RunConfig":
        for name in _SECTIONS:
            getattr(self, name).validate()
        side = self.data.grid_size**2
        if self.model.image_len != side:
            raise ConfigError(
                f"model.image_len = {self.model.image_len} must equal data.grid_size^2 = {side}"
            )
        needed = 2 + self.data.num_colors + self.data.max_count
        if self.model.vocab_size < needed:
            raise ConfigError(f"model.vocab_size = {self.model.vocab_size} must be >= {needed} for the toy vocabulary")
        if self.model.text_len < 2:
            raise ConfigError(f"model.text_len = {self.model.text_len} must be >= 2 (two attribute tokens)")
        return self

    def to_dict(self) -> dict[str, dict[str, Any]]:
        out = {}
        for name in _SECTIONS:
            sec = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out

    def with_overrides(self, **sections: dict[str, Any]) -> "RunConfig":
        updated = {}
        for name, values in sections.items():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown config section [{name}]")
            updated[name] = _build_section(name, values, base=getattr(self, name))
        return replace(self, **updated).validate()


def _coerce(section: str, f, value):
    key = f"{section}.{f.name}"
    default = f.default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} must be a list of integers, got {value!r}")
        return tuple(value)
    return value


def _build_section(name: str, values: dict[str, Any], base=None):
    cls = _SECTIONS[name]
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    coerced = {k: _coerce(name, known[k], v) for k, v in values.items()}
    return replace(base if base is not None else cls(), **coerced)


def parse_config(data: dict[str, Any]) -> RunConfig:
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    sections = {}
    for name in _SECTIONS:
        values = data.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build_section(name, values)
    return RunConfig(**sections).validate()


def loads(text: str) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return parse_config(data)


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text())


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
