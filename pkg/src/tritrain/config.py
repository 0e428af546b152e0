"""Model/training configuration and the flat ``key=value`` text format.

Keys are namespaced ``model.<field>`` and ``train.<field>``; one format is
used for config files, ``--set`` overrides and checkpoint headers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 12
    d_model: int = 768
    n_heads: int = 12
    d_intermediate: int = 2048
    rope_theta: float = 10000.0
    rmsnorm_eps: float = 1e-6
    vocab_size: int = 30522
    context_len: int = 512
    init_std: float = 0.02
    quantize: bool = True
    quantize_embeddings: bool = False
    binary_mode: bool = False
    learnable_alpha: bool = True
    ste_alpha_factor: bool = True
    norm: str = "rmsnorm"
    attn_activation_enabled: bool = True

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim={self.head_dim} must be even for rotary embeddings")
        if self.context_len < 1:
            raise ConfigError("context_len must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.n_layers < 0 or self.d_intermediate < 1:
            raise ConfigError("n_layers must be >= 0 and d_intermediate >= 1")
        if self.norm not in ("rmsnorm", "layernorm"):
            raise ConfigError(f"norm must be 'rmsnorm' or 'layernorm', got {self.norm!r}")


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 1000
    total_steps: int = 0  # 0 -> epochs * steps_per_epoch
    epochs: int = 15
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    grad_clip_norm: float = 1.0
    batch_size: int = 64
    seq_len: int = 512
    label_smoothing: float = 0.1
    seed: int = 0
    val_fraction: float = 0.1
    eval_interval: int = 0  # 0 -> once per epoch
    checkpoint_interval: int = 0  # 0 -> final checkpoint only
    histogram_bins: int = 101
    divergence_factor: float = 3.0
    divergence_patience: int = 200

    def validate(self) -> None:
        if self.peak_lr < 0:
            raise ConfigError("peak_lr must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be > 0")
        if self.batch_size < 1 or self.seq_len < 1 or self.epochs < 1:
            raise ConfigError("batch_size, seq_len and epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        if self.train.seq_len > self.model.context_len:
            raise ConfigError(
                f"train.seq_len={self.train.seq_len} exceeds model.context_len={self.model.context_len}")

    def to_flat(self) -> dict[str, str]:
        out = {}
        for prefix, obj in (("model", self.model), ("train", self.train)):
            out.update(to_flat(obj, prefix))
        return out

    def dumps(self) -> str:
        return dumps(self.to_flat())

    def apply(self, overrides: dict[str, str]) -> RunConfig:
        for key, value in overrides.items():
            prefix, _, name = key.partition(".")
            target = {"model": self.model, "train": self.train}.get(prefix)
            if target is None or not name:
                raise ConfigError(f"unknown config key {key!r}")
            set_field(target, name, value, key)
        return self

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> RunConfig:
        return cls().apply(flat)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_flat(loads(Path(path).read_text(encoding="utf-8")))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, typ, key: str):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for {key}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def set_field(obj, name: str, value, key: str | None = None) -> None:
    key = key or name
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if name not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    typ = fields[name].type
    typ = _TYPES.get(typ, typ) if isinstance(typ, str) else typ
    if isinstance(value, str):
        value = _parse(value, typ, key)
    setattr(obj, name, value)


def to_flat(obj, prefix: str) -> dict[str, str]:
    return {f"{prefix}.{f.name}": _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def dumps(flat: dict[str, str]) -> str:
    lines = []
    for key, value in flat.items():
        if "\n" in value or "=" in key:
            raise ConfigError(f"cannot serialise {key!r}")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict[str, str]:
    flat: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        flat[key.strip()] = value.strip()
    return flat


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out


def config_diff(a: RunConfig, b: RunConfig) -> dict[str, tuple[str, str]]:
    fa, fb = a.to_flat(), b.to_flat()
    return {k: (fa[k], fb[k]) for k in fa if fa[k] != fb[k]}
