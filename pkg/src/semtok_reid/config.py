"""Run configuration and its ``key=value`` file format.

Keys are dotted (``loss.margin=0.3``); ``#`` starts a comment; unknown keys
are rejected. ``TrainConfig`` is the single source of defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .decoder import DEFAULT_INSTRUCTION
from .errors import ConfigError

CSS_MODES = ("off", "late", "input")
SGI_VARIANTS = ("full", "query_only", "none")
PSTG_MODES = ("generated", "learnable_token")


def _key(name: str, default):
    return dataclasses.field(default=default, metadata={"key": name})


@dataclass
class TrainConfig:
    seed: int = _key("seed", 0)
    dim: int = _key("model.dim", 64)
    heads: int = _key("model.heads", 4)
    patch: int = _key("vision.patch", 8)
    vision_layers: int = _key("vision.layers", 4)
    decoder_layers: int = _key("decoder.layers", 4)
    vocab_size: int = _key("decoder.vocab", 512)
    pstg_mode: str = _key("pstg.mode", "generated")
    instruction: str = _key("pstg.instruction", DEFAULT_INSTRUCTION)
    css_mode: str = _key("css.mode", "input")
    sgi_variant: str = _key("sgi.variant", "full")
    stop_gradient: bool = _key("train.stop_gradient", False)
    p_ids: int = _key("train.p_ids", 16)
    k_imgs: int = _key("train.k_imgs", 4)
    epochs: int = _key("train.epochs", 30)
    base_lr: float = _key("train.base_lr", 3e-4)
    warmup_epochs: int = _key("train.warmup_epochs", 10)
    decay_epoch: int = _key("train.decay_epoch", 15)
    decay_factor: float = _key("train.decay_factor", 0.1)
    weight_decay: float = _key("train.weight_decay", 3e-4)
    steps_per_epoch: int = _key("train.steps_per_epoch", 0)
    eval_every: int = _key("train.eval_every", 10)
    alpha1: float = _key("loss.alpha1", 0.25)
    alpha2: float = _key("loss.alpha2", 1.0)
    margin: float = _key("loss.margin", 0.3)
    epsilon: float = _key("loss.epsilon", 0.1)
    flip_p: float = _key("aug.flip_p", 0.5)
    pad: int = _key("aug.pad", 4)
    erase_p: float = _key("aug.erase_p", 0.5)
    max_rank: int = _key("eval.max_rank", 10)

    @property
    def batch_size(self) -> int:
        return self.p_ids * self.k_imgs

    def validate(self) -> "TrainConfig":
        if self.css_mode not in CSS_MODES:
            raise ConfigError(f"css.mode must be one of {CSS_MODES}, got {self.css_mode!r}")
        if self.sgi_variant not in SGI_VARIANTS:
            raise ConfigError(f"sgi.variant must be one of {SGI_VARIANTS}, got {self.sgi_variant!r}")
        if self.pstg_mode not in PSTG_MODES:
            raise ConfigError(f"pstg.mode must be one of {PSTG_MODES}, got {self.pstg_mode!r}")
        if self.decay_epoch <= self.warmup_epochs:
            raise ConfigError("train.decay_epoch must exceed train.warmup_epochs")
        if self.p_ids < 2 or self.k_imgs < 2:
            raise ConfigError("train.p_ids and train.k_imgs must both be >= 2 for triplet mining")
        if self.dim % self.heads:
            raise ConfigError("model.dim must be divisible by model.heads")
        if self.epochs < 0 or self.base_lr <= 0:
            raise ConfigError("train.epochs must be >= 0 and train.base_lr > 0")
        if not self.instruction.strip():
            raise ConfigError("pstg.instruction must not be empty")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


KEY_TO_FIELD = {f.metadata["key"]: f for f in fields(TrainConfig)}


def _coerce(f, raw: str):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {f.metadata['key']}: {raw!r} (expected {kind})") from None
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key not in KEY_TO_FIELD:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        f = KEY_TO_FIELD[key]
        changes[f.name] = _coerce(f, value.strip())
    return cfg.replace(**changes).validate()


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text)


def serialize_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.metadata['key']}={value}")
    return "\n".join(lines) + "\n"


def documented_keys() -> list[str]:
    return list(KEY_TO_FIELD)


# Ablation variant names and the toggles each one sets on top of the base config.
VARIANTS = {
    "full": {},
    "no_pstg": {"pstg_mode": "learnable_token"},
    "no_sgi": {"sgi_variant": "none"},
    "stop_grad": {"stop_gradient": True},
    "css_off": {"css_mode": "off"},
    "css_late": {"css_mode": "late"},
    "css_input": {"css_mode": "input"},
    "query_only": {"sgi_variant": "query_only"},
}

# css_input is the full model's default, so the suite runs it once (as "full").
ABLATION_GRID = ("full", "no_pstg", "no_sgi", "stop_grad", "css_off", "css_late", "query_only")


def apply_variant(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}")
    return cfg.replace(**VARIANTS[name]).validate()
