"""Run configuration: one TOML file per run, strict keys, archived after resolution."""

from __future__ import annotations

import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .captions import ALL_VARIANTS, parse_variant, variant_name
from .data import ACTIVITY_PROFILES
from .model import FAMILY, ModelConfig
from .objectives import LossConfig
from .trainer import TrainConfig

SEED_ENV = "SLM_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    classes: list[str] = field(default_factory=lambda: ["Run", "Walk", "Outdoor Bike",
                                                        "Weightlifting"])
    days_per_class: int = 50
    test_days_per_class: int = 25
    people: int = 50


@dataclass
class CaptionSection:
    variants: list[str] = field(default_factory=lambda: ["struct+sem"])
    budget: int = 8
    templates: str = ""  # empty means the bundled pool


@dataclass
class ModelSection:
    preset: str = "tiny"
    L_text: int = 0  # 0 derives it from the training captions
    enc_layers: int | None = None
    dec_layers: int | None = None
    hidden_dim: int | None = None
    heads: int | None = None
    mlp_dim: int | None = None
    patch: list[int] | None = None
    embed_dim: int | None = None
    dropout: float | None = None

    def build(self, vocab_size: int, L_text: int) -> ModelConfig:
        if self.preset not in FAMILY:
            raise ConfigError(f"unknown model preset {self.preset!r}; choose from {list(FAMILY)}")
        over = {k: v for k, v in asdict(self).items()
                if k not in ("preset", "L_text") and v is not None}
        return FAMILY[self.preset].replace(**over, vocab_size=vocab_size, L_text=L_text).validate()


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 16
    base_lr: float = 1e-3
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 1.0
    schedule: str = "cosine_warmup_linear_decay"
    lambda_con: float = 1.0
    lambda_cap: float = 1.0
    tau: float = 0.01
    denominator_mode: str = "include"
    caption_variant: str = "struct+sem"

    def build(self, seed: int) -> TrainConfig:
        loss = LossConfig(self.lambda_con, self.lambda_cap, self.tau, self.denominator_mode)
        return TrainConfig(self.steps, self.batch_size, self.base_lr, self.warmup_fraction,
                           self.beta1, self.beta2, self.eps, seed, loss,
                           variant_name(parse_variant(self.caption_variant)), self.clip_norm,
                           self.schedule)


@dataclass
class EvalSection:
    recall_k: list[int] = field(default_factory=lambda: [1, 5, 10])
    few_shot_sizes: list[int] = field(default_factory=lambda: [5, 10, 20, 50])
    few_shot_seeds: int = 5
    probe_l2: float = 1e-3
    caption_max_len: int = 0  # 0 means the model's L_text


@dataclass
class AblationSection:
    steps: int = 300
    batch_size: int = 16


SECTIONS = {"data": DataSection, "captions": CaptionSection, "model": ModelSection,
            "train": TrainSection, "eval": EvalSection, "ablation": AblationSection}
TOP_LEVEL = {"seed", "name", "out_dir"}


@dataclass
class RunConfig:
    seed: int = 0
    name: str = "run"
    out_dir: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    captions: CaptionSection = field(default_factory=CaptionSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.name

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return _drop_none(d)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def train_config(self) -> TrainConfig:
        return self.train.build(self.seed)


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    return d


def _line_of(text: str, needle: str, key: bool = False) -> int | None:
    pattern = re.compile(rf"^\s*\[?{re.escape(needle)}\]?\s*(=|$)") if key else None
    for i, line in enumerate(text.splitlines(), 1):
        if (pattern.match(line) if key else needle in line):
            return i
    return None


def _where(source: str, text: str, needle: str, key: bool = False) -> str:
    line = _line_of(text, needle, key)
    return f"{source}:{line}" if line else source


def _build_section(cls, raw: dict, source: str, text: str, prefix: str):
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{_where(source, text, key, True)}: unknown key '{prefix}{key}'")
    return cls(**raw)


def parse_run_config(text: str, source: str = "<config>",
                     overrides: dict[str, Any] | None = None) -> RunConfig:
    """Parse TOML ``text``; ``overrides`` are dotted keys (``train.steps``) applied on top."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for key, value in (overrides or {}).items():
        *path, leaf = key.split(".")
        node = raw
        for p in path:
            node = node.setdefault(p, {})
        node[leaf] = value
    for key in raw:
        if key not in TOP_LEVEL and key not in SECTIONS:
            raise ConfigError(f"{_where(source, text, key, True)}: unknown key {key!r}")
    kwargs: dict[str, Any] = {k: raw[k] for k in TOP_LEVEL if k in raw}
    if "seed" not in kwargs:
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                kwargs["seed"] = int(env)
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    for name, cls in SECTIONS.items():
        sect = raw.get(name, {})
        if not isinstance(sect, dict):
            raise ConfigError(f"{_where(source, text, name, True)}: [{name}] must be a table")
        try:
            kwargs[name] = _build_section(cls, sect, source, text, f"{name}.")
        except TypeError as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from exc
    cfg = RunConfig(**kwargs)
    validate_run_config(cfg, source, text)
    return cfg


def validate_run_config(cfg: RunConfig, source: str = "<config>", text: str = "") -> None:
    for label in cfg.data.classes:
        if label not in ACTIVITY_PROFILES:
            raise ConfigError(f"{_where(source, text, repr(label)[1:-1])}: unknown activity class "
                              f"{label!r}; known: {sorted(ACTIVITY_PROFILES)}")
    if len(set(cfg.data.classes)) < 2:
        raise ConfigError(f"{source}: need at least two distinct classes")
    if cfg.data.days_per_class < 1 or cfg.data.test_days_per_class < 1:
        raise ConfigError(f"{source}: days per class must be positive")
    if not re.fullmatch(r"[\w.-]+", cfg.name):
        raise ConfigError(f"{source}: run name {cfg.name!r} must be a plain directory name")
    variants = cfg.captions.variants
    if variants == ["all"]:
        cfg.captions.variants = variants = [variant_name(v) for v in ALL_VARIANTS]
    try:
        canon = [variant_name(parse_variant(v)) for v in variants]
        train_variant = variant_name(parse_variant(cfg.train.caption_variant))
        cfg.train_config()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg.captions.variants = canon
    cfg.train.caption_variant = train_variant
    if train_variant not in canon:
        raise ConfigError(f"{source}: train.caption_variant {train_variant!r} is not among "
                          f"captions.variants {canon}")
    if cfg.model.preset not in FAMILY:
        raise ConfigError(f"{_where(source, text, 'preset', True)}: unknown model preset "
                          f"{cfg.model.preset!r}")
    if any(k < 1 for k in cfg.eval.recall_k) or cfg.eval.few_shot_seeds < 1:
        raise ConfigError(f"{source}: eval sizes must be positive")


def load_run_config(path: str | Path | None, overrides: dict[str, Any] | None = None
                    ) -> RunConfig:
    if path is None:
        return parse_run_config("", "<defaults>", overrides)
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_run_config(text, str(p), overrides)
