"""Run configuration: flat ``key = value`` text with dotted sections.

Sections are ``data.``, ``model.``, ``loss.`` and ``train.``; a bare ``seed``
sets every seed at once.  Example::

    # ablation at desk scale
    seed = 0
    data.n_samples = 300
    model.encoder_channels = 8, 16, 32, 64, 128
    model.use_tim = true
    train.epochs = 40
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .data import DatasetSpec
from .losses import LossConfig
from .network import ModelConfig
from .trainer import TrainConfig

SIZES = ("tiny", "small", "paper")
_TRAIN_SCALARS = ("epochs", "batch_size", "lr0", "lr_min", "patience", "augment", "seed")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def model(self) -> ModelConfig:
        return self.train.model

    @property
    def loss(self) -> LossConfig:
        return self.train.loss

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.train.validate()
        if self.data.image_size != self.model.input_size:
            raise ConfigError(f"data.image_size ({self.data.image_size}) differs from model.input_size "
                              f"({self.model.input_size})")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(replace(self.data, seed=seed),
                         replace(self.train, seed=seed, model=replace(self.model, seed=seed)))


def preset(size: Optional[str]) -> RunConfig:
    """Preset bundles; ``None`` gives the library defaults (64 px, full widths)."""
    if size is None:
        return RunConfig()
    if size == "tiny":
        data = DatasetSpec(n_samples=40, image_size=32, lesion_size_range_px=(4.0, 7.0))
        model = ModelConfig(input_size=32, encoder_channels=(8,) * 5, decoder_channels=(8,) * 4, clf_width=8,
                            head_width=8, dropout=0.0)
        return RunConfig(data, TrainConfig(epochs=2, batch_size=4, model=model))
    if size == "small":
        data = DatasetSpec(n_samples=300, image_size=32, lesion_size_range_px=(4.0, 8.0))
        model = ModelConfig(input_size=32, encoder_channels=(8, 16, 32, 64, 128),
                            decoder_channels=(64, 32, 16, 8), clf_width=64, head_width=64)
        return RunConfig(data, TrainConfig(epochs=40, batch_size=8, model=model))
    if size == "paper":
        data = DatasetSpec(n_samples=300, image_size=224, lesion_size_range_px=(20.0, 50.0))
        model = ModelConfig(input_size=224)
        return RunConfig(data, TrainConfig(epochs=100, batch_size=24, model=model))
    raise ConfigError(f"unknown size {size!r}; choose from {', '.join(SIZES)}")


# ------------------------------------------------------------------ parsing

def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in raw.replace("(", "").replace(")", "").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _section_target(cfg: RunConfig, section: str):
    return {"data": cfg.data, "model": cfg.model, "loss": cfg.loss, "train": cfg.train}.get(section)


def parse_config(text: str, base: Optional[RunConfig] = None, source: str = "<config>") -> RunConfig:
    cfg = base if base is not None else RunConfig()
    data, model, loss = replace(cfg.data), replace(cfg.model), replace(cfg.loss)
    train = replace(cfg.train, model=model, loss=loss)
    cfg = RunConfig(data, train)
    seed = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "seed":
            seed = _coerce(value, 0, key)
            continue
        section, _, name = key.partition(".")
        target = _section_target(cfg, section)
        known = {f.name for f in fields(target)} if target is not None else set()
        if section == "train":
            known = set(_TRAIN_SCALARS)
        if name not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        setattr(target, name, _coerce(value, getattr(target, name), key))
    return cfg.with_seed(seed) if seed is not None else cfg


def load_config(path, base: Optional[RunConfig] = None) -> tuple[RunConfig, bytes]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = path.read_bytes()
    return parse_config(raw.decode("utf-8"), base, str(path)), raw


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Canonical text; ``parse_config(dump_config(c))`` reproduces ``c``."""
    lines = []
    for section, obj in (("data", cfg.data), ("model", cfg.model), ("loss", cfg.loss)):
        lines += [f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}" for f in fields(obj)]
    lines += [f"train.{k} = {_fmt(getattr(cfg.train, k))}" for k in _TRAIN_SCALARS]
    return "\n".join(lines) + "\n"


def git_blob_hash(raw: bytes) -> str:
    """Content hash as ``git hash-object`` computes it."""
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()
