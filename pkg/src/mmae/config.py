"""Run configuration: INI-style ``key = value`` files validated against the dataclasses.

Precedence is defaults < file < command-line overrides.  The resolved
configuration is written back out in the same format so a run directory can
be replayed exactly.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthSpec
from .model import DecoderConfig, EncoderConfig
from .training import ConfigError, TrainConfig


@dataclass
class DataConfig:
    root: str = ""
    train_fraction: float = 0.5
    n_labeled: int = 100
    lam: float = 0.1
    k: int = 20


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthSpec = field(default_factory=SynthSpec)
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(mode="finetune"))

    def seeded(self) -> "RunConfig":
        """Propagate the single run seed into every component."""
        self.synth.seed = self.seed
        self.pretrain.seed = self.seed
        self.finetune.seed = self.seed
        return self


SECTIONS = ("synth", "data", "encoder", "decoder", "pretrain", "finetune")
_SKIP = {"synth": {"classes", "W"}}


def desk_preset() -> RunConfig:
    """Small enough to pretrain in a few minutes on one CPU core."""
    return RunConfig(
        synth=SynthSpec(count=600, image_size=32),
        data=DataConfig(train_fraction=2 / 3, n_labeled=100, k=20),
        encoder=EncoderConfig(image_size=32, patch_size=8, depth=2, heads=2, head_dim=16),
        decoder=DecoderConfig(depth=2, heads=2, embed_dim=32),
        pretrain=TrainConfig(mode="pretrain", base_lr=1e-3, epochs=200, warmup_epochs=10,
                             batch_size=32, mask_ratio=0.75, budget=8),
        finetune=TrainConfig(mode="finetune", base_lr=1e-3, weight_decay=6e-5, epochs=12,
                             warmup_epochs=1, batch_size=16),
    )


def full_preset() -> RunConfig:
    """Full-scale schedule: 224x224 tiles, ViT-S encoder, 1600 pretraining epochs."""
    return RunConfig(
        synth=SynthSpec(count=1000, image_size=224),
        encoder=EncoderConfig(image_size=224, patch_size=16, depth=12, heads=6, head_dim=64),
        decoder=DecoderConfig(depth=2, heads=3, embed_dim=192),
        pretrain=TrainConfig(mode="pretrain", budget=190),
        finetune=TrainConfig(mode="finetune", base_lr=3e-3, weight_decay=6e-5, batch_size=96,
                             epochs=100, warmup_epochs=5),
    )


PRESETS = {"desk": desk_preset, "full": full_preset}


def _fields(obj) -> dict[str, type]:
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in dataclasses.fields(obj)}


def _parse(text: str, tp, key: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            if text.lower() in ("none", ""):
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _parse(text, inner, key)
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin is tuple:
            parts = [p for p in text.replace(" ", "").split(",") if p]
            elem = args[0] if args else float
            return tuple(_parse(p, elem, key) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r} for {key}") from exc
    raise ConfigError(f"unsupported type for {key}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section == "run":
        if key != "seed":
            raise ConfigError(f"unknown key run.{key}")
        cfg.seed = _parse(raw, int, "run.seed")
        return
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    types = _fields(obj)
    if key not in types or key in _SKIP.get(section, ()):
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(obj, key, _parse(raw, types[key], f"{section}.{key}"))


def _revalidate(cfg: RunConfig) -> RunConfig:
    try:
        for name in SECTIONS:
            obj = getattr(cfg, name)
            if hasattr(obj, "__post_init__"):
                obj.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _apply_text(cfg: RunConfig, text: str, source: str) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {source}: {exc}") from exc
    for section in parser.sections():
        for key, raw in parser.items(section):
            apply(cfg, section, key, raw)


def _overrides(cfg: RunConfig, overrides: list[str] | None) -> RunConfig:
    for item in overrides or []:
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        apply(cfg, section, key, raw)
    return _revalidate(cfg)


def _preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    return PRESETS[name]()


def load(path=None, overrides: list[str] | None = None, preset: str = "desk") -> RunConfig:
    """Resolve a run configuration from preset, optional file and ``section.key=value`` overrides."""
    cfg = _preset(preset)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _apply_text(cfg, text, str(path))
    return _overrides(cfg, overrides)


def loads(text: str, overrides: list[str] | None = None, preset: str = "desk") -> RunConfig:
    """Like :func:`load` but from an in-memory INI snapshot."""
    cfg = _preset(preset)
    _apply_text(cfg, text, "<snapshot>")
    return _overrides(cfg, overrides)


def dump(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {"seed": str(cfg.seed)}
    for name in SECTIONS:
        obj = getattr(cfg, name)
        parser[name] = {k: _format(getattr(obj, k)) for k in _fields(obj) if k not in _SKIP.get(name, ())}
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def write(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump(cfg))
