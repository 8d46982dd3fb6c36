"""Run configuration: flat ``key = value`` files with ``[section]`` headers."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import geometry as geo
from .adaptation import AdaptationConfig
from .errors import ConfigError
from .model import ModelDims


@dataclass
class DataConfig:
    n_points: int = 256
    source_domains: tuple[str, ...] = geo.SOURCE_STYLES
    target_domains: tuple[str, ...] = geo.TARGET_STYLES
    pretrain_per_domain: int = 200
    stream_per_domain: int = 100
    rounds: int = 3

    def __post_init__(self):
        for d in self.source_domains + self.target_domains:
            if d not in geo.STYLES:
                raise ConfigError(f"unknown domain style {d!r}")
        if self.n_points < 32 or self.pretrain_per_domain < 1 or self.stream_per_domain < 1 or self.rounds < 1:
            raise ConfigError("data sizes must be positive (n_points >= 32)")


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.05
    testtime_fraction: float = 0.0


@dataclass
class BankConfig:
    epochs: int = 3
    quantity: int = 2
    lr: float = 1e-3
    weight_decay: float = 0.05


@dataclass
class AblateConfig:
    quantities: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass
class ExportConfig:
    clouds: tuple[str, ...] = ()
    task: str = "reconstruction"


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs"
    record_timings: bool = False


SECTIONS = {
    "data": DataConfig,
    "model": ModelDims,
    "pretrain": PretrainConfig,
    "bank": BankConfig,
    "adapt": AdaptationConfig,
    "ablate": AblateConfig,
    "export": ExportConfig,
    "run": RunSection,
}


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw.strip()
        if origin is tuple:
            inner = typing.get_args(hint)[0]
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_coerce(s, inner, key) for s in items)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelDims = field(default_factory=ModelDims)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    export: ExportConfig = field(default_factory=ExportConfig)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        if parser.defaults():
            raise ConfigError(f"keys outside any section: {sorted(parser.defaults())}")
        parts = {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            kind = SECTIONS[section]
            hints = typing.get_type_hints(kind)
            known = {f.name for f in fields(kind)}
            values = {}
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
                values[key] = _coerce(raw, hints[key], f"{section}.{key}")
            try:
                parts[section] = kind(**values)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}]: {exc}") from None
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text())

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    def to_dict(self) -> dict:
        return {name: {f.name: getattr(getattr(self, name), f.name) for f in fields(getattr(self, name))} for name in SECTIONS}

    def to_text(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {_render(v)}" for k, v in values.items())
            lines.append("")
        return "\n".join(lines)
