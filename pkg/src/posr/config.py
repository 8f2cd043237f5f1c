"""Run configuration and its flat ``section.key = value`` text form.

The echo written next to every output lists every key, so a run can be
reproduced from the echo alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthSpec
from .errors import ConfigError
from .losses import LossConfig
from .model import BackboneConfig, HeadConfig


@dataclass
class DataConfig:
    path: str = ""
    downsample: int = 1


@dataclass
class ArchConfig:
    """Backbone and head sizes; channel and sample counts come from the data."""

    temporal_kernel: int = 11
    n_temporal_filters: int = 8
    n_spatial_filters: int = 8
    pool_size: int = 4
    n_extra_blocks: int = 1
    embed_dim: int = 2
    style_embed_dim: int = 2

    def backbone(self, n_channels: int, n_samples: int) -> BackboneConfig:
        return BackboneConfig(
            n_channels=n_channels,
            n_samples=n_samples,
            temporal_kernel=self.temporal_kernel,
            n_temporal_filters=self.n_temporal_filters,
            n_spatial_filters=self.n_spatial_filters,
            pool_size=self.pool_size,
            n_extra_blocks=self.n_extra_blocks,
        )

    def semantic_head(self, n_classes: int, loss: LossConfig) -> HeadConfig:
        dim = n_classes if loss.clf_kind == "CE" else self.embed_dim
        return HeadConfig(n_categories=n_classes, embed_dim=dim, loss_kind=loss.clf_kind)

    def style_head(self, n_sources: int, loss: LossConfig) -> HeadConfig | None:
        if loss.ossr_kind == "NONE":
            return None
        return HeadConfig(n_categories=n_sources, embed_dim=self.style_embed_dim, loss_kind=loss.ossr_kind)


@dataclass
class TrainConfig:
    lr: float = 0.005
    lr_min: float = 0.0
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ConfigError(f"need 0 <= train.lr_min <= train.lr and lr > 0, got lr={self.lr} lr_min={self.lr_min}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be positive")


@dataclass
class LosoConfig:
    run_id: str = "run0"
    pool: tuple[int, ...] = ()
    eval_session: int = 3
    train_fraction: float = 0.8
    fold: int = 0

    def __post_init__(self):
        self.pool = tuple(int(s) for s in self.pool)
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"loso.train_fraction must lie in (0, 1), got {self.train_fraction}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loso: LosoConfig = field(default_factory=LosoConfig)
    out_dir: str = "out"

    def replace(self, **dotted) -> RunConfig:
        """Copy with overrides given as ``{"loss.alpha": 0.0, ...}`` (use ``__`` for ``.`` in kwargs)."""
        values = flatten(self)
        for key, value in dotted.items():
            key = key.replace("__", ".")
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        return _build(values)


_SECTIONS = ("data", "synth", "arch", "loss", "train", "loso")


def flatten(cfg: RunConfig) -> dict[str, object]:
    out: dict[str, object] = {}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            out[f"{section}.{f.name}"] = getattr(obj, f.name)
    out["out_dir"] = cfg.out_dir
    return out


def _field_types() -> dict[str, str]:
    types = {}
    for f in dataclasses.fields(RunConfig):
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(f.default_factory()):
                types[f"{f.name}.{sub.name}"] = str(sub.type)
        else:
            types[f.name] = str(f.type)
    return types


_TYPES = _field_types()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind.startswith("tuple[float"):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind.startswith("tuple[int"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "int":
            return int(raw, 0)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return raw.lower() == "true"
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _build(values: dict[str, object]) -> RunConfig:
    sections = {}
    for section in _SECTIONS:
        prefix = section + "."
        kwargs = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
        factory = {f.name: f.default_factory for f in dataclasses.fields(RunConfig) if f.name in _SECTIONS}[section]
        try:
            sections[section] = type(factory())(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[{section}] {exc}") from None
    return RunConfig(**sections, out_dir=str(values.get("out_dir", "out")))


def config_text(cfg: RunConfig) -> str:
    lines = ["# posr run configuration"]
    current = None
    for key, value in flatten(cfg).items():
        section = key.split(".", 1)[0] if "." in key else None
        if section != current:
            lines.append("")
            current = section
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text; keys not present keep their values from ``base`` (defaults if omitted)."""
    values = flatten(base or RunConfig())
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return _build(values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(config_text(cfg), encoding="utf-8")
