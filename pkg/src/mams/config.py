"""Config files: ``key = value`` lines under ``[model]``, ``[train]``, ``[synth]`` and ``[data]`` headers.

Values are parsed against the target dataclass field type. Tuples are written
comma separated (``input_size = 32, 32``), booleans as true/false, and ``none``
clears an optional field. Unknown sections and keys are rejected with the line
number.
"""

from __future__ import annotations

import dataclasses
import typing
from typing import Any, Dict, Optional

from .data import SynthConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclasses.dataclass
class DataPaths:
    data_dir: Optional[str] = None
    label_csv: Optional[str] = None
    image_dir: Optional[str] = None
    image_size: int = 224


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthConfig, "data": DataPaths}


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    data: DataPaths = dataclasses.field(default_factory=DataPaths)


def desk_ablation_config() -> RunConfig:
    """24x24 synthetic images, 300 + 300 steps: the 12-run ablation fits in about ten CPU minutes."""
    cfg = RunConfig()
    cfg.synth = dataclasses.replace(cfg.synth, image_size=24)
    cfg.model = dataclasses.replace(cfg.model, input_size=(24, 24))
    cfg.train = dataclasses.replace(cfg.train, stage1_steps=300, stage2_steps=300)
    return cfg


def _scalar(text: str, kind, where: str):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected {kind.__name__}, got {text!r}") from None
    return text.strip("\"'")


def parse_value(text: str, hint, where: str = "value"):
    """Convert ``text`` to the type described by the annotation ``hint``."""
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if text.lower() == "none" and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return parse_value(text, inner[0], where)
    if origin in (tuple, list):
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        item = args[0] if args else str
        out = tuple(_scalar(p, item, where) for p in parts)
        fixed = origin is tuple and args and args[-1] is not Ellipsis
        if fixed and len(args) != len(out):
            raise ConfigError(f"{where}: expected {len(args)} comma separated values, got {len(out)}")
        return list(out) if origin is list else out
    return _scalar(text, hint, where)


def _apply(obj, key: str, text: str, where: str):
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names:
        raise ConfigError(f"{where}: unknown key {key!r} for [{_section_of(obj)}]")
    setattr(obj, key, parse_value(text, hints[key], where))


def _section_of(obj) -> str:
    return next(name for name, cls in SECTIONS.items() if isinstance(obj, cls))


def load_config(path: Optional[str] = None, base: Optional[RunConfig] = None) -> RunConfig:
    """Read ``path`` on top of ``base`` (defaults when omitted) and validate every section."""
    cfg = base or RunConfig()
    if path is None:
        return cfg
    section: Optional[str] = None
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in SECTIONS:
                    raise ConfigError(f"{where}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise ConfigError(f"{where}: expected 'key = value'")
            if section is None:
                raise ConfigError(f"{where}: key outside of a [section]")
            key, value = (s.strip() for s in line.split("=", 1))
            _apply(getattr(cfg, section), key, value, where)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    cfg.model.validate()
    cfg.train.validate()
    cfg.synth.validate()


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the file format accepted by :func:`load_config`."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            lines.append(f"{f.name} = {_render(getattr(getattr(cfg, name), f.name))}")
        lines.append("")
    return "\n".join(lines)


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_render(v) for v in value)
    return str(value)


def as_dict(cfg: RunConfig) -> Dict[str, Dict[str, Any]]:
    return {name: dataclasses.asdict(getattr(cfg, name)) for name in SECTIONS}
