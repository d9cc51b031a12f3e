"""Experiment configuration files (INI style, one section per sub-config).

Example::

    [experiment]
    seed = 0

    [generator]
    n_conversations = 200

    [model]
    epochs = 30

    [context]
    k = 2

    [decode]
    beam_size = 10

    [paths]
    corpus_dir = runs/corpus
    checkpoint_dir = runs/ckpt
    output_dir = runs/out

Unknown keys are rejected. The experiment seed overrides the generator and
model seeds so a single number controls every random stream.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union, get_type_hints

from .context import ContextConfig
from .corpus import GeneratorConfig
from .decode import DecodeConfig
from .model import ModelConfig


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class PathsConfig:
    corpus_dir: str = "runs/corpus"
    checkpoint_dir: str = "runs/ckpt"
    output_dir: str = "runs/out"


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)

    def validate(self) -> None:
        try:
            self.generator.validate()
            self.model.validate()
            self.context.validate()
            self.decode.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        dirs = [Path(p).resolve() for p in dataclasses.astuple(self.paths)]
        if len(set(dirs)) != len(dirs):
            raise ConfigError("corpus_dir, checkpoint_dir and output_dir must be distinct")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        self.seed = seed
        self.generator.seed = seed
        self.model.seed = seed
        return self

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {"seed": str(self.seed), "split": ", ".join(str(f) for f in self.split)}
        for name in SECTIONS:
            obj = getattr(self, name)
            cp[name] = {f.name: _show(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                        if getattr(obj, f.name) is not None}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)


SECTIONS = ("generator", "model", "context", "decode", "paths")


def _show(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(raw: str, typ, where: str):
    origin = getattr(typ, "__origin__", None)
    if origin is Union:  # Optional[X]
        if raw.strip().lower() in ("", "none"):
            return None
        typ = next(t for t in typ.__args__ if t is not type(None))
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, float):
            return typ(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


def _fill(obj, section: configparser.SectionProxy, source: str):
    hints = get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    for key, raw in section.items():
        if key not in names:
            raise ConfigError(f"{source}: [{section.name}] unknown key {key!r}")
        setattr(obj, key, _coerce(raw, hints[key], f"{source}: [{section.name}] {key}"))


def load_config(path: Optional[Union[str, Path]] = None, text: Optional[str] = None) -> ExperimentConfig:
    """Parse a config file (or ``text``); missing sections keep their defaults."""
    cp = configparser.ConfigParser()
    source = "<text>"
    try:
        if path is not None:
            source = str(path)
            if not Path(path).is_file():
                raise ConfigError(f"config file {path} does not exist")
            cp.read_string(Path(path).read_text(encoding="utf-8"), source=source)
        elif text is not None:
            cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = ExperimentConfig()
    for sec in cp.sections():
        if sec == "experiment":
            for key, raw in cp[sec].items():
                if key == "seed":
                    cfg.seed = _coerce(raw, int, f"{source}: [experiment] seed")
                elif key == "split":
                    try:
                        cfg.split = tuple(float(x) for x in raw.split(","))
                    except ValueError:
                        raise ConfigError(f"{source}: [experiment] split: expected three numbers") from None
                else:
                    raise ConfigError(f"{source}: [experiment] unknown key {key!r}")
        elif sec in SECTIONS:
            _fill(getattr(cfg, sec), cp[sec], source)
        else:
            raise ConfigError(f"{source}: unknown section [{sec}]")
    cfg.with_seed(cfg.seed)
    cfg.validate()
    return cfg
