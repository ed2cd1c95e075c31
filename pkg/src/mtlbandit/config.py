"""Experiment configuration files (INI syntax)."""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from pathlib import Path

from .model import ModelSpec
from .tasks import COPS, ConfigurationError, TaskRegistry
from .trainer import TrainConfig

# section -> key -> (TrainConfig field or None, converter)
_SCHEMA = {
    "tasks": {cop: (cop, "scales") for cop in COPS},
    "schedule": {
        "kind": ("schedule", str),
        "algorithm": ("algorithm", str),
        "freq": ("freq", int),
        "gamma": ("gamma", float),
        "discount": ("discount", float),
        "feedback": ("feedback", str),
        "stl_task": ("stl_task", str),
        "warmup": ("warmup", "bool"),
        "seed": ("seed", int),
    },
    "model": {"hidden": ("hidden", int), "depth": ("depth", int), "init_scale": ("init_scale", float)},
    "optimizer": {
        "kind": ("optimizer", str),
        "lr": ("lr", float),
        "beta1": ("beta1", float),
        "beta2": ("beta2", float),
        "eps": ("eps", float),
        "decay_at": ("decay_at", float),
        "decay_factor": ("decay_factor", float),
        "batch_size": ("batch_size", int),
        "rollouts": ("n_rollouts", int),
    },
    "budget": {"total": ("budget", float), "weights": ("budget_weights", str)},
    "eval": {"instances": ("eval_instances", int), "seed": ("eval_seed", int)},
    "output": {"dir": ("out_dir", str)},
}
REQUIRED = ("tasks", "schedule")


@dataclass
class ExperimentConfig:
    train: TrainConfig
    out_dir: str | None = None


def _line_index(text: str) -> dict:
    """Line number of every section header and ``section.key``."""
    index, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            index.setdefault(section, no)
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            index.setdefault((section, key), no)
    return index


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    """Parse config text; ``overrides`` maps TrainConfig fields to values that win over the file."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(str(exc)) from None
    lines = _line_index(text)

    def where(section, key=None):
        no = lines.get((section, key) if key else section)
        return f"{source}:{no}" if no else source

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(f"{where(section)}: unknown section [{section}]")
    for section in REQUIRED:
        if not parser.has_section(section):
            raise ConfigurationError(f"{source}: missing required section [{section}]")

    fields, scales = {}, {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigurationError(f"{where(section, key)}: unknown key {key!r} in [{section}]")
            name, conv = _SCHEMA[section][key]
            try:
                if conv == "scales":
                    scales[name] = [int(x) for x in raw.replace(",", " ").split()]
                elif conv == "bool":
                    value = raw.strip().lower()
                    if value not in ("true", "false", "yes", "no", "1", "0"):
                        raise ValueError(raw)
                    fields[name] = value in ("true", "yes", "1")
                else:
                    fields[name] = conv(raw.strip())
            except ValueError:
                raise ConfigurationError(f"{where(section, key)}: bad value {raw!r} for {key}") from None
    if not scales:
        raise ConfigurationError(f"{where('tasks')}: [tasks] lists no COP scales")
    fields.update({k: v for k, v in (overrides or {}).items() if v is not None})
    out_dir = fields.pop("out_dir", None)
    model = ModelSpec(**{k: fields.pop(k) for k in ("hidden", "depth", "init_scale") if k in fields})
    try:
        registry = TaskRegistry(scales)
        cfg = TrainConfig(registry, model=model, **fields)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    return ExperimentConfig(cfg, out_dir)


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), overrides)
