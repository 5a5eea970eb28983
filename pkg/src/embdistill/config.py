"""Run configuration files.

Two equivalent encodings are accepted. INI::

    [train]
    epochs = 50
    student_hidden = 32, 64
    bds_enabled = false

    [paths]
    inputs = data/inputs.ssnd
    teacher = data/teacher.ssnd

    [probe]
    kind = linear

or JSON with the same three sections as objects. Unknown sections or keys
are rejected. Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import UsageError
from .evaluation import ProbeConfig
from .trainer import TrainConfig

PATH_KEYS = ("inputs", "teacher", "tasks", "teacher_report", "out_dir")


@dataclass
class CliConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    paths: dict[str, Optional[str]] = field(default_factory=lambda: dict.fromkeys(PATH_KEYS))

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "probe": dataclasses.asdict(self.probe),
            "paths": dict(self.paths),
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _coerce(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"bad value for {name}: {raw!r}") from None
    if default is None and raw.lower() in ("", "none", "null"):
        return None
    return raw


def _section(cls, values: dict, section: str, from_ini: bool):
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise UsageError(f"unknown keys in [{section}]: {unknown}")
    if from_ini:
        values = {k: _coerce(v, defaults[k], f"{section}.{k}") for k, v in values.items()}
    try:
        return cls(**{**defaults, **values})
    except TypeError as exc:
        raise UsageError(f"[{section}]: {exc}") from None


def parse_config(data: dict, base_dir=None, from_ini: bool = False) -> CliConfig:
    unknown = sorted(set(data) - {"train", "probe", "paths"})
    if unknown:
        raise UsageError(f"unknown config sections: {unknown}")
    paths = dict.fromkeys(PATH_KEYS)
    given = dict(data.get("paths", {}))
    bad = sorted(set(given) - set(PATH_KEYS))
    if bad:
        raise UsageError(f"unknown keys in [paths]: {bad}")
    for key, value in given.items():
        if value in (None, ""):
            continue
        p = Path(value)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        paths[key] = str(p)
    return CliConfig(
        train=_section(TrainConfig, dict(data.get("train", {})), "train", from_ini),
        probe=_section(ProbeConfig, dict(data.get("probe", {})), "probe", from_ini),
        paths=paths,
    )


def load_config(path) -> CliConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        return parse_config(data, path.parent)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    data = {s: dict(parser[s]) for s in parser.sections()}
    return parse_config(data, path.parent, from_ini=True)
