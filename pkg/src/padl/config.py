"""Flat ``key = value`` configuration files.

One setting per line; ``#`` starts a comment. Keys are dotted and grouped by
prefix:

* ``model.<field>``  -> :class:`padl.model.ModelConfig`
* ``train.<field>``  -> :class:`padl.training.TrainConfig`
* ``data.folder``    -> optional folder of PNG/JPEG training images
* ``output.checkpoint`` / ``output.log`` -> where to write results

Values are read as JSON literals when they parse (numbers, ``true``,
``[0.01, 0.05]``, quoted strings); anything else is kept as a bare string.
Lists given for tuple fields are converted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import ConfigError, ModelConfig
from .training import TrainConfig

SECTIONS = ("model", "train", "data", "output")


def parse_flat(text: str) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_folder: str | None = None
    checkpoint: str = "padl.ckpt"
    log: str = "train_log.jsonl"


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    flat = parse_flat(path.read_text(encoding="utf-8"))
    groups: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, val in flat.items():
        section, _, name = key.partition(".")
        if section not in groups or not name:
            raise ConfigError(f"unknown config key {key!r}")
        groups[section][name] = val
    try:
        model = ModelConfig.from_dict(groups["model"])
        train = TrainConfig.from_dict(groups["train"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    extra = set(groups["data"]) - {"folder"} | set(groups["output"]) - {"checkpoint", "log"}
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    base = path.parent
    rc = RunConfig(model=model, train=train, data_folder=groups["data"].get("folder"))
    rc.checkpoint = str(base / groups["output"].get("checkpoint", rc.checkpoint))
    rc.log = str(base / groups["output"].get("log", rc.log))
    if rc.data_folder:
        rc.data_folder = str(base / rc.data_folder)
    return rc
