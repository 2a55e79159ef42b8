"""Strict JSON run configuration.

A run config is one JSON object::

    {
      "seed": 0,
      "dataset": {"instances_per_family": 40, ...},
      "model": {"feature_dim": 64, ...},
      "train": {"lambda": 0.01, "epochs": 40, ...},
      "eval": {"k": 20, ...}
    }

``seed`` is required; every other field has a default. Unknown keys are
errors that name the key and its line, so a typo never silently falls
back to a default.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field

from trajssl.data.manifest import DatasetConfig
from trajssl.nn.model import ModelConfig
from trajssl.pipeline.evaluate import EvalConfig
from trajssl.pipeline.train import TrainConfig

SECTIONS = {"dataset": DatasetConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}
# JSON names that differ from the dataclass attribute
RENAMES = {"train": {"lambda": "lam"}}
HIDDEN = {"train": {"seed"}, "model": {"image_size"}}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _line_of(text: str | None, key: str) -> int | None:
    if text is None:
        return None
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _json_names(section: str) -> dict:
    """JSON key -> dataclass field name for one section."""
    cls = SECTIONS[section]
    inverse = {v: k for k, v in RENAMES.get(section, {}).items()}
    return {inverse.get(f.name, f.name): f.name for f in dataclasses.fields(cls)
            if f.name not in HIDDEN.get(section, set())}


def _coerce(value, default, where: str, line):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(type(v) is type(default[0]) for v in value) if default else isinstance(value, list)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {json.dumps(value)}", line)
    return value


@dataclass(frozen=True)
class RunConfig:
    seed: int
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))

    @classmethod
    def from_dict(cls, doc, text: str | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        for key in doc:
            if key != "seed" and key not in SECTIONS:
                raise ConfigError(f"unknown key {key!r} at top level (expected seed, {', '.join(SECTIONS)})",
                                  _line_of(text, key))
        if "seed" not in doc:
            raise ConfigError("missing required key 'seed'")
        seed = _coerce(doc["seed"], 0, "seed", _line_of(text, "seed"))
        if seed < 0:
            raise ConfigError("seed must be non-negative", _line_of(text, "seed"))
        built = {}
        for section, klass in SECTIONS.items():
            body = doc.get(section, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {section!r} must be an object", _line_of(text, section))
            names = _json_names(section)
            defaults = klass()
            kwargs = {}
            for key, value in body.items():
                line = _line_of(text, key)
                if key not in names:
                    raise ConfigError(f"unknown key {key!r} in section {section!r}; valid keys: "
                                      f"{', '.join(sorted(names))}", line)
                attr = names[key]
                kwargs[attr] = _coerce(value, getattr(defaults, attr), f"{section}.{key}", line)
            if section == "train":
                kwargs["seed"] = seed
            try:
                obj = klass(**kwargs)
                if hasattr(obj, "validate"):
                    obj.validate()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"section {section!r}: {exc}", _line_of(text, section)) from exc
            built[section] = obj
        return cls(seed=seed, **built)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno) from exc
        return cls.from_dict(doc, text)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def to_dict(self) -> dict:
        """Fully resolved config, loadable by :meth:`from_dict`."""
        out = {"seed": self.seed}
        for section in SECTIONS:
            obj = getattr(self, section)
            names = _json_names(section)
            sec = {}
            for key, attr in names.items():
                value = getattr(obj, attr)
                sec[key] = list(value) if isinstance(value, tuple) else value
            out[section] = sec
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def with_lambda(self, lam: float) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, lam=float(lam)))
