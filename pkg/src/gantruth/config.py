"""Experiment configuration: one YAML document with sections data, mapping, arch, estimators, trainer, eval.

Every key has a default. A user document is deep-merged onto the defaults and
any key the defaults do not know is rejected by its dotted path.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from . import __version__
from .adaptation import TaskConfig
from .estimators import EstimatorConfig
from .labels import load_mapping
from .nets import ArchConfig
from .scene import SceneConfig
from .training import TrainerConfig

RESOLVED_NAME = "config.resolved.yaml"
_MAPPING_FIELDS = ("semseg_mapping", "instance_mapping")


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    trainer = TrainerConfig().to_dict()
    for key in _MAPPING_FIELDS:
        trainer.pop(key)
    pretrain = dataclasses.asdict(EstimatorConfig())
    pretrain.pop("mapping")
    task = dataclasses.asdict(TaskConfig())
    task.pop("mapping")
    return {
        "data": {
            "source": None,
            "target": None,
            "target_val": None,
            "count": 100,
            "seed": 0,
            "domains": "both",
            "scene": SceneConfig().to_dict(),
        },
        "mapping": {"semseg": "toy-source->toy-target", "instance": "toy-source->toy-target"},
        "arch": ArchConfig().to_dict(),
        "estimators": {"semseg": None, "disparity": None, "instance": None, "source_semseg": None,
                       "pretrain": pretrain},
        "trainer": trainer,
        "eval": {"alignment": "median", "task": task, "grid_rows": 4, "grid_seed": 0},
    }


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, doc: Mapping | None = None) -> "ExperimentConfig":
        if doc is not None and not isinstance(doc, Mapping):
            raise ConfigError("config document must be a mapping at the top level")
        cfg = cls(_merge(_defaults(), doc or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides: list[str] | None = None) -> "ExperimentConfig":
        doc: dict = {}
        if path is not None:
            try:
                doc = yaml.safe_load(Path(path).read_text()) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_dict(apply_overrides(doc, overrides or []))

    # typed views ------------------------------------------------------------
    def scene(self) -> SceneConfig:
        return SceneConfig.from_dict(self.raw["data"]["scene"])

    def arch(self) -> ArchConfig:
        return ArchConfig.from_dict(self.raw["arch"])

    def estimator(self, kind: str) -> EstimatorConfig:
        mapping = self.raw["mapping"]["instance" if kind == "instance" else "semseg"]
        return EstimatorConfig(**self.raw["estimators"]["pretrain"], mapping=mapping)

    def trainer(self) -> TrainerConfig:
        return TrainerConfig.from_dict({**self.raw["trainer"], "semseg_mapping": self.raw["mapping"]["semseg"],
                                        "instance_mapping": self.raw["mapping"]["instance"]})

    def task(self) -> TaskConfig:
        return TaskConfig(**self.raw["eval"]["task"], mapping=self.raw["mapping"]["semseg"])

    def validate(self) -> None:
        try:
            self.scene()
            self.arch()
            for kind in ("semseg", "disparity", "instance"):
                self.estimator(kind)
            self.trainer()
            self.task()
            for name in self.raw["mapping"].values():
                load_mapping(name)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        ev = self.raw["eval"]
        if ev["alignment"] not in ("median", "least_squares"):
            raise ConfigError(f"eval.alignment must be 'median' or 'least_squares', got {ev['alignment']!r}")
        if int(self.raw["data"]["count"]) < 0:
            raise ConfigError("data.count must be >= 0")

    def resolved(self) -> dict:
        doc = copy.deepcopy(self.raw)
        doc["trainer"] = {k: v for k, v in self.trainer().to_dict().items() if k not in _MAPPING_FIELDS}
        return doc


def apply_overrides(doc: Mapping, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings (values parsed as YAML) onto ``doc``."""
    out = copy.deepcopy(dict(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        value: Any = yaml.safe_load(text)
        parts = key.strip().split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping value")
        node[parts[-1]] = value
    return out


def write_resolved(out_dir, config: ExperimentConfig | None, command: str, args: Mapping | None = None,
                   name: str = RESOLVED_NAME) -> Path:
    """Echo the resolved config, the command and the tool version next to a command's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"tool_version": __version__, "command": command, "args": dict(args or {}),
           "config": config.resolved() if config is not None else None}
    path = out / name
    path.write_text(yaml.safe_dump(doc, sort_keys=True))
    return path
