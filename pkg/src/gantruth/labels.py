"""Class-id mappings between label taxonomies, with NULL/ignore handling."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

DEFAULT_IGNORE_INDEX = 255

_BUILTIN_FILES = {
    "synthia->cityscapes": "synthia_to_cityscapes.yaml",
    "synthia->coco": "synthia_to_coco.yaml",
    "toy-source->toy-target": "toy_source_to_toy_target.yaml",
}


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class MappingEntry:
    source_id: int
    target_id: int | None
    source_name: str = ""
    target_name: str = ""


@dataclass(frozen=True)
class LabelMapping:
    name: str
    entries: tuple[MappingEntry, ...]
    ignore_index: int = DEFAULT_IGNORE_INDEX
    num_target_classes: int | None = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.source_id in seen:
                raise MappingError(f"{self.name}: duplicate source id {e.source_id}")
            seen.add(e.source_id)
            if e.target_id is not None and e.target_id == self.ignore_index:
                raise MappingError(f"{self.name}: target id {e.target_id} collides with ignore_index")
            if e.target_id is not None and e.target_id < 0:
                raise MappingError(f"{self.name}: negative target id {e.target_id}")
        if self.num_target_classes is not None:
            top = max((e.target_id for e in self.entries if e.target_id is not None), default=-1)
            if top >= self.num_target_classes:
                raise MappingError(f"{self.name}: target id {top} >= num_target_classes {self.num_target_classes}")

    def as_dict(self) -> dict[int, int | None]:
        return {e.source_id: e.target_id for e in self.entries}

    def target_ids(self) -> set[int]:
        return {e.target_id for e in self.entries if e.target_id is not None}

    def materialize(self) -> dict[int, int]:
        """source id -> target id, with NULL replaced by ignore_index."""
        return {e.source_id: (self.ignore_index if e.target_id is None else e.target_id) for e in self.entries}

    def target_names(self) -> dict[int, str]:
        names = {}
        for e in self.entries:
            if e.target_id is not None:
                names.setdefault(e.target_id, e.target_name)
        return names

    @property
    def num_classes(self) -> int:
        if self.num_target_classes is not None:
            return self.num_target_classes
        return max(self.target_ids(), default=-1) + 1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "ignore_index": self.ignore_index,
            "num_target_classes": self.num_target_classes,
            "entries": [
                {"source_id": e.source_id, "source_name": e.source_name,
                 "target_id": e.target_id, "target_name": e.target_name}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LabelMapping":
        try:
            entries = tuple(
                MappingEntry(
                    source_id=int(e["source_id"]),
                    target_id=None if e.get("target_id") is None else int(e["target_id"]),
                    source_name=str(e.get("source_name", "")),
                    target_name=str(e.get("target_name", "")),
                )
                for e in doc["entries"]
            )
            return cls(
                name=str(doc["name"]),
                entries=entries,
                ignore_index=int(doc.get("ignore_index", DEFAULT_IGNORE_INDEX)),
                num_target_classes=doc.get("num_target_classes"),
            )
        except (KeyError, TypeError) as exc:
            raise MappingError(f"malformed mapping document: {exc}") from exc

    @classmethod
    def identity(cls, ids: Sequence[int], ignore_index: int = DEFAULT_IGNORE_INDEX) -> "LabelMapping":
        return cls("identity", tuple(MappingEntry(int(i), int(i)) for i in ids), ignore_index)


def builtin_names() -> list[str]:
    return sorted(_BUILTIN_FILES)


def _normalize(name: str) -> str:
    key = name.strip().lower().replace("→", "->").replace("_to_", "->").replace("_", "-")
    return key


def load_mapping(name_or_path) -> LabelMapping:
    """Load a built-in mapping by name, or a mapping file by path."""
    if isinstance(name_or_path, LabelMapping):
        return name_or_path
    text = None
    key = _normalize(str(name_or_path))
    if key in _BUILTIN_FILES:
        text = resources.files("gantruth.mappings").joinpath(_BUILTIN_FILES[key]).read_text()
    else:
        path = Path(name_or_path)
        if path.suffix in (".yaml", ".yml", ".json") and path.is_file():
            text = path.read_text()
    if text is None:
        raise MappingError(f"unknown mapping {name_or_path!r}; built-ins are {builtin_names()}")
    return LabelMapping.from_dict(yaml.safe_load(text))


def remap(labels: np.ndarray, mapping: LabelMapping) -> np.ndarray:
    """Map class ids; NULL-mapped and already-ignored pixels become ``ignore_index``."""
    labels = np.asarray(labels)
    table = mapping.materialize()
    table.setdefault(mapping.ignore_index, mapping.ignore_index)
    present = np.unique(labels)
    unknown = [int(v) for v in present if int(v) not in table]
    if unknown:
        raise MappingError(f"{mapping.name}: unmapped class id(s) {unknown}")
    if present.size and present.min() >= 0 and present.max() < 65536:
        lut = np.zeros(int(present.max()) + 1, dtype=np.int64)
        for k, v in table.items():
            if k < lut.size:
                lut[k] = v
        out = lut[labels]
    else:
        out = np.vectorize(table.__getitem__, otypes=[np.int64])(labels) if labels.size else labels.astype(np.int64)
    dtype = np.uint8 if mapping.ignore_index <= 255 else np.int64
    return out.astype(dtype)


def instance_gradient_mask(instances, mapping: LabelMapping) -> list[bool]:
    """Keep flag per instance: False iff its class maps to NULL."""
    table = mapping.as_dict()
    flags = []
    for inst in instances:
        cid = int(getattr(inst, "class_id", inst))
        if cid not in table:
            raise MappingError(f"{mapping.name}: unmapped instance class id {cid}")
        flags.append(table[cid] is not None)
    return flags


def map_instance_classes(instances, mapping: LabelMapping) -> list[int]:
    """Target class id per instance; NULL classes come back as ``ignore_index``."""
    table = mapping.materialize()
    out = []
    for inst in instances:
        cid = int(getattr(inst, "class_id", inst))
        if cid not in table:
            raise MappingError(f"{mapping.name}: unmapped instance class id {cid}")
        out.append(table[cid])
    return out
