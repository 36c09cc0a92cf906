"""On-disk dataset layout and the in-memory sample container.

Layout::

    <root>/source/<id>.png             8-bit RGB
    <root>/target/<id>.png             8-bit RGB
    <root>/gt/<id>.semantic.png        8-bit class ids, 255 = ignore
    <root>/gt/<id>.disparity.png       16-bit, value = disparity * 256
    <root>/gt/<id>.instances.json      [{class_id, box, mask: RLE}]
    <root>/manifest.json
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .scene import (
    Instance,
    SceneConfig,
    SceneSpec,
    from_uint8,
    generate_scene,
    render_source,
    render_target,
    to_uint8,
)

FORMAT_VERSION = 1
DISPARITY_SCALE = 256.0
INCOMPLETE_MARKER = ".incomplete"
DOMAINS = ("source", "target")


class DatasetError(RuntimeError):
    pass


def sample_seeds(base_seed: int, count: int) -> list[int]:
    """Per-sample seeds; sample i's seed does not depend on ``count``."""
    seeds = []
    for i in range(count):
        word = np.random.SeedSequence(base_seed, spawn_key=(i,)).generate_state(1, np.uint64)[0]
        seeds.append(int(word) & 0x7FFF_FFFF_FFFF_FFFF)
    return seeds


def sample_id(i: int) -> str:
    return f"{i:06d}"


# -- codecs -------------------------------------------------------------------

def encode_disparity(disp: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(disp, dtype=np.float64) * DISPARITY_SCALE), 0, 65535).astype(np.uint16)


def decode_disparity(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float64) / DISPARITY_SCALE).astype(np.float32)


def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run lengths, alternating background/foreground, starting with background."""
    flat = np.asarray(mask, dtype=bool).ravel()
    changes = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    edges = np.concatenate([[0], changes, [flat.size]])
    counts = [int(n) for n in np.diff(edges)]
    if flat.size and flat[0]:
        counts.insert(0, 0)
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for n in rle["counts"]:
        if value:
            flat[pos:pos + n] = True
        pos += n
        value = not value
    if pos != h * w:
        raise DatasetError(f"RLE covers {pos} pixels, expected {h * w}")
    return flat.reshape(h, w)


def instances_to_json(instances: Sequence[Instance]) -> list[dict]:
    return [
        {"class_id": int(inst.class_id), "box": [int(v) for v in inst.box], "mask": rle_encode(inst.mask)}
        for inst in instances
    ]


def instances_from_json(records: list[dict]) -> list[Instance]:
    return [Instance(int(r["class_id"]), tuple(r["box"]), rle_decode(r["mask"])) for r in records]


def _write_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- in-memory container -----------------------------------------------------

@dataclass
class SceneDataset:
    """Arrays for a set of scenes. Images are float32 (N, 3, H, W) in [-1, 1].

    Disparities are stored codec-quantized so that an in-memory dataset and
    its on-disk copy are numerically identical.
    """

    ids: list[str]
    seeds: list[int]
    semantic: np.ndarray  # uint8 (N, H, W), source taxonomy
    disparity: np.ndarray  # float32 (N, H, W)
    instances: list[list[Instance]]
    images: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.semantic.shape[1:3])

    def domain(self, name: str) -> np.ndarray:
        if name not in self.images:
            raise DatasetError(f"dataset has no {name!r} images (has {sorted(self.images)})")
        return self.images[name]

    def subset(self, index: Iterable[int]) -> "SceneDataset":
        index = list(index)
        return SceneDataset(
            ids=[self.ids[i] for i in index],
            seeds=[self.seeds[i] for i in index],
            semantic=self.semantic[index],
            disparity=self.disparity[index],
            instances=[self.instances[i] for i in index],
            images={k: v[index] for k, v in self.images.items()},
            manifest=dict(self.manifest),
        )

    @classmethod
    def from_specs(cls, specs: Sequence[SceneSpec], domains: Sequence[str] = DOMAINS) -> "SceneDataset":
        domains = _check_domains(domains)
        if not specs:
            raise DatasetError("cannot build an in-memory dataset from zero scenes")
        h, w = specs[0].image_size
        n = len(specs)
        sem = np.empty((n, h, w), np.uint8)
        disp = np.empty((n, h, w), np.float32)
        images = {d: np.empty((n, 3, h, w), np.float32) for d in domains}
        instances = []
        for i, spec in enumerate(specs):
            src, gt = render_source(spec)
            sem[i] = gt.semantic
            disp[i] = decode_disparity(encode_disparity(gt.disparity))
            instances.append(gt.instances)
            if "source" in images:
                images["source"][i] = src
            if "target" in images:
                images["target"][i] = render_target(spec)
        return cls(
            ids=[sample_id(i) for i in range(n)],
            seeds=[s.seed for s in specs],
            semantic=sem,
            disparity=disp,
            instances=instances,
            images=images,
            manifest=_manifest(specs, domains),
        )

    @classmethod
    def generate(cls, base_seed: int, count: int, config: SceneConfig | None = None,
                 domains: Sequence[str] = DOMAINS) -> "SceneDataset":
        config = config or SceneConfig()
        specs = [generate_scene(s, config) for s in sample_seeds(base_seed, count)]
        ds = cls.from_specs(specs, domains)
        ds.manifest["scene_config"] = config.to_dict()
        ds.manifest["base_seed"] = int(base_seed)
        return ds


def _check_domains(domains) -> tuple[str, ...]:
    if isinstance(domains, str):
        domains = DOMAINS if domains == "both" else (domains,)
    domains = tuple(domains)
    bad = [d for d in domains if d not in DOMAINS]
    if bad or not domains:
        raise ValueError(f"domains must be a subset of {DOMAINS} or 'both', got {domains}")
    return domains


def _manifest(specs: Sequence[SceneSpec], domains: Sequence[str]) -> dict:
    if specs:
        image_size = list(specs[0].image_size)
        camera = dict(vars(specs[0].camera))
        style = dict(vars(specs[0].style))
    else:
        image_size, camera, style = None, None, None
    return {
        "version": FORMAT_VERSION,
        "image_size": image_size,
        "camera": camera,
        "style": style,
        "domains": list(domains),
        "samples": [{"id": sample_id(i), "seed": int(s.seed)} for i, s in enumerate(specs)],
    }


# -- disk IO ----------------------------------------------------------------

def write_dataset(path, specs: Sequence[SceneSpec], domains="both", extra_manifest: dict | None = None) -> dict:
    """Render ``specs`` and write them under ``path``; returns the manifest."""
    domains = _check_domains(domains)
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        marker = root / INCOMPLETE_MARKER
        marker.write_text("write in progress\n")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset at {root}: {exc}") from exc

    for sub in (*domains, "gt"):
        (root / sub).mkdir(exist_ok=True)
    for i, spec in enumerate(specs):
        sid = sample_id(i)
        src, gt = render_source(spec)
        if "source" in domains:
            _write_png(root / "source" / f"{sid}.png", to_uint8(src))
        if "target" in domains:
            _write_png(root / "target" / f"{sid}.png", to_uint8(render_target(spec)))
        _write_gt(root, sid, gt.semantic, encode_disparity(gt.disparity), gt.instances)

    manifest = _manifest(specs, domains)
    if extra_manifest:
        manifest.update(extra_manifest)
    _write_json(root / "manifest.json", manifest)
    marker.unlink()
    return manifest


def _write_gt(root: Path, sid: str, semantic, disparity_raw, instances) -> None:
    _write_png(root / "gt" / f"{sid}.semantic.png", np.asarray(semantic, dtype=np.uint8))
    _write_png(root / "gt" / f"{sid}.disparity.png", np.asarray(disparity_raw, dtype=np.uint16))
    _write_json(root / "gt" / f"{sid}.instances.json", instances_to_json(instances))


def write_samples(path, dataset: SceneDataset, images: dict[str, np.ndarray], manifest: dict) -> dict:
    """Write arbitrary images alongside ``dataset``'s ground truth (used for translated sets)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    marker = root / INCOMPLETE_MARKER
    marker.write_text("write in progress\n")
    for domain in images:
        (root / domain).mkdir(exist_ok=True)
    (root / "gt").mkdir(exist_ok=True)
    for i, sid in enumerate(dataset.ids):
        for domain, arr in images.items():
            _write_png(root / domain / f"{sid}.png", to_uint8(arr[i]))
        _write_gt(root, sid, dataset.semantic[i], encode_disparity(dataset.disparity[i]), dataset.instances[i])
    _write_json(root / "manifest.json", manifest)
    marker.unlink()
    return manifest


def read_manifest(path) -> dict:
    root = Path(path)
    if (root / INCOMPLETE_MARKER).exists():
        raise DatasetError(f"{root} is an incomplete dataset (partial write)")
    mf = root / "manifest.json"
    if not mf.exists():
        raise DatasetError(f"{root} has no manifest.json")
    manifest = json.loads(mf.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.get('version')}")
    return manifest


def read_dataset(path, domains: Sequence[str] | None = None) -> SceneDataset:
    root = Path(path)
    manifest = read_manifest(root)
    samples = manifest["samples"]
    if domains is None:
        domains = [d for d in DOMAINS if (root / d).is_dir()]
    ids = [s["id"] for s in samples]
    if not ids:
        h, w = manifest.get("image_size") or (0, 0)
        return SceneDataset([], [], np.zeros((0, h, w), np.uint8), np.zeros((0, h, w), np.float32), [],
                            {d: np.zeros((0, 3, h, w), np.float32) for d in domains}, manifest)
    sem = np.stack([_read_png(root / "gt" / f"{i}.semantic.png") for i in ids]).astype(np.uint8)
    disp = np.stack([decode_disparity(_read_png(root / "gt" / f"{i}.disparity.png")) for i in ids])
    inst = [instances_from_json(json.loads((root / "gt" / f"{i}.instances.json").read_text())) for i in ids]
    images = {d: np.stack([from_uint8(_read_png(root / d / f"{i}.png")) for i in ids]) for d in domains}
    return SceneDataset(ids, [int(s["seed"]) for s in samples], sem, disp, inst, images, manifest)


def dataset_hash(path) -> str:
    """SHA-256 over every file of a dataset directory (relative path + bytes, sorted)."""
    root = Path(path)
    digest = hashlib.sha256()
    for file in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = file.relative_to(root).as_posix()
        digest.update(rel.encode() + b"\0")
        digest.update(file.read_bytes())
    return digest.hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def is_writable_dir(path) -> bool:
    p = Path(path)
    while not p.exists():
        p = p.parent
    return os.access(p, os.W_OK)
