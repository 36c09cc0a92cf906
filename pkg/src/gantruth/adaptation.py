"""Two-step adaptation: train a fresh task network on a labelled set, score it on target validation data."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import SceneDataset
from .estimators import EstimatorConfig, _init, build_net, train_network
from .evaluation import ConfusionMatrix, SegmentationReport
from .labels import LabelMapping, load_mapping, remap


@dataclass(frozen=True)
class TaskConfig:
    steps: int = 3000
    batch_size: int = 4
    lr: float = 2e-3
    channels: int = 16
    seed: int = 0
    mapping: str = "toy-source->toy-target"


def train_task_net(dataset: SceneDataset, domain: str, config: TaskConfig) -> torch.nn.Module:
    """Fresh segmentation network of the estimator family, trained on ``dataset``'s ``domain`` images."""
    mapping = load_mapping(config.mapping)
    torch.manual_seed(config.seed)
    net = build_net("semseg", mapping.num_classes, config.channels)
    _init(net, config.seed)
    est_cfg = EstimatorConfig(channels=config.channels, steps=config.steps, batch_size=config.batch_size,
                              lr=config.lr, seed=config.seed, domain=domain, mapping=config.mapping)
    train_network("semseg", net, dataset, mapping, est_cfg)
    return net


@torch.no_grad()
def segmentation_confusion(net: torch.nn.Module, dataset: SceneDataset, domain: str, mapping: LabelMapping,
                           batch_size: int = 50) -> ConfusionMatrix:
    net.eval()
    cm = ConfusionMatrix(mapping.num_classes, mapping.ignore_index)
    labels = remap(dataset.semantic, mapping)
    images = dataset.domain(domain)
    for s in range(0, len(dataset), batch_size):
        pred = net(torch.from_numpy(images[s:s + batch_size])).argmax(1).numpy()
        cm.add(pred, labels[s:s + batch_size])
    return cm


def _class_names(mapping: LabelMapping) -> list[str]:
    names = mapping.target_names()
    return [names.get(i, f"class_{i}") for i in range(mapping.num_classes)]


def adaptation_run(translated: SceneDataset | None, target_val: SceneDataset, config: TaskConfig | None = None,
                   source: SceneDataset | None = None, target_train: SceneDataset | None = None,
                   translated_domain: str = "target") -> list[SegmentationReport]:
    """mIOU on ``target_val`` of task nets trained on each supplied set.

    Rows come back in the order source-only, translated, target-ceiling (absent inputs are skipped).
    Translated sets keep their images in the ``target`` folder, so ``translated_domain`` defaults to it.
    """
    config = config or TaskConfig()
    mapping = load_mapping(config.mapping)
    for name, ds in (("translated", translated), ("source", source), ("target_train", target_train),
                     ("target_val", target_val)):
        if ds is not None and len(ds) and int(ds.semantic.max()) >= 255:
            raise ValueError(f"{name} labels are not in the source taxonomy expected by {mapping.name}")
    remap(np.unique(target_val.semantic), mapping)  # raises on taxonomy mismatch
    runs = [("source-only", source, "source"), ("translated", translated, translated_domain),
            ("target-ceiling", target_train, "target")]
    rows = []
    for name, ds, domain in runs:
        if ds is None:
            continue
        remap(np.unique(ds.semantic), mapping)
        net = train_task_net(ds, domain, config)
        cm = segmentation_confusion(net, target_val, "target", mapping)
        rows.append(SegmentationReport.from_confusion(name, cm, _class_names(mapping)))
    return rows


def task_config_dict(config: TaskConfig) -> dict:
    return dataclasses.asdict(config)
