"""Frozen label estimators (f_T, and f_S for the consistency comparison).

Small encoder-decoder networks with skip connections for semantic
segmentation and disparity, and a shared backbone with teacher-forced
per-instance heads for instance segmentation. They are trained supervised on
toy data and then frozen: parameters are excluded from autograd, marked, and
checksummed.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import archive
from .dataset import SceneDataset
from .evaluation import ConfusionMatrix, abs_rel, miou
from .labels import LabelMapping, load_mapping, remap
from .losses import InstancePrediction, instance_targets

log = logging.getLogger(__name__)

KINDS = ("semseg", "disparity", "instance")
FROZEN_ATTR = "_gantruth_frozen"


class EstimatorTrainingError(RuntimeError):
    pass


class FrozenParameterError(RuntimeError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    channels: int = 16
    steps: int = 1500
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 0
    val_count: int = 200
    domain: str = "target"
    mapping: str = "toy-source->toy-target"
    floor: float | None = None  # None -> per-kind default

    def resolved_floor(self, kind: str) -> float:
        if self.floor is not None:
            return self.floor
        return {"semseg": 0.80, "disparity": 0.10, "instance": 0.30}[kind]


def _conv(c_in, c_out, stride=1):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True))


class EncoderDecoder(nn.Module):
    """Two-level U-Net-style trunk. A normalised row-coordinate channel is appended to the input."""

    def __init__(self, out_channels: int | None, channels: int = 16):
        super().__init__()
        c = channels
        self.enc1 = _conv(4, c)
        self.enc2 = _conv(c, 2 * c, stride=2)
        self.enc3 = nn.Sequential(_conv(2 * c, 4 * c, stride=2), _conv(4 * c, 4 * c))
        self.dec2 = _conv(6 * c, 2 * c)
        self.dec1 = _conv(3 * c, c)
        self.head = nn.Conv2d(c, out_channels, 1) if out_channels else None
        self.feature_channels = c

    def features(self, x):
        n, _, h, w = x.shape
        rows = torch.linspace(-1.0, 1.0, h, dtype=x.dtype, device=x.device).view(1, 1, h, 1).expand(n, 1, h, w)
        e1 = self.enc1(torch.cat([x, rows], 1))
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([F.interpolate(e3, size=e2.shape[-2:], mode="nearest"), e2], 1))
        return self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:], mode="nearest"), e1], 1))

    def forward(self, x):
        return self.head(self.features(x))


class SegmentationNet(EncoderDecoder):
    def __init__(self, num_classes: int, channels: int = 16):
        super().__init__(num_classes, channels)


class DisparityNet(EncoderDecoder):
    def __init__(self, channels: int = 16):
        super().__init__(1, channels)

    def forward(self, x):
        return F.softplus(super().forward(x))[:, 0]


class InstanceNet(nn.Module):
    """Backbone + heads evaluated on given (teacher) boxes."""

    def __init__(self, num_classes: int, channels: int = 16):
        super().__init__()
        self.backbone = EncoderDecoder(None, channels)
        c = channels
        self.mask_head = nn.Conv2d(c, num_classes, 1)
        self.cls_head = nn.Linear(c, num_classes)
        self.box_head = nn.Linear(c + 4, 4)
        self.num_classes = num_classes

    def forward(self, x, boxes: list[torch.Tensor], labels: list[torch.Tensor]) -> list[InstancePrediction]:
        feats = self.backbone.features(x)
        mask_all = self.mask_head(feats)
        h, w = x.shape[-2:]
        scale = torch.tensor([w, h, w, h], dtype=x.dtype, device=x.device)
        out = []
        for b in range(x.shape[0]):
            bx = boxes[b].to(x.dtype)
            n = bx.shape[0]
            if n == 0:
                out.append(InstancePrediction(x.new_zeros((0, self.num_classes)), x.new_zeros((0, 4)),
                                              x.new_zeros((0, h, w))))
                continue
            pooled = []
            for i in range(n):
                x0, y0, x1, y1 = (int(v) for v in bx[i].tolist())
                pooled.append(feats[b, :, y0:y1, x0:x1].mean((1, 2)))
            pooled = torch.stack(pooled)
            logits = self.cls_head(pooled)
            deltas = self.box_head(torch.cat([pooled, bx / scale], 1))
            size = torch.stack([bx[:, 2] - bx[:, 0], bx[:, 3] - bx[:, 1]] * 2, 1)
            pred_boxes = bx + 0.1 * torch.tanh(deltas) * size
            lab = labels[b].clamp(0, self.num_classes - 1)
            masks = mask_all[b][lab]
            out.append(InstancePrediction(logits, pred_boxes, masks))
        return out


@dataclass
class EstimatorBundle:
    kind: str
    net: nn.Module
    taxonomy: list[str]
    provenance: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    frozen: bool = False

    @property
    def num_classes(self) -> int:
        return len(self.taxonomy)

    def __call__(self, x, **kw):
        return estimate(self, x, **kw)


def build_net(kind: str, num_classes: int, channels: int) -> nn.Module:
    if kind == "semseg":
        return SegmentationNet(num_classes, channels)
    if kind == "disparity":
        return DisparityNet(channels)
    if kind == "instance":
        return InstanceNet(num_classes, channels)
    raise ValueError(f"unknown estimator kind {kind!r}; expected one of {KINDS}")


def _taxonomy(mapping: LabelMapping) -> list[str]:
    names = mapping.target_names()
    return [names.get(i, f"class_{i}") for i in range(mapping.num_classes)]


def estimate(bundle: EstimatorBundle, x: torch.Tensor, boxes=None, labels=None):
    """Task prediction: logits (B, K, H, W), disparity (B, H, W), or per-image InstancePrediction lists."""
    if not bundle.frozen:
        raise RuntimeError("estimate() requires a frozen bundle")
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[-1] % 4 or x.shape[-2] % 4 or min(x.shape[-2:]) < 4:
        raise ValueError(f"image batch of shape {tuple(x.shape)} is incompatible with the estimator")
    if bundle.kind == "instance":
        if boxes is None or labels is None:
            raise ValueError("instance estimation needs teacher boxes and labels")
        return bundle.net(x, boxes, labels)
    return bundle.net(x)


def freeze(bundle: EstimatorBundle) -> EstimatorBundle:
    """Sever gradients into the parameters and switch to evaluation mode (idempotent)."""
    bundle.net.eval()
    for p in bundle.net.parameters():
        p.requires_grad_(False)
        setattr(p, FROZEN_ATTR, True)
    bundle.frozen = True
    return bundle


def checksum(bundle: EstimatorBundle) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(bundle.net.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def guard_trainable(params) -> list[torch.nn.Parameter]:
    """Reject frozen estimator parameters before they reach an optimizer."""
    params = list(params)
    for p in params:
        if getattr(p, FROZEN_ATTR, False):
            raise FrozenParameterError("frozen estimator parameters cannot be optimised")
    return params


def _manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


# -- training ---------------------------------------------------------------

def _batch_instances(ds: SceneDataset, idx, mapping):
    boxes, labels, targets, keeps = [], [], [], []
    for i in idx:
        t, k = instance_targets(ds.instances[i], mapping)
        boxes.append(t.boxes)
        labels.append(t.labels)
        targets.append(t)
        keeps.append(k)
    return boxes, labels, targets, keeps


def _instance_loss(preds, targets, keeps):
    from .losses import gt_instance_loss

    losses = [gt_instance_loss(p, t, k) for p, t, k in zip(preds, targets, keeps) if any(k)]
    if not losses:
        return None
    return torch.stack(losses).mean()


def _mask_bce(preds, targets, keeps) -> list[float]:
    out = []
    for p, t, k in zip(preds, targets, keeps):
        for i, keep in enumerate(k):
            if keep:
                x0, y0, x1, y1 = (int(v) for v in t.boxes[i].tolist())
                out.append(float(F.binary_cross_entropy_with_logits(
                    p.mask_logits[i, y0:y1, x0:x1], t.masks[i, y0:y1, x0:x1].float())))
    return out


def train_network(kind: str, net: nn.Module, ds: SceneDataset, mapping: LabelMapping, cfg: EstimatorConfig,
                  steps: int | None = None) -> None:
    """Supervised training in place; deterministic given cfg.seed."""
    images = torch.from_numpy(ds.domain(cfg.domain))
    labels = torch.from_numpy(remap(ds.semantic, mapping).astype(np.int64))
    disp = torch.from_numpy(ds.disparity)
    g = torch.Generator().manual_seed(cfg.seed + 7919)
    opt = torch.optim.Adam(guard_trainable(net.parameters()), lr=cfg.lr)
    n = len(ds)
    steps = cfg.steps if steps is None else steps
    net.train()
    for step in range(steps):
        idx = torch.randint(n, (min(cfg.batch_size, n),), generator=g)
        x = images[idx]
        if kind == "semseg":
            loss = F.cross_entropy(net(x), labels[idx], ignore_index=mapping.ignore_index)
        elif kind == "disparity":
            pred = net(x)
            gt = disp[idx]
            valid = gt > 0
            # relative error on scene pixels; absolute error pulls sky towards 0
            loss = ((pred - gt).abs()[valid] / gt[valid]).mean()
            if (~valid).any():
                loss = loss + pred[~valid].abs().mean()
        else:
            boxes, labs, targets, keeps = _batch_instances(ds, idx.tolist(), mapping)
            loss = _instance_loss(net(x, boxes, labs), targets, keeps)
            if loss is None:
                continue
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % 250 == 0:
            log.debug("%s step %d loss %.4f", kind, step, loss.item())
    net.eval()


@torch.no_grad()
def validation_metric(kind: str, net: nn.Module, ds: SceneDataset, mapping: LabelMapping, domain: str = "target",
                      batch_size: int = 32) -> float:
    """semseg: mIOU; disparity: abs-rel on non-sky pixels; instance: mean in-box mask BCE."""
    net.eval()
    images = ds.domain(domain)
    if kind == "semseg":
        cm = ConfusionMatrix(mapping.num_classes, mapping.ignore_index)
        labels = remap(ds.semantic, mapping)
        for s in range(0, len(ds), batch_size):
            pred = net(torch.from_numpy(images[s:s + batch_size])).argmax(1).numpy()
            cm.add(pred, labels[s:s + batch_size])
        return miou(cm)
    if kind == "disparity":
        preds = np.concatenate([net(torch.from_numpy(images[s:s + batch_size])).numpy()
                                for s in range(0, len(ds), batch_size)])
        return abs_rel(preds, ds.disparity)
    bces = []
    for s in range(0, len(ds), batch_size):
        idx = list(range(s, min(s + batch_size, len(ds))))
        boxes, labs, targets, keeps = _batch_instances(ds, idx, mapping)
        bces += _mask_bce(net(torch.from_numpy(images[idx]), boxes, labs), targets, keeps)
    return float(np.mean(bces)) if bces else float("nan")


def _passes(kind: str, value: float, floor: float) -> bool:
    if kind == "semseg":
        return value >= floor
    return value <= floor


def pretrain_estimator(kind: str, dataset: SceneDataset, config: EstimatorConfig | None = None) -> EstimatorBundle:
    """Train on all but the last ``val_count`` samples, validate on those, then freeze."""
    config = config or EstimatorConfig()
    if kind not in KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}; expected one of {KINDS}")
    if dataset is None or len(dataset) == 0:
        raise EstimatorTrainingError("cannot pretrain an estimator on an empty dataset")
    if len(dataset) <= config.val_count:
        raise EstimatorTrainingError(f"dataset of {len(dataset)} samples leaves nothing after {config.val_count} held out")
    mapping = load_mapping(config.mapping)
    torch.manual_seed(config.seed)
    net = build_net(kind, mapping.num_classes, config.channels)
    _init(net, config.seed)
    n_train = len(dataset) - config.val_count
    train = dataset.subset(range(n_train))
    val = dataset.subset(range(n_train, len(dataset)))
    train_network(kind, net, train, mapping, config)
    metric = validation_metric(kind, net, val, mapping, config.domain)
    floor = config.resolved_floor(kind)
    metric_name = {"semseg": "mIOU", "disparity": "abs_rel", "instance": "mask_bce"}[kind]
    log.info("%s estimator: held-out %s = %.4f (floor %.3f)", kind, metric_name, metric, floor)
    if not _passes(kind, metric, floor):
        raise EstimatorTrainingError(
            f"{kind} estimator missed its floor: held-out {metric_name} = {metric:.4f}, required "
            f"{'>=' if kind == 'semseg' else '<='} {floor} within {config.steps} steps"
        )
    bundle = EstimatorBundle(
        kind=kind,
        net=net,
        taxonomy=_taxonomy(mapping),
        provenance={
            "dataset_manifest_sha256": _manifest_hash(dataset.manifest),
            "steps": config.steps,
            "metric_name": metric_name,
            "metric": metric,
            "seed": config.seed,
        },
        config=dataclasses.asdict(config),
    )
    return freeze(bundle)


def _init(net: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()


# -- persistence ------------------------------------------------------------

def save_bundle(bundle: EstimatorBundle, path) -> str:
    digest = checksum(bundle)
    manifest = {
        "kind": bundle.kind,
        "taxonomy": bundle.taxonomy,
        "provenance": bundle.provenance,
        "config": bundle.config,
        "checksum": digest,
    }
    archive.save_archive(path, archive.module_arrays(bundle.net), manifest)
    return digest


def load_bundle(path) -> EstimatorBundle:
    arrays, manifest = archive.load_archive(path)
    cfg = manifest.get("config", {})
    net = build_net(manifest["kind"], len(manifest["taxonomy"]), cfg.get("channels", 16))
    archive.load_module_arrays(net, arrays)
    bundle = freeze(EstimatorBundle(manifest["kind"], net, list(manifest["taxonomy"]), manifest["provenance"], cfg))
    if checksum(bundle) != manifest["checksum"]:
        raise ValueError(f"estimator checkpoint {path} fails its checksum")
    return bundle
