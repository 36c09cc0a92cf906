"""Loss terms: non-saturating GAN, VAE, cycle consistency, ground-truth preservation.

All losses are differentiable torch functions returning scalar tensors. GAN
losses take discriminator *probabilities* (a tensor or a list of per-scale
grids) and clamp them to ``[EPS, 1 - EPS]`` before taking logs.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

EPS = 1e-7


class AllIgnoredWarning(UserWarning):
    """Every pixel of a semantic target was ignore_index; the loss is 0."""


@dataclass(frozen=True)
class LossWeights:
    gan: float = 10.0
    kl: float = 0.1
    ll: float = 10.0
    semseg: float = 40.0
    disp: float = 0.4
    instseg: float = 1.0
    sem_consistency: float = 0.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {value}")

    def gt_weight(self, task: str) -> float:
        return {"S": self.semseg, "D": self.disp, "I": self.instseg}[task]


def _as_grids(p) -> list[torch.Tensor]:
    grids = list(p) if isinstance(p, (list, tuple)) else [p]
    if not grids or any(g.numel() == 0 for g in grids):
        raise ValueError("GAN loss needs non-empty discriminator outputs")
    return grids


def _mean_log(grids: list[torch.Tensor], complement: bool = False) -> torch.Tensor:
    # uniform average over scales of the per-scale patch means
    terms = []
    for g in grids:
        g = g.clamp(EPS, 1 - EPS)
        terms.append(torch.log1p(-g).mean() if complement else torch.log(g).mean())
    return torch.stack(terms).mean()


def gan_loss_discriminator(d_real, d_fake) -> torch.Tensor:
    """-1/2 E log D(x) - 1/2 E log(1 - D(G(z)))."""
    return -0.5 * _mean_log(_as_grids(d_real)) - 0.5 * _mean_log(_as_grids(d_fake), complement=True)


def gan_loss_generator(d_fake) -> torch.Tensor:
    """Non-saturating: -1/2 E log D(G(z))."""
    return -0.5 * _mean_log(_as_grids(d_fake))


def kl_to_standard_normal(mean) -> torch.Tensor:
    """KL(N(mean, I) || N(0, I)) = 1/2 sum mean^2, summed per sample, averaged over the batch.

    A 1-D input is treated as a single sample.
    """
    if not isinstance(mean, torch.Tensor):
        mean = mean.mean  # LatentCode
    if not torch.isfinite(mean).all():
        raise ValueError("latent mean contains non-finite values")
    if mean.dim() <= 1:
        return 0.5 * (mean**2).sum()
    return 0.5 * (mean**2).flatten(1).sum(1).mean()


def reconstruction_nll(recon: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Unit-scale Laplacian negative log-likelihood without constants, i.e. MAE."""
    return (recon - x).abs().mean()


def _latent(E, x):
    out = E(x)
    return out if isinstance(out, torch.Tensor) else out.mean


def _draw(mean: torch.Tensor, sample: bool, generator) -> torch.Tensor:
    if not sample:
        return mean
    return mean + torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)


def vae_loss(E: Callable, G: Callable, x: torch.Tensor, weights: LossWeights, sample: bool = True,
             generator: torch.Generator | None = None) -> torch.Tensor:
    """lambda_kl * KL(N(E(x), I) || N(0, I)) + lambda_ll * MAE(G(z), x)."""
    mean = _latent(E, x)
    recon = G(_draw(mean, sample, generator))
    return weights.kl * kl_to_standard_normal(mean) + weights.ll * reconstruction_nll(recon, x)


@dataclass
class CycleTerms:
    kl_first: torch.Tensor
    kl_second: torch.Tensor
    nll: torch.Tensor
    total: torch.Tensor


def cycle_terms(E_src, G_src, E_dst, G_dst, x, weights: LossWeights, sample: bool = True,
                generator: torch.Generator | None = None) -> CycleTerms:
    """Round trip x -> E_src -> G_dst -> E_dst -> G_src, with each term kept apart."""
    m1 = _latent(E_src, x)
    x_dst = G_dst(_draw(m1, sample, generator))
    m2 = _latent(E_dst, x_dst)
    x_back = G_src(_draw(m2, sample, generator))
    kl1 = kl_to_standard_normal(m1)
    kl2 = kl_to_standard_normal(m2)
    nll = reconstruction_nll(x_back, x)
    total = weights.kl * kl1 + weights.kl * kl2 + weights.ll * nll
    return CycleTerms(kl1, kl2, nll, total)


def cycle_consistency_loss(E_src, G_src, E_dst, G_dst, x, weights: LossWeights, sample: bool = True,
                           generator: torch.Generator | None = None) -> torch.Tensor:
    return cycle_terms(E_src, G_src, E_dst, G_dst, x, weights, sample, generator).total


def gt_semseg_loss(pred_logits: torch.Tensor, y, ignore_index: int = 255,
                   num_classes: int | None = None) -> torch.Tensor:
    """Mean cross-entropy over non-ignored pixels; 0 (with AllIgnoredWarning) if all are ignored."""
    if pred_logits.dim() != 4:
        raise ValueError(f"logits must be (batch, K, H, W), got {tuple(pred_logits.shape)}")
    k = pred_logits.shape[1]
    if num_classes is not None and num_classes != k:
        raise ValueError(f"logits have {k} classes but the target taxonomy has {num_classes}")
    y = torch.as_tensor(y, device=pred_logits.device).long()
    valid = y != ignore_index
    if not valid.any():
        warnings.warn("every pixel is ignored; semantic preservation loss is 0", AllIgnoredWarning, stacklevel=2)
        return pred_logits.sum() * 0.0
    if int(y[valid].max()) >= k or int(y[valid].min()) < 0:
        raise ValueError(f"label id outside [0, {k}) in semantic target")
    return F.cross_entropy(pred_logits, y, ignore_index=ignore_index)


def gt_disparity_loss(pred: torch.Tensor, gt, scale_const: float = 1.0, valid=None) -> torch.Tensor:
    """mean |scale_const * pred - gt| over valid pixels (default: gt > 0, i.e. non-sky)."""
    gt = torch.as_tensor(gt, dtype=pred.dtype, device=pred.device)
    if pred.shape != gt.shape:
        if pred.dim() == gt.dim() + 1 and pred.shape[1] == 1:
            pred = pred[:, 0]
        else:
            raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if not scale_const > 0:
        raise ValueError(f"scale_const must be positive, got {scale_const}")
    valid = gt > 0 if valid is None else torch.as_tensor(valid, device=pred.device).bool()
    if not valid.any():
        return pred.sum() * 0.0
    return (scale_const * pred - gt).abs()[valid].mean()


# -- instance segmentation -------------------------------------------------------

@dataclass
class InstanceTargets:
    labels: torch.Tensor  # (N,) target-taxonomy ids
    boxes: torch.Tensor  # (N, 4) x0, y0, x1, y1 in pixels
    masks: torch.Tensor  # (N, H, W) bool

    def __len__(self):
        return int(self.labels.shape[0])


@dataclass
class InstancePrediction:
    """Per-gt-instance head outputs (heads are teacher-forced on the gt boxes)."""

    class_logits: torch.Tensor  # (N, C)
    boxes: torch.Tensor  # (N, 4) pixels
    mask_logits: torch.Tensor  # (N, H, W)


def _check_boxes(boxes: torch.Tensor) -> None:
    if boxes.numel() and ((boxes[:, 2] <= boxes[:, 0]).any() or (boxes[:, 3] <= boxes[:, 1]).any()):
        raise ValueError("malformed box: x1 <= x0 or y1 <= y0")


def gt_instance_loss(pred: InstancePrediction, targets: InstanceTargets, keep: Sequence[bool],
                     image_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Mean over kept instances of class CE + box smooth-L1 + in-box mask BCE.

    Box coordinates enter the smooth-L1 normalised by the image size. Instances
    whose class maps to NULL (keep=False) contribute nothing, including gradient.
    """
    _check_boxes(targets.boxes)
    _check_boxes(pred.boxes.detach())
    keep = torch.as_tensor(list(keep), dtype=torch.bool)
    if keep.numel() != len(targets):
        raise ValueError("one keep flag per instance is required")
    ref = pred.mask_logits
    if not keep.any():
        return (pred.class_logits.sum() + pred.boxes.sum() + ref.sum()) * 0.0
    h, w = image_size or tuple(targets.masks.shape[-2:])
    scale = torch.tensor([w, h, w, h], dtype=pred.boxes.dtype, device=pred.boxes.device)
    idx = torch.nonzero(keep).flatten()
    total = []
    for i in idx.tolist():
        cls = F.cross_entropy(pred.class_logits[i:i + 1], targets.labels[i:i + 1].long())
        box = F.smooth_l1_loss(pred.boxes[i] / scale, targets.boxes[i].to(scale.dtype) / scale)
        x0, y0, x1, y1 = (int(v) for v in targets.boxes[i].tolist())
        logits = pred.mask_logits[i, y0:y1, x0:x1]
        mask_t = targets.masks[i, y0:y1, x0:x1].to(logits.dtype)
        mask = F.binary_cross_entropy_with_logits(logits, mask_t)
        total.append(cls + box + mask)
    return torch.stack(total).mean()


def instance_targets(instances, mapping, device=None) -> tuple[InstanceTargets, list[bool]]:
    """Build teacher targets and keep flags from ground-truth instances and a label mapping."""
    from .labels import instance_gradient_mask, map_instance_classes

    keep = instance_gradient_mask(instances, mapping)
    labels = torch.tensor(map_instance_classes(instances, mapping), dtype=torch.long, device=device)
    if instances:
        boxes = torch.tensor([list(i.box) for i in instances], dtype=torch.float32, device=device)
        masks = torch.as_tensor(np.stack([i.mask for i in instances]), device=device)
    else:
        boxes = torch.zeros((0, 4), device=device)
        masks = torch.zeros((0, 1, 1), dtype=torch.bool, device=device)
    return InstanceTargets(labels, boxes, masks), keep


def semantic_consistency_loss(f_S: Callable, x_S: torch.Tensor, translated: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of f_S on the translation against f_S's hard labels on the source image."""
    with torch.no_grad():
        targets = f_S(x_S).argmax(1)
    return F.cross_entropy(f_S(translated), targets)


# -- objectives ---------------------------------------------------------------

@dataclass
class Objective:
    """A weighted objective split into the part each player minimises."""

    generator: torch.Tensor
    discriminator: torch.Tensor
    terms: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def total(self) -> torch.Tensor:
        return self.generator + self.discriminator


def _weighted_gt(gt_losses: Mapping[str, torch.Tensor], weights: LossWeights) -> list[torch.Tensor]:
    return [weights.gt_weight(task) * value for task, value in gt_losses.items()]


def gantruth_objective(gan_d: torch.Tensor, gan_g: torch.Tensor, gt_losses: Mapping[str, torch.Tensor],
                       weights: LossWeights, sem_consistency: torch.Tensor | None = None) -> Objective:
    """lambda_GAN * L_GAN(E_S, G_T, D_T) + sum_t lambda_t * L_GT^t.

    ``sem_consistency`` adds the source-estimator consistency comparison term.
    """
    gen = weights.gan * gan_g
    for term in _weighted_gt(gt_losses, weights):
        gen = gen + term
    terms = {"gan_d_T": gan_d, "gan_g_T": gan_g, **{f"gt_{k}": v for k, v in gt_losses.items()}}
    if sem_consistency is not None:
        gen = gen + weights.sem_consistency * sem_consistency
        terms["sem_consistency"] = sem_consistency
    return Objective(gen, weights.gan * gan_d, terms)


def unit_objective(vae_S, vae_T, cc_S, cc_T, gan_d_S, gan_g_S, gan_d_T, gan_g_T, weights: LossWeights) -> Objective:
    """VAE_S + lambda_GAN L_GAN(S) + CC_S + VAE_T + lambda_GAN L_GAN(T) + CC_T."""
    gen = vae_S + weights.gan * gan_g_S + cc_S + vae_T + weights.gan * gan_g_T + cc_T
    disc = weights.gan * gan_d_S + weights.gan * gan_d_T
    terms = {"vae_S": vae_S, "vae_T": vae_T, "cc_S": cc_S, "cc_T": cc_T,
             "gan_d_S": gan_d_S, "gan_g_S": gan_g_S, "gan_d_T": gan_d_T, "gan_g_T": gan_g_T}
    return Objective(gen, disc, terms)


def unit_gantruth_objective(vae_S, vae_T, cc_S, cc_T, gan_d_S, gan_g_S, gan_d_T, gan_g_T,
                            gt_losses: Mapping[str, torch.Tensor], weights: LossWeights,
                            sem_consistency: torch.Tensor | None = None) -> Objective:
    """The UNIT objective plus the weighted ground-truth preservation terms."""
    obj = unit_objective(vae_S, vae_T, cc_S, cc_T, gan_d_S, gan_g_S, gan_d_T, gan_g_T, weights)
    gen = obj.generator
    for term in _weighted_gt(gt_losses, weights):
        gen = gen + term
    obj.terms.update({f"gt_{k}": v for k, v in gt_losses.items()})
    if sem_consistency is not None:
        gen = gen + weights.sem_consistency * sem_consistency
        obj.terms["sem_consistency"] = sem_consistency
    return Objective(gen, obj.discriminator, obj.terms)
