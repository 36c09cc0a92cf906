"""Training loops for the simple GAN, GANtruth, UNIT and UNIT+GANtruth families.

Each iteration alternates one discriminator update (real targets vs. detached
translations) with one update of encoders/decoders on the generator side of
the objective. Ground-truth preservation terms are evaluated by frozen
estimators on the sampled translation F_{S->T}(x_S).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from . import archive
from .dataset import SceneDataset, file_sha256, read_manifest, write_samples
from .estimators import EstimatorBundle, checksum, estimate, guard_trainable
from .labels import LabelMapping, load_mapping, remap
from .losses import (
    LossWeights,
    cycle_terms,
    gan_loss_discriminator,
    gan_loss_generator,
    gantruth_objective,
    gt_disparity_loss,
    gt_instance_loss,
    gt_semseg_loss,
    instance_targets,
    kl_to_standard_normal,
    reconstruction_nll,
    semantic_consistency_loss,
    unit_gantruth_objective,
    unit_objective,
)
from .nets import ArchConfig, TranslatorPair, build_discriminators, build_translator_pair

log = logging.getLogger(__name__)

MODELS = ("simple_gan", "gantruth", "unit", "unit_gantruth")
TASKS = ("S", "D", "I")
TASK_KIND = {"S": "semseg", "D": "disparity", "I": "instance"}
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, step: int):
        super().__init__(f"non-finite value in loss term {term!r} at step {step}")
        self.term = term
        self.step = step


class InvariantError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    model: str = "gantruth"
    tasks: tuple[str, ...] = ("S", "D")
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 1
    disparity_scale: float = 1.0
    semseg_mapping: str = "toy-source->toy-target"
    instance_mapping: str = "toy-source->toy-target"
    sem_consistency: bool = False
    single_threaded: bool = True
    log_wall_time: bool = False  # wall-clock timings make otherwise identical logs differ

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            raise ValueError(f"unknown ground-truth task(s) {bad}; expected a subset of {TASKS}")
        if self.model in ("simple_gan", "unit") and self.tasks:
            raise ValueError(f"model {self.model} takes no ground-truth tasks (got {list(self.tasks)})")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if not self.disparity_scale > 0:
            raise ValueError("disparity_scale must be positive")

    @property
    def bidirectional(self) -> bool:
        return self.model in ("unit", "unit_gantruth")

    def active_tasks(self) -> tuple[str, ...]:
        """Enabled tasks with a non-zero weight; a zero weight is the same as disabling the task."""
        return tuple(t for t in TASKS if t in self.tasks and self.weights.gt_weight(t) > 0)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainerConfig":
        d = dict(d)
        if isinstance(d.get("weights"), Mapping):
            d["weights"] = LossWeights(**d["weights"])
        if "tasks" in d:
            tasks = d["tasks"]
            if isinstance(tasks, str):
                tasks = [t for t in tasks.replace("+", ",").split(",") if t]
            d["tasks"] = tuple(tasks)
        return cls(**d)


@dataclass
class TrainingState:
    config: TrainerConfig
    arch: ArchConfig
    nets: TranslatorPair
    D_S: torch.nn.Module | None
    D_T: torch.nn.Module
    opt_G: torch.optim.Optimizer
    opt_D: torch.optim.Optimizer
    noise_rng: torch.Generator
    data_rng: torch.Generator
    step: int = 0
    metrics: list[dict] = field(default_factory=list)

    def generator_modules(self) -> dict[str, torch.nn.Module]:
        return self.nets.networks()

    def discriminator_modules(self) -> dict[str, torch.nn.Module]:
        return {k: v for k, v in (("D_S", self.D_S), ("D_T", self.D_T)) if v is not None}

    def named_networks(self) -> dict[str, torch.nn.Module]:
        return {**self.generator_modules(), **self.discriminator_modules()}


def _unique(params):
    seen, out = set(), []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def init_state(config: TrainerConfig, arch: ArchConfig | None = None) -> TrainingState:
    arch = arch or ArchConfig()
    arch = dataclasses.replace(arch, seed=config.seed)
    torch.manual_seed(config.seed)
    nets = build_translator_pair(arch, config.bidirectional)
    d_s, d_t = build_discriminators(arch, config.bidirectional)
    betas = (config.beta1, config.beta2)
    g_params = guard_trainable(_unique(p for m in nets.networks().values() for p in m.parameters()))
    d_params = guard_trainable(_unique(p for m in (d_s, d_t) if m is not None for p in m.parameters()))
    return TrainingState(
        config=config,
        arch=arch,
        nets=nets,
        D_S=d_s,
        D_T=d_t,
        opt_G=torch.optim.Adam(g_params, lr=config.lr, betas=betas),
        opt_D=torch.optim.Adam(d_params, lr=config.lr, betas=betas),
        noise_rng=torch.Generator().manual_seed(config.seed * 2 + 1),
        data_rng=torch.Generator().manual_seed(config.seed * 2 + 2),
    )


@dataclass
class SourceBatch:
    x: torch.Tensor
    semantic: torch.Tensor | None = None  # remapped to the estimator taxonomy
    disparity: torch.Tensor | None = None
    instances: list | None = None  # per image: (InstanceTargets, keep flags)


@dataclass
class Estimators:
    """Frozen estimators by task letter, plus the optional source-domain f_S."""

    by_task: dict[str, EstimatorBundle] = field(default_factory=dict)
    source_semseg: EstimatorBundle | None = None

    def checksums(self) -> dict[str, str]:
        out = {t: checksum(b) for t, b in sorted(self.by_task.items())}
        if self.source_semseg is not None:
            out["f_S"] = checksum(self.source_semseg)
        return out


def check_estimators(config: TrainerConfig, estimators: Estimators | None) -> None:
    estimators = estimators or Estimators()
    for task in config.active_tasks():
        bundle = estimators.by_task.get(task)
        if bundle is None:
            raise ValueError(f"ground-truth task {task} is enabled but no {TASK_KIND[task]} estimator was given")
        if bundle.kind != TASK_KIND[task]:
            raise ValueError(f"estimator for task {task} has kind {bundle.kind}, expected {TASK_KIND[task]}")
        if not bundle.frozen:
            raise ValueError(f"estimator for task {task} is not frozen")
    if config.sem_consistency and config.weights.sem_consistency > 0 and estimators.source_semseg is None:
        raise ValueError("semantic consistency is enabled but no source-domain estimator was given")


def _finite(step: int, values: Mapping[str, torch.Tensor]) -> None:
    for name, v in values.items():
        if not torch.isfinite(v).all():
            raise NonFiniteLossError(name, step)


def _gt_losses(config: TrainerConfig, estimators: Estimators, translated: torch.Tensor, batch: SourceBatch,
               semseg_mapping: LabelMapping) -> dict[str, torch.Tensor]:
    out = {}
    for task in config.active_tasks():
        bundle = estimators.by_task[task]
        if task == "S":
            out["S"] = gt_semseg_loss(estimate(bundle, translated), batch.semantic, semseg_mapping.ignore_index,
                                      bundle.num_classes)
        elif task == "D":
            out["D"] = gt_disparity_loss(estimate(bundle, translated), batch.disparity, config.disparity_scale)
        else:
            boxes = [t.boxes for t, _ in batch.instances]
            labels = [t.labels for t, _ in batch.instances]
            preds = estimate(bundle, translated, boxes=boxes, labels=labels)
            per_image = [gt_instance_loss(p, t, k) for p, (t, k) in zip(preds, batch.instances)]
            out["I"] = torch.stack(per_image).mean()
    return out


def _step(opt: torch.optim.Optimizer, loss: torch.Tensor) -> None:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()


def train_step(state: TrainingState, batch_S: SourceBatch, x_T: torch.Tensor,
               estimators: Estimators | None = None) -> dict[str, float]:
    """One alternating update. Returns the per-term metrics recorded for this step."""
    cfg = state.config
    estimators = estimators or Estimators()
    w = cfg.weights
    semseg_mapping = load_mapping(cfg.semseg_mapping)
    nets = state.nets
    g = state.noise_rng
    step = state.step
    x_S = batch_S.x
    for m in state.named_networks().values():
        m.train()

    m_S = nets.E_S(x_S).mean
    z_S = m_S + torch.randn(m_S.shape, generator=g)
    x_ST = nets.G_T(z_S)
    if cfg.bidirectional:
        m_T = nets.E_T(x_T).mean
        z_T = m_T + torch.randn(m_T.shape, generator=g)
        x_TS = nets.G_S(z_T)

    # phase 1: discriminators on real vs detached translations
    gan_d_T = gan_loss_discriminator(state.D_T(x_T), state.D_T(x_ST.detach()))
    d_terms = {"gan_d_T": gan_d_T}
    if cfg.bidirectional:
        d_terms["gan_d_S"] = gan_loss_discriminator(state.D_S(x_S), state.D_S(x_TS.detach()))
    _finite(step, d_terms)
    _step(state.opt_D, w.gan * sum(d_terms.values()))

    # phase 2: encoders / decoders
    gan_g_T = gan_loss_generator(state.D_T(x_ST))
    gt = _gt_losses(cfg, estimators, x_ST, batch_S, semseg_mapping)
    sem_cons = None
    if cfg.sem_consistency and w.sem_consistency > 0:
        sem_cons = semantic_consistency_loss(lambda x: estimate(estimators.source_semseg, x), x_S, x_ST)

    if cfg.bidirectional:
        gan_g_S = gan_loss_generator(state.D_S(x_TS))
        x_SS = nets.G_S(z_S)
        x_TT = nets.G_T(z_T)
        vae_S = w.kl * kl_to_standard_normal(m_S) + w.ll * reconstruction_nll(x_SS, x_S)
        vae_T = w.kl * kl_to_standard_normal(m_T) + w.ll * reconstruction_nll(x_TT, x_T)
        cc_S = _cycle_from(nets.E_T, nets.G_S, m_S, x_ST, x_S, w, g)
        cc_T = _cycle_from(nets.E_S, nets.G_T, m_T, x_TS, x_T, w, g)
        if cfg.model == "unit":
            obj = unit_objective(vae_S, vae_T, cc_S, cc_T, d_terms["gan_d_S"], gan_g_S, gan_d_T, gan_g_T, w)
        else:
            obj = unit_gantruth_objective(vae_S, vae_T, cc_S, cc_T, d_terms["gan_d_S"], gan_g_S, gan_d_T,
                                          gan_g_T, gt, w, sem_cons)
    else:
        obj = gantruth_objective(gan_d_T, gan_g_T, gt, w, sem_cons)
    _finite(step, obj.terms)
    _finite(step, {"generator_total": obj.generator})
    _step(state.opt_G, obj.generator)

    state.step += 1
    record = {k: float(v.detach()) for k, v in obj.terms.items()}
    record["generator_total"] = float(obj.generator.detach())
    record["discriminator_total"] = float((w.gan * sum(d_terms.values())).detach())
    return record


def _cycle_from(E_dst, G_src, m_src, x_dst, x, w: LossWeights, g) -> torch.Tensor:
    """Cycle term reusing the already-sampled first translation x_dst = G_dst(z ~ N(m_src, I))."""
    m2 = E_dst(x_dst).mean
    x_back = G_src(m2 + torch.randn(m2.shape, generator=g))
    return w.kl * kl_to_standard_normal(m_src) + w.kl * kl_to_standard_normal(m2) + w.ll * reconstruction_nll(x_back, x)


# -- data ---------------------------------------------------------------------

class TrainingData:
    """Source images with ground truth, and unpaired target images, sampled by a torch generator."""

    def __init__(self, source: SceneDataset, target: SceneDataset, config: TrainerConfig,
                 source_domain: str = "source", target_domain: str = "target"):
        if len(source) == 0 or len(target) == 0:
            raise ValueError("training needs non-empty source and target datasets")
        if source.image_size != target.image_size:
            raise ValueError(f"source {source.image_size} and target {target.image_size} image sizes differ")
        self.source = source
        self.x_S = torch.from_numpy(source.domain(source_domain))
        self.x_T = torch.from_numpy(target.domain(target_domain))
        self.semantic = torch.from_numpy(remap(source.semantic, load_mapping(config.semseg_mapping)).astype(np.int64))
        self.disparity = torch.from_numpy(source.disparity)
        self.instance_mapping = load_mapping(config.instance_mapping)
        self.need_instances = "I" in config.active_tasks()
        self.batch_size = config.batch_size

    def sample(self, g: torch.Generator) -> tuple[SourceBatch, torch.Tensor]:
        i_s = torch.randint(len(self.x_S), (self.batch_size,), generator=g)
        i_t = torch.randint(len(self.x_T), (self.batch_size,), generator=g)
        inst = None
        if self.need_instances:
            inst = [instance_targets(self.source.instances[i], self.instance_mapping) for i in i_s.tolist()]
        return SourceBatch(self.x_S[i_s], self.semantic[i_s], self.disparity[i_s], inst), self.x_T[i_t]


# -- invariants -----------------------------------------------------------------

def check_shared_weights(state: TrainingState) -> None:
    for a, b in state.nets.shared_parameter_pairs():
        if a.data_ptr() != b.data_ptr() or not torch.equal(a, b):
            raise InvariantError("shared encoder/decoder parameters diverged between domains")


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(state: TrainingState, path, extra: dict | None = None) -> str:
    arrays = {}
    for name, module in state.named_networks().items():
        arrays.update(archive.module_arrays(module, f"{name}/"))
    og, pg_g = archive.optimizer_arrays(state.opt_G, "opt_G")
    od, pg_d = archive.optimizer_arrays(state.opt_D, "opt_D")
    arrays.update(og)
    arrays.update(od)
    arrays["rng/noise"] = state.noise_rng.get_state().numpy().copy()
    arrays["rng/data"] = state.data_rng.get_state().numpy().copy()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "arch_config": state.arch.to_dict(),
        "trainer_config": state.config.to_dict(),
        "step": state.step,
        "param_groups": {"opt_G": pg_g, "opt_D": pg_d},
        **(extra or {}),
    }
    archive.save_archive(path, arrays, manifest)
    return file_sha256(path)


def load_checkpoint(path, arch: ArchConfig | None = None) -> TrainingState:
    arrays, manifest = archive.load_archive(path)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    saved_arch = ArchConfig.from_dict(manifest["arch_config"])
    if arch is not None and dataclasses.replace(arch, seed=saved_arch.seed) != saved_arch:
        raise ValueError(f"architecture mismatch: checkpoint has {saved_arch}, requested {arch}")
    config = TrainerConfig.from_dict(manifest["trainer_config"])
    state = init_state(config, saved_arch)
    for name, module in state.named_networks().items():
        archive.load_module_arrays(module, arrays, f"{name}/")
    archive.load_optimizer_arrays(state.opt_G, arrays, manifest["param_groups"]["opt_G"], "opt_G")
    archive.load_optimizer_arrays(state.opt_D, arrays, manifest["param_groups"]["opt_D"], "opt_D")
    state.noise_rng.set_state(torch.from_numpy(arrays["rng/noise"].copy()))
    state.data_rng.set_state(torch.from_numpy(arrays["rng/data"].copy()))
    state.step = int(manifest["step"])
    return state


# -- driver -----------------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainingState
    metrics: list[dict]
    checkpoint: Path | None = None
    estimator_checksums: dict[str, str] = field(default_factory=dict)


def train(config: TrainerConfig, source: SceneDataset, target: SceneDataset, estimators: Estimators | None = None,
          arch: ArchConfig | None = None, out_dir=None, state: TrainingState | None = None,
          until_step: int | None = None) -> TrainResult:
    """Run (or resume) training up to ``until_step`` (default: config.steps).

    With ``out_dir`` set, checkpoints land in ``out_dir/checkpoints`` at the configured cadence
    plus ``final.ckpt``, and every step's metrics are appended to ``out_dir/metrics.jsonl``.
    """
    estimators = estimators or Estimators()
    check_estimators(config, estimators)
    if config.single_threaded:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    state = state or init_state(config, arch)
    if state.arch.image_size != source.image_size:
        raise ValueError(f"arch image_size {state.arch.image_size} does not match data {source.image_size}")
    data = TrainingData(source, target, config)
    before = estimators.checksums()
    until = config.steps if until_step is None else until_step

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_file = open(out / "metrics.jsonl", "a")
    t0 = time.perf_counter()
    last_ckpt = None
    try:
        while state.step < until:
            batch_S, x_T = data.sample(state.data_rng)
            record = train_step(state, batch_S, x_T, estimators)
            entry = {"step": state.step, **record}
            if config.log_wall_time:
                entry["wall_time"] = round(time.perf_counter() - t0, 3)
            state.metrics.append(entry)
            if log_file is not None and (state.step % config.log_every == 0 or state.step == until):
                log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                _verify(state, estimators, before)
                if out is not None:
                    last_ckpt = out / "checkpoints" / f"step_{state.step:07d}.ckpt"
                    save_checkpoint(state, last_ckpt)
    finally:
        if log_file is not None:
            log_file.close()
    _verify(state, estimators, before)
    if out is not None:
        last_ckpt = out / "checkpoints" / "final.ckpt"
        save_checkpoint(state, last_ckpt)
    return TrainResult(state, state.metrics, last_ckpt, estimators.checksums())


def _verify(state: TrainingState, estimators: Estimators, before: dict[str, str]) -> None:
    check_shared_weights(state)
    if estimators.checksums() != before:
        raise InvariantError("a frozen estimator changed during training")


# -- translation of a whole dataset --------------------------------------------------

@torch.no_grad()
def translate_images(state: TrainingState, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Deterministic F_{S->T} (latent noise off) over an array of images."""
    nets = state.nets
    nets.eval()
    out = []
    for s in range(0, len(images), batch_size):
        x = torch.from_numpy(images[s:s + batch_size])
        out.append(nets.G_T(nets.E_S(x).mean).numpy())
    if not out:
        return np.zeros_like(images)
    return np.concatenate(out).astype(np.float32)


def translate_dataset(checkpoint, source_path, out_path, source_domain: str = "source") -> dict:
    """Write F_{S->T}(x_S) for every sample to ``out_path/target`` with the ground truth copied over."""
    from .dataset import read_dataset

    state = load_checkpoint(checkpoint)
    manifest = read_manifest(source_path)
    ds = read_dataset(source_path, domains=[source_domain])
    if len(ds) and tuple(ds.image_size) != tuple(state.arch.image_size):
        raise ValueError(f"dataset image size {ds.image_size} does not match checkpoint {state.arch.image_size}")
    translated = translate_images(state, ds.domain(source_domain))
    out_manifest = dict(manifest)
    out_manifest["domains"] = ["target"]
    out_manifest["translation"] = {
        "checkpoint_sha256": file_sha256(checkpoint),
        "model": state.config.model,
        "step": state.step,
        "source_domain": source_domain,
    }
    write_samples(out_path, ds, {"target": translated}, out_manifest)
    _copy_gt_bytes(Path(source_path), Path(out_path), ds.ids)
    return out_manifest


def _copy_gt_bytes(src: Path, dst: Path, ids) -> None:
    # ground truth is carried over verbatim, not re-encoded
    for sid in ids:
        for suffix in (".semantic.png", ".disparity.png", ".instances.json"):
            (dst / "gt" / f"{sid}{suffix}").write_bytes((src / "gt" / f"{sid}{suffix}").read_bytes())


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def mean_or_nan(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else math.nan
