"""``gantruth`` command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont

from . import __version__
from .adaptation import adaptation_run
from .config import ConfigError, ExperimentConfig, write_resolved
from .dataset import (
    DatasetError,
    _read_png,
    dataset_hash,
    decode_disparity,
    file_sha256,
    read_dataset,
    read_manifest,
    sample_seeds,
    write_dataset,
)
from .estimators import KINDS, EstimatorTrainingError, estimate, load_bundle, pretrain_estimator, save_bundle
from .evaluation import ConfusionMatrix, SegmentationReport, disparity_to_depth, scale_aligned_abs_rel, write_report
from .labels import load_mapping, remap
from .scene import generate_scene, to_uint8
from .training import (
    TASK_KIND,
    Estimators,
    InvariantError,
    NonFiniteLossError,
    load_checkpoint,
    train,
    translate_dataset,
)

log = logging.getLogger("gantruth")

ESTIMATOR_FILE = "estimator.ckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> ExperimentConfig:
    return ExperimentConfig.load(getattr(args, "config", None), getattr(args, "set", None) or [])


def _estimator_path(path) -> Path:
    p = Path(path)
    return p / ESTIMATOR_FILE if p.is_dir() else p


def _args_dict(args) -> dict:
    # the output location is implied by where the echo lands; leaving it out keeps reruns into fresh dirs identical
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose", "out")}


def _ids_png(directory: Path, ids, suffix: str) -> list[Path]:
    paths = [directory / f"{i}{suffix}" for i in ids]
    missing = [p.name for p in paths if not p.exists()]
    if missing:
        raise DatasetError(f"{directory} lacks predictions for {len(missing)} sample(s): {', '.join(missing[:10])}")
    return paths


# -- commands -----------------------------------------------------------------------

def cmd_generate_data(args) -> None:
    overrides = {"count": args.count, "seed": args.seed, "domains": args.domains}
    cfg = ExperimentConfig.load(args.config, (args.set or []) + [f"data.{k}={v}" for k, v in overrides.items()
                                                                    if v is not None])
    data = cfg.raw["data"]
    scene_cfg = cfg.scene()
    specs = [generate_scene(s, scene_cfg) for s in sample_seeds(int(data["seed"]), int(data["count"]))]
    manifest = write_dataset(args.out, specs, data["domains"],
                             {"base_seed": int(data["seed"]), "scene_config": scene_cfg.to_dict()})
    write_resolved(args.out, cfg, "generate-data", _args_dict(args))
    print(f"wrote {len(manifest['samples'])} samples to {args.out} "
          f"(domains: {', '.join(manifest['domains'])}; image size: {manifest['image_size']}; "
          f"base seed: {data['seed']})")


def cmd_pretrain_estimator(args) -> None:
    cfg = _config(args)
    est_cfg = cfg.estimator(args.kind)
    ds = read_dataset(args.data, domains=[est_cfg.domain])
    bundle = pretrain_estimator(args.kind, ds, est_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = save_bundle(bundle, out / ESTIMATOR_FILE)
    write_resolved(out, cfg, "pretrain-estimator", _args_dict(args))
    prov = bundle.provenance
    print(f"{args.kind} estimator: held-out {prov['metric_name']} = {prov['metric']:.4f}; checksum {digest}")


def _load_estimators(cfg: ExperimentConfig, tasks) -> Estimators:
    est = cfg.raw["estimators"]
    by_task = {}
    for task in tasks:
        kind = TASK_KIND[task]
        path = est.get(kind)
        if not path:
            raise ConfigError(f"ground-truth task {task} is enabled but estimators.{kind} is not set")
        p = _estimator_path(path)
        if not p.exists():
            raise ConfigError(f"estimators.{kind}: no estimator checkpoint at {p}")
        by_task[task] = load_bundle(p)
    source = None
    trainer = cfg.trainer()
    if trainer.sem_consistency and trainer.weights.sem_consistency > 0:
        if not est.get("source_semseg"):
            raise ConfigError("semantic consistency is enabled but estimators.source_semseg is not set")
        source = load_bundle(_estimator_path(est["source_semseg"]))
    return Estimators(by_task, source)


def cmd_train(args) -> None:
    cfg = _config(args)
    trainer = cfg.trainer()
    data = cfg.raw["data"]
    for key in ("source", "target"):
        if not data[key]:
            raise ConfigError(f"data.{key} must name a dataset directory for training")
    # pre-flight: everything is validated before the first step
    estimators = _load_estimators(cfg, trainer.active_tasks())
    source = read_dataset(data["source"], domains=["source"])
    target = read_dataset(data["target"], domains=["target"])
    state = load_checkpoint(args.resume, cfg.arch()) if args.resume else None
    out = Path(args.out)
    write_resolved(out, cfg, "train", _args_dict(args))
    result = train(trainer, source, target, estimators, cfg.arch(), out_dir=out, state=state)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {trainer.model} to step {result.state.step}; final checkpoint {result.checkpoint}")
    if last:
        print("last step: " + ", ".join(f"{k}={v:.4g}" for k, v in sorted(last.items()) if k != "step"))


def cmd_translate(args) -> None:
    manifest = translate_dataset(args.checkpoint, args.data, args.out)
    write_resolved(args.out, None, "translate", _args_dict(args))
    print(f"translated {len(manifest['samples'])} samples into {args.out} "
          f"(checkpoint sha256 {manifest['translation']['checkpoint_sha256'][:16]})")


def _class_names(mapping) -> list[str]:
    names = mapping.target_names()
    return [names.get(i, f"class_{i}") for i in range(mapping.num_classes)]


def cmd_evaluate_segmentation(args) -> None:
    cfg = _config(args)
    mapping = load_mapping(cfg.raw["mapping"]["semseg"])
    ds = read_dataset(args.data, domains=[args.domain] if args.estimator else [])
    truth = remap(ds.semantic, mapping)
    cm = ConfusionMatrix(mapping.num_classes, mapping.ignore_index)
    if args.estimator:
        path = _estimator_path(args.estimator)
        bundle = load_bundle(path)
        if bundle.kind != "semseg":
            raise ConfigError(f"{path} is a {bundle.kind} estimator, not semseg")
        images = ds.domain(args.domain)
        with torch.no_grad():
            for s in range(0, len(ds), 50):
                pred = estimate(bundle, torch.from_numpy(images[s:s + 50])).argmax(1).numpy()
                cm.add(pred, truth[s:s + 50])
        pred_hash = file_sha256(path)
    else:
        pred_root = Path(args.pred)
        if (pred_root / "manifest.json").exists():
            pred_ds = read_dataset(pred_root, domains=[])
            if pred_ds.ids != ds.ids:
                raise DatasetError("prediction dataset sample ids differ from the evaluated dataset")
            cm.add(remap(pred_ds.semantic, mapping), truth)
            pred_hash = dataset_hash(pred_root)
        else:
            for i, p in enumerate(_ids_png(pred_root, ds.ids, ".png")):
                cm.add(_read_png(p), truth[i])
            pred_hash = dataset_hash(pred_root)
    report = SegmentationReport.from_confusion("segmentation", cm, _class_names(mapping),
                                               dataset_hash=dataset_hash(args.data), checkpoint_hash=pred_hash)
    write_report(args.out, [report.to_dict()], {"mapping": mapping.name, "tool_version": __version__})
    write_resolved(args.out, cfg, "evaluate-segmentation", _args_dict(args))
    print(f"mIOU = {'undefined' if np.isnan(report.miou) else f'{report.miou:.4f}'} over {report.pixel_count} pixels")


def cmd_evaluate_depth(args) -> None:
    cfg = _config(args)
    method = cfg.raw["eval"]["alignment"]
    ds = read_dataset(args.data, domains=[args.domain] if args.estimator else [])
    gt = ds.disparity.astype(np.float64)
    if args.estimator:
        path = _estimator_path(args.estimator)
        bundle = load_bundle(path)
        if bundle.kind != "disparity":
            raise ConfigError(f"{path} is a {bundle.kind} estimator, not disparity")
        images = ds.domain(args.domain)
        with torch.no_grad():
            pred = np.concatenate([estimate(bundle, torch.from_numpy(images[s:s + 50])).numpy()
                                   for s in range(0, len(ds), 50)] or [np.zeros_like(gt)])
        pred_hash = file_sha256(path)
    else:
        pred_root = Path(args.pred)
        if (pred_root / "manifest.json").exists():
            pred_ds = read_dataset(pred_root, domains=[])
            if pred_ds.ids != ds.ids:
                raise DatasetError("prediction dataset sample ids differ from the evaluated dataset")
            pred = pred_ds.disparity
        else:
            pred = np.stack([decode_disparity(_read_png(p)) for p in _ids_png(pred_root, ds.ids, ".disparity.png")])
        pred_hash = dataset_hash(pred_root)
    valid = gt > 0
    pred = np.asarray(pred, dtype=np.float64)
    # depth = f*B / disparity; the f*B product is absorbed by the scale alignment
    value = scale_aligned_abs_rel(disparity_to_depth(np.where(valid, pred, 1.0)), disparity_to_depth(gt), valid,
                                  method)
    row = {"name": "depth", "abs_rel_scale_aligned": value, "alignment": method, "pixel_count": int(valid.sum()),
           "dataset_hash": dataset_hash(args.data), "checkpoint_hash": pred_hash}
    write_report(args.out, [row], {"tool_version": __version__})
    write_resolved(args.out, cfg, "evaluate-depth", _args_dict(args))
    print(f"scale-aligned abs-rel ({method}) = {value:.4f} over {row['pixel_count']} pixels")


def cmd_adapt_eval(args) -> None:
    cfg = _config(args)
    translated = read_dataset(args.translated, domains=["target"])
    source = read_dataset(args.reference_source, domains=None)
    if "source" not in source.images:
        raise DatasetError(f"{args.reference_source} has no source-domain images")
    val = read_dataset(args.target_val, domains=["target"])
    if args.target_train:
        target_train = read_dataset(args.target_train, domains=["target"])
    elif "target" in source.images:
        target_train = source
    else:
        raise ConfigError("the target-ceiling run needs --target-train (or a reference source with target images)")
    rows = adaptation_run(translated, val, cfg.task(), source=source, target_train=target_train)
    hashes = {"translated": dataset_hash(args.translated), "reference_source": dataset_hash(args.reference_source),
              "target_val": dataset_hash(args.target_val)}
    ckpt = read_manifest(args.translated).get("translation", {}).get("checkpoint_sha256", "")
    out_rows = []
    for r in rows:
        r.checkpoint_hash = ckpt if r.name == "translated" else ""
        r.dataset_hash = hashes["translated"] if r.name == "translated" else (
            hashes["reference_source"] if r.name == "source-only" else dataset_hash(args.target_train or
                                                                                    args.reference_source))
        out_rows.append(r.to_dict())
    write_report(args.out, out_rows, {"target_val_hash": hashes["target_val"], "tool_version": __version__})
    write_resolved(args.out, cfg, "adapt-eval", _args_dict(args))
    for r in rows:
        print(f"{r.name:>15}: mIOU {r.miou:.4f}")


def _grid_source(spec: str) -> tuple[Path, str | None]:
    path, _, domain = spec.partition(":")
    if Path(spec).exists():
        return Path(spec), None
    return Path(path), domain or None


def cmd_grid(args) -> None:
    cfg = _config(args)
    rows = args.rows if args.rows is not None else int(cfg.raw["eval"]["grid_rows"])
    seed = args.seed if args.seed is not None else int(cfg.raw["eval"]["grid_seed"])
    columns = []
    for spec in args.datasets:
        path, domain = _grid_source(spec)
        manifest = read_manifest(path)
        domain = domain or manifest["domains"][0]
        if domain not in manifest["domains"]:
            raise DatasetError(f"{path} has no {domain!r} images (has {manifest['domains']})")
        columns.append((path, domain, [s["id"] for s in manifest["samples"]]))
    all_ids = set().union(*(set(ids) for _, _, ids in columns))
    problems = []
    for path, _, ids in columns:
        missing = sorted(all_ids - set(ids))
        if missing:
            problems.append(f"{path} is missing ids {', '.join(missing[:20])}{' ...' if len(missing) > 20 else ''}")
    if problems:
        raise DatasetError("sample ids differ across datasets: " + "; ".join(problems))
    ids = sorted(all_ids)
    if rows < 1 or rows > len(ids):
        raise ConfigError(f"--rows must be between 1 and {len(ids)}")
    chosen = sorted(np.random.default_rng(seed).choice(len(ids), size=rows, replace=False).tolist())
    chosen = [ids[i] for i in chosen]

    cells = [[np.asarray(Image.open(path / domain / f"{sid}.png").convert("RGB")) for path, domain, _ in columns]
             for sid in chosen]
    h, w = cells[0][0].shape[:2]
    scale = max(1, 128 // max(h, w))
    ch, cw = h * scale, w * scale
    label_w, head_h, pad = 64, 16, 2
    width = label_w + len(columns) * (cw + pad)
    height = head_h + rows * (ch + pad)
    canvas = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for c, (path, domain, _) in enumerate(columns):
        draw.text((label_w + c * (cw + pad) + 2, 2), f"{path.name}:{domain}"[: cw // 6], fill=(0, 0, 0), font=font)
    for r, sid in enumerate(chosen):
        y = head_h + r * (ch + pad)
        draw.text((2, y + ch // 2 - 6), sid, fill=(0, 0, 0), font=font)
        for c, cell in enumerate(cells[r]):
            tile = Image.fromarray(cell).resize((cw, ch), Image.NEAREST)
            canvas.paste(tile, (label_w + c * (cw + pad), y))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out, format="PNG")
    write_resolved(out.parent, cfg, "grid", _args_dict(args), name=out.stem + ".config.yaml")
    print(f"wrote {rows}x{len(columns)} grid to {out} (rows: {', '.join(chosen)})")


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gantruth", description="Ground-truth preserving image translation experiments.")
    parser.add_argument("--version", action="version", version=f"gantruth {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key, e.g. trainer.steps=100 (repeatable)")
        return p

    p = with_config(sub.add_parser("generate-data", help="render a toy dataset"))
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--domains", choices=["source", "target", "both"])
    p.set_defaults(func=cmd_generate_data)

    p = with_config(sub.add_parser("pretrain-estimator", help="train and freeze a target-domain estimator"))
    p.add_argument("--kind", required=True, choices=list(KINDS))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_estimator)

    p = with_config(sub.add_parser("train", help="train a translation model"))
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a source dataset with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    for name, func, helptext in (("evaluate-segmentation", cmd_evaluate_segmentation, "mIOU report"),
                                 ("evaluate-depth", cmd_evaluate_depth, "scale-aligned abs-rel report")):
        p = with_config(sub.add_parser(name, help=helptext))
        p.add_argument("--data", required=True, help="dataset holding the ground truth")
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--pred", help="dataset or directory of per-sample prediction PNGs")
        src.add_argument("--estimator", "--task-run", dest="estimator", help="estimator checkpoint to run")
        p.add_argument("--domain", default="target", choices=["source", "target"],
                       help="images fed to --estimator")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = with_config(sub.add_parser("adapt-eval", help="source-only / translated / target-ceiling mIOU"))
    p.add_argument("--translated", required=True)
    p.add_argument("--reference-source", required=True)
    p.add_argument("--target-val", required=True)
    p.add_argument("--target-train", help="target-domain training set for the ceiling run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt_eval)

    p = with_config(sub.add_parser("grid", help="qualitative image grid"))
    p.add_argument("--datasets", nargs="+", required=True, metavar="DIR[:DOMAIN]")
    p.add_argument("--rows", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"gantruth: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"gantruth: config error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, EstimatorTrainingError, NonFiniteLossError, InvariantError, ValueError, OSError,
            RuntimeError) as exc:
        print(f"gantruth: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
