"""Byte-reproducible checkpoint archives: a zip of ``.npy`` arrays plus ``manifest.json``."""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _info(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def save_archive(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_info("manifest.json"), json.dumps(manifest, indent=1, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_info(f"arrays/{name}.npy"), buf.getvalue())
    tmp.replace(path)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                arrays[name[len("arrays/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, manifest


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=True)


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, np.ndarray], list]:
    """Flatten an optimizer state dict into arrays plus JSON-able param groups."""
    sd = opt.state_dict()
    arrays = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            arrays[f"{prefix}/state/{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy().copy()
    return arrays, sd["param_groups"]


def load_optimizer_arrays(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], param_groups: list,
                          prefix: str) -> None:
    state: dict[int, dict] = {}
    head = f"{prefix}/state/"
    for name, value in arrays.items():
        if name.startswith(head):
            idx, key = name[len(head):].split("/", 1)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(value.copy())
    opt.load_state_dict({"state": state, "param_groups": param_groups})
