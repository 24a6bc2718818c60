"""Checkpoint directories.

Layout::

    dir/manifest.json
    dir/params/<name>.rmt
    dir/optim/<name>.exp_avg.rmt, <name>.exp_avg_sq.rmt   (when optimizer state is saved)
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import torch

from . import rmt
from .errors import ConfigurationError, LoadError
from .model import ModelConfig, RawMamba

FORMAT = "rawmamba-checkpoint/1"
_MOMENTS = ("exp_avg", "exp_avg_sq")


@dataclass
class Checkpoint:
    model: RawMamba
    manifest: dict

    @property
    def epoch(self) -> int:
        return self.manifest["epoch"]

    @property
    def mode(self) -> str:
        return self.manifest["model_config"]["mode"]


def _tensor_state(model: RawMamba) -> dict[str, torch.Tensor]:
    return {name: t for name, t in model.state_dict().items()}


def save(path, model: RawMamba, *, epoch: int, seed: int, optimizer: torch.optim.Optimizer | None = None,
         extra: dict | None = None) -> Path:
    """Write a checkpoint directory atomically (built in a temp dir, then renamed)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    (tmp / "params").mkdir()
    state = _tensor_state(model)
    tensors = {}
    for name, t in state.items():
        rmt.save(tmp / "params" / f"{name}.rmt", t.detach().cpu().numpy())
        tensors[name] = list(t.shape)
    manifest = {
        "format": FORMAT,
        "epoch": epoch,
        "seed": seed,
        "dtype": str(next(iter(state.values())).dtype).removeprefix("torch."),
        "model_config": model.cfg.to_json(),
        "tensors": tensors,
        "optimizer": None,
    }
    if optimizer is not None:
        (tmp / "optim").mkdir()
        names = {id(p): n for n, p in model.named_parameters()}
        steps = {}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                name = names[id(p)]
                for key in _MOMENTS:
                    rmt.save(tmp / "optim" / f"{name}.{key}.rmt", st[key].detach().cpu().numpy())
                steps[name] = int(st["step"])
        manifest["optimizer"] = {"steps": steps, "lr": optimizer.param_groups[0]["lr"]}
    if extra:
        manifest.update(extra)
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise LoadError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load(path, optimizer_factory=None) -> Checkpoint | tuple[Checkpoint, torch.optim.Optimizer]:
    """Rebuild the model from a checkpoint directory.

    With ``optimizer_factory`` (a callable taking the model's parameters), the
    saved Adam moments are restored too and ``(checkpoint, optimizer)`` is returned.
    """
    path = Path(path)
    manifest = read_manifest(path)
    try:
        cfg = ModelConfig.from_json(manifest["model_config"])
    except (TypeError, KeyError, ConfigurationError) as exc:
        raise LoadError(f"{path}: invalid model config in manifest: {exc}") from exc
    dtype = getattr(torch, manifest.get("dtype", "float32"))
    model = RawMamba(cfg).to(dtype)
    state = {}
    for name, ref in _tensor_state(model).items():
        file = path / "params" / f"{name}.rmt"
        if not file.exists():
            raise LoadError(f"checkpoint {path} is missing tensor {name!r}")
        arr = rmt.load(file)
        if list(arr.shape) != list(ref.shape):
            raise LoadError(f"tensor {name!r} has shape {arr.shape}, model expects {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arr)
    model.load_state_dict(state)
    model.eval()
    ckpt = Checkpoint(model, manifest)
    if optimizer_factory is None:
        return ckpt
    optimizer = optimizer_factory(model.parameters())
    saved = manifest.get("optimizer") or {"steps": {}}
    for name, p in model.named_parameters():
        if name not in saved["steps"]:
            continue
        st = {"step": torch.tensor(float(saved["steps"][name]))}
        for key in _MOMENTS:
            file = path / "optim" / f"{name}.{key}.rmt"
            if not file.exists():
                raise LoadError(f"checkpoint {path} is missing optimizer tensor {name}.{key}")
            st[key] = torch.from_numpy(rmt.load(file))
        optimizer.state[p] = st
    return ckpt, optimizer
