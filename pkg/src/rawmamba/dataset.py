"""On-disk synthetic dataset and batch construction.

Layout::

    root/meta.json
    root/<split>/scene_%04d/frame_%02d.raw.rmt    (4, H, W) float32
    root/<split>/scene_%04d/frame_%02d.srgb.rmt   (3, H, W) float32
    root/<split>/scene_%04d/flow_%02d.rmt         (2, H, W) float32
    root/<split>/scene_%04d/mask.rmt              (H, W) float32, image-mode sampling mask
    root/<split>/scene_%04d/meta.json
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import rmt
from .errors import ConfigurationError, LoadError
from .isp import IspParams, IspRanges, SceneSpec, isp_forward, random_isp_params, sample_metadata, sampling_stride, synth_raw
from .ume import MetadataPair


@dataclass
class DatasetConfig:
    scenes: int = 80
    test_fraction: float = 0.2
    frames: int = 5
    size: int = 32
    seed: int = 0
    sampling_rate: float = 0.015
    ranges: IspRanges = field(default_factory=IspRanges)

    def split_counts(self) -> dict[str, int]:
        if self.scenes < 1:
            raise ConfigurationError("dataset needs at least one scene")
        if not 0 <= self.test_fraction < 1:
            raise ConfigurationError("test fraction must lie in [0, 1)")
        n_test = int(round(self.scenes * self.test_fraction))
        return {"train": self.scenes - n_test, "test": n_test}

    def to_json(self) -> dict:
        d = asdict(self)
        d["ranges"] = asdict(self.ranges)
        return d


@dataclass
class Scene:
    name: str
    raw: np.ndarray  # (T, 4, H, W)
    srgb: np.ndarray  # (T, 3, H, W)
    flow: np.ndarray  # (T, 2, H, W)
    mask: np.ndarray  # (H, W)
    meta: dict


def scene_seed(master: int, index: int) -> int:
    """Independent per-scene seed derived from the master seed and the global scene index."""
    return int(np.random.SeedSequence([master, index]).generate_state(1, dtype=np.uint64)[0])


def build_scene(cfg: DatasetConfig, index: int) -> Scene:
    seed = scene_seed(cfg.seed, index)
    rng = np.random.default_rng(seed)
    isp = random_isp_params(rng, cfg.ranges)
    vel = tuple(float(v) for v in rng.uniform(-cfg.ranges.velocity, cfg.ranges.velocity, size=2))
    spec = SceneSpec(seed=seed, frames=cfg.frames, height=cfg.size, width=cfg.size, velocity=vel)
    raw, flow = synth_raw(spec)
    srgb = np.stack([isp_forward(f, isp) for f in raw])
    mask, _ = sample_metadata(raw[0], cfg.sampling_rate)
    meta = {
        "index": index,
        "seed": seed,
        "isp": isp.to_json(),
        "velocity": list(vel),
        "frames": cfg.frames,
        "shape": [cfg.size, cfg.size],
        "sampling_rate": cfg.sampling_rate,
        "sampling_stride": sampling_stride(cfg.sampling_rate),
        "mask": "mask.rmt",
    }
    f32 = lambda a: a.astype(np.float32)  # noqa: E731
    return Scene(f"scene_{index:04d}", f32(raw), f32(srgb), f32(flow), f32(mask), meta)


def write_scene(scene: Scene, split_dir: Path) -> None:
    """Write one scene atomically: build it in a temp dir, then rename into place."""
    tmp = Path(tempfile.mkdtemp(prefix=f".{scene.name}.", dir=split_dir))
    for t in range(scene.raw.shape[0]):
        rmt.save(tmp / f"frame_{t:02d}.raw.rmt", scene.raw[t])
        rmt.save(tmp / f"frame_{t:02d}.srgb.rmt", scene.srgb[t])
        rmt.save(tmp / f"flow_{t:02d}.rmt", scene.flow[t])
    rmt.save(tmp / "mask.rmt", scene.mask)
    (tmp / "meta.json").write_text(json.dumps(scene.meta, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, split_dir / scene.name)


def make_dataset(root, cfg: DatasetConfig, overwrite: bool = False) -> Path:
    root = Path(root)
    counts = cfg.split_counts()
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise ConfigurationError(f"{root} exists and is not empty; refusing to overwrite (--force)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    index = 0
    membership: dict[str, list[str]] = {}
    for split, count in counts.items():
        split_dir = root / split
        split_dir.mkdir()
        membership[split] = []
        for _ in range(count):
            scene = build_scene(cfg, index)
            write_scene(scene, split_dir)
            membership[split].append(scene.name)
            index += 1
    meta = {"format": "rawmamba-synthetic/1", "config": cfg.to_json(), "splits": membership}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return root


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read scene metadata in {path}: {exc}") from exc
    T = meta["frames"]
    raw = np.stack([rmt.load(path / f"frame_{t:02d}.raw.rmt") for t in range(T)])
    srgb = np.stack([rmt.load(path / f"frame_{t:02d}.srgb.rmt") for t in range(T)])
    flow = np.stack([rmt.load(path / f"flow_{t:02d}.rmt") for t in range(T)])
    mask = rmt.load(path / "mask.rmt")
    return Scene(path.name, raw, srgb, flow, mask, meta)


def load_split(root, split: str) -> list[Scene]:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise LoadError(f"dataset split not found: {split_dir}")
    return [load_scene(p) for p in sorted(split_dir.iterdir()) if p.is_dir() and p.name.startswith("scene_")]


# --- batches -----------------------------------------------------------------


@dataclass
class Batch:
    x: torch.Tensor  # (n, 3, T, H, W) sRGB
    y: torch.Tensor  # (n, 4, T, H, W) RAW
    meta: MetadataPair
    names: list[str]


def video_batch(scenes: list[Scene], dtype=torch.float32) -> Batch:
    """Whole clips; the first frame pair is the reference, with ground-truth flow."""
    x = torch.from_numpy(np.stack([s.srgb for s in scenes])).transpose(1, 2).to(dtype)
    y = torch.from_numpy(np.stack([s.raw for s in scenes])).transpose(1, 2).to(dtype)
    flow = torch.from_numpy(np.stack([s.flow for s in scenes])).to(dtype)
    meta = MetadataPair(x[:, :, 0].clone(), y[:, :, 0].clone(), "video", flow=flow)
    return Batch(x, y, meta, [s.name for s in scenes])


def image_batch(items: list[tuple[Scene, int]], rate: float | None = None, dtype=torch.float32) -> Batch:
    """Single frames with uniformly sampled RAW pixels as the reference."""
    xs, ys, masks = [], [], []
    for scene, t in items:
        xs.append(scene.srgb[t])
        ys.append(scene.raw[t])
        if rate is None:
            masks.append(scene.mask)
        else:
            masks.append(sample_metadata(scene.raw[t], rate)[0].astype(np.float32))
    x = torch.from_numpy(np.stack(xs))[:, :, None].to(dtype)
    y = torch.from_numpy(np.stack(ys))[:, :, None].to(dtype)
    mask = torch.from_numpy(np.stack(masks))[:, None].to(dtype)
    meta = MetadataPair(x[:, :, 0] * mask, y[:, :, 0] * mask, "image", mask=mask)
    return Batch(x, y, meta, [f"{s.name}/frame_{t:02d}" for s, t in items])


def make_batch(items, mode: str, dtype=torch.float32) -> Batch:
    """``items`` are scenes (video mode) or (scene, frame) pairs (image mode)."""
    if mode == "video":
        return video_batch(items, dtype)
    if mode == "image":
        return image_batch(items, dtype=dtype)
    raise ConfigurationError(f"mode must be 'image' or 'video', got {mode!r}")


def sample_units(scenes: list[Scene], mode: str) -> list:
    """Training/evaluation units: one clip per scene (video) or one frame (image)."""
    if mode == "video":
        return list(scenes)
    return [(s, t) for s in scenes for t in range(s.raw.shape[0])]
