"""Training loop, learning-rate schedule and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from .dataset import Scene, make_batch, sample_units
from .errors import ConfigurationError, DivergenceError, EvaluationError
from .metrics import LossConfig, loss, psnr, ssim
from .model import RawMamba

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    decay: float = 0.1
    decay_every: int = 20
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 2
    seed: int = 0
    crop: int | None = 16  # random square training crop; None trains on full frames
    full_frames_from: int | None = None  # epoch from which crops are dropped

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr0 <= 0 or self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ConfigurationError("lr0, batch size and decay interval must be positive; epochs >= 0")
        if self.crop is not None and (self.crop < 8 or self.crop % 8):
            raise ConfigurationError(f"training crop must be a positive multiple of 8, got {self.crop}")
        if self.full_frames_from is not None and self.full_frames_from < 0:
            raise ConfigurationError("full_frames_from must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: ``lr0 * decay ** floor(epoch / decay_every)``."""
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr0, betas=cfg.betas, eps=cfg.eps)


def crop_scene(scene: Scene, top: int, left: int, size: int) -> Scene:
    """Cut the same window out of every frame, the flow and the sampling mask."""
    win = (slice(top, top + size), slice(left, left + size))
    return Scene(
        scene.name,
        scene.raw[(..., *win)],
        scene.srgb[(..., *win)],
        scene.flow[(..., *win)],
        scene.mask[win],
        scene.meta,
    )


def crop_at(epoch: int, cfg: TrainConfig) -> int | None:
    """Training crop for ``epoch``: ``cfg.crop`` until ``cfg.full_frames_from``, then full frames."""
    if cfg.full_frames_from is not None and epoch >= cfg.full_frames_from:
        return None
    return cfg.crop


def _crop_units(units: list, size: int | None, rng: np.random.Generator) -> list:
    if size is None:
        return units
    out = []
    for u in units:
        scene, t = (u, None) if isinstance(u, Scene) else u
        H, W = scene.raw.shape[-2:]
        if size > min(H, W):
            raise ConfigurationError(f"crop {size} exceeds frame size {H}x{W}")
        top, left = (int(v) for v in rng.integers(0, [H - size + 1, W - size + 1]))
        c = crop_scene(scene, top, left, size)
        out.append(c if t is None else (c, t))
    return out


@dataclass
class EpochReport:
    epoch: int
    lr: float
    loss: float
    batches: int

    def to_json(self) -> dict:
        return asdict(self)


def train(
    model: RawMamba,
    scenes: list[Scene],
    cfg: TrainConfig,
    *,
    mode: str | None = None,
    loss_cfg: LossConfig = LossConfig(),
    optimizer: torch.optim.Optimizer | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[EpochReport, RawMamba, torch.optim.Optimizer], None] | None = None,
) -> list[EpochReport]:
    """Fit ``model`` on ``scenes``; data order and crops are drawn from ``cfg.seed``."""
    mode = mode or model.cfg.mode
    units = sample_units(scenes, mode)
    if not units:
        raise ConfigurationError("no training samples")
    optimizer = optimizer or make_optimizer(model.parameters(), cfg)
    dtype = next(model.parameters()).dtype
    reports = []
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        crop = crop_at(epoch, cfg)
        order = rng.permutation(len(units))
        model.train()
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            items = _crop_units([units[i] for i in order[start : start + cfg.batch_size]], crop, rng)
            batch = make_batch(items, mode, dtype)
            try:
                pred = model(batch.x, batch.meta if model.ume is not None else None, mode)
            except EvaluationError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
            value = loss(pred, batch.y, loss_cfg)
            if not torch.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            optimizer.zero_grad()
            value.backward()
            optimizer.step()
            total += value.item() * len(items)
            count += len(items)
        report = EpochReport(epoch, lr, total / count, math.ceil(len(units) / cfg.batch_size))
        log.info("epoch %d  lr %.3g  loss %.6f", epoch, lr, report.loss)
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report, model, optimizer)
    return reports


def score_pairs(entries: list[tuple[str, torch.Tensor, torch.Tensor]], loss_cfg: LossConfig = LossConfig()) -> dict:
    """Per-entry and mean PSNR / SSIM for (name, prediction, target) triples."""
    rows = []
    for name, pred, target in sorted(entries, key=lambda e: e[0]):
        rows.append({
            "name": name,
            "psnr": psnr(pred, target),
            "ssim": float(ssim(pred.double(), target.double(), loss_cfg)),
        })
    return {
        "psnr": float(np.mean([r["psnr"] for r in rows])) if rows else float("nan"),
        "ssim": float(np.mean([r["ssim"] for r in rows])) if rows else float("nan"),
        "count": len(rows),
        "entries": rows,
    }


@torch.no_grad()
def predict(model: RawMamba, units: list, mode: str, batch_size: int = 4):
    """Yield ``(name, prediction, target)`` per unit, each (4, T, H, W)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    for start in range(0, len(units), batch_size):
        batch = make_batch(units[start : start + batch_size], mode, dtype)
        pred = model(batch.x, batch.meta if model.ume is not None else None, mode)
        for i, name in enumerate(batch.names):
            yield name, pred[i], batch.y[i]


def evaluate(model: RawMamba | None, scenes: list[Scene], mode: str, *, oracle: bool = False,
             loss_cfg: LossConfig = LossConfig()) -> dict:
    """Score a model on ``scenes``; ``oracle=True`` scores ground truth against itself."""
    units = sample_units(sorted(scenes, key=lambda s: s.name), mode)
    if oracle:
        entries = [(b.names[0], b.y[0], b.y[0]) for b in (make_batch([u], mode, torch.float64) for u in units)]
    else:
        if model is None:
            raise ConfigurationError("evaluate needs a model unless oracle=True")
        entries = list(predict(model, units, mode))
    report = score_pairs(entries, loss_cfg)
    report["mode"] = mode
    return report
