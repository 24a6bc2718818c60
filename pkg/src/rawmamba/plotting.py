"""Report figures rendered to PNG next to the JSON / CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def loss_curve(epochs: list[dict], path) -> Path:
    """Training loss per epoch, with lr decay points marked."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = [e["epoch"] for e in epochs]
    ax.plot(xs, [e["loss"] for e in epochs], marker="o", ms=3)
    for prev, cur in zip(epochs, epochs[1:]):
        if cur["lr"] != prev["lr"]:
            ax.axvline(cur["epoch"], color="0.7", ls="--", lw=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE + 0.5 (1 - SSIM)")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def psnr_per_entry(report: dict, path, title: str = "") -> Path:
    """Bar chart of per-scene PSNR with the split mean as a horizontal line."""
    rows = report["entries"]
    fig, ax = plt.subplots(figsize=(max(4, 0.25 * len(rows) + 1.5), 3.2))
    ax.bar(range(len(rows)), [min(r["psnr"], 100.0) for r in rows], color="tab:blue")
    ax.axhline(report["psnr"], color="tab:red", lw=1, label=f"mean {report['psnr']:.2f} dB")
    ax.set_xticks(range(len(rows)), [r["name"].split("/")[0].removeprefix("scene_") for r in rows],
                  rotation=90, fontsize=6)
    ax.set_ylabel("PSNR (dB)")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def scan_heatmap(inverse_slice: np.ndarray, path, title: str = "") -> Path:
    """Sequence index of each cell of one frame, with the path drawn on top."""
    idx = np.asarray(inverse_slice)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(idx, cmap="viridis", interpolation="nearest")
    ys, xs = np.unravel_index(np.argsort(idx, axis=None), idx.shape)
    ax.plot(xs, ys, color="white", lw=0.8)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    return _save(fig, path)


def ablation_bars(results: dict[str, float], path) -> Path:
    """Test PSNR per model variant."""
    names = list(results)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 1.5, 3.2))
    ax.bar(names, [results[n] for n in names], color="tab:green")
    for i, n in enumerate(names):
        ax.text(i, results[n], f"{results[n]:.2f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("test PSNR (dB)")
    lo = min(results.values())
    ax.set_ylim(max(0.0, lo - 3), max(results.values()) + 1.5)
    return _save(fig, path)
