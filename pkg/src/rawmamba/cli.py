"""Command-line interface: ``rawmamba generate|train|derender|eval|inspect-scan``.

Every subcommand accepts ``--config FILE`` (UTF-8 JSON with optional
``dataset``, ``model`` and ``train`` sections); flags override file values and
the resolved settings are written to ``resolved.json`` in the output directory.

Exit codes: 0 ok, 2 configuration error, 3 training divergence, 4 checkpoint /
input mode mismatch, 5 load failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, export, plotting, rmt
from .dataset import DatasetConfig, load_scene, load_split, make_dataset
from .errors import ConfigurationError, ContractError, DivergenceError, LoadError
from .isp import IspRanges
from .model import ABLATIONS, ModelConfig, RawMamba
from .scan import format_listing, scan_order
from .train import TrainConfig, evaluate, make_optimizer, predict, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MODE, EXIT_LOAD = 0, 2, 3, 4, 5

log = logging.getLogger("rawmamba")


def apply_thread_cap() -> None:
    value = os.environ.get("RAWMAMBA_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise ConfigurationError(f"RAWMAMBA_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigurationError("RAWMAMBA_THREADS must be >= 1")
    torch.set_num_threads(n)


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a JSON object")
    unknown = set(data) - {"dataset", "model", "train"}
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    return data


def _overrides(args, mapping: dict[str, str]) -> dict:
    """Flag values that were actually given, renamed to config keys."""
    return {key: getattr(args, flag) for flag, key in mapping.items() if getattr(args, flag, None) is not None}


def _build(cls, section: dict, overrides: dict):
    merged = {**section, **overrides}
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigurationError(f"bad {cls.__name__} field: {exc}") from exc


def resolve_dataset(args, file_cfg: dict) -> DatasetConfig:
    section = dict(file_cfg.get("dataset", {}))
    if "ranges" in section:
        section["ranges"] = IspRanges(**section["ranges"])
    flags = {"scenes": "scenes", "frames": "frames", "size": "size", "seed": "seed",
             "test_fraction": "test_fraction", "sampling_rate": "sampling_rate"}
    return _build(DatasetConfig, section, _overrides(args, flags))


def resolve_model(args, file_cfg: dict) -> ModelConfig:
    section = dict(file_cfg.get("model", {}))
    over = _overrides(args, {"mode": "mode", "width": "width"})
    if args.ablate:
        over["ablate"] = tuple(a for item in args.ablate for a in item.split(",") if a)
    lta = dict(section.pop("lta", {}))
    lta.update(_overrides(args, {"modules": "num_modules", "d_state": "d_state"}))
    try:
        return ModelConfig.from_json({**section, **over, "lta": lta})
    except TypeError as exc:
        raise ConfigurationError(f"bad model config: {exc}") from exc


def resolve_train(args, file_cfg: dict) -> TrainConfig:
    over = _overrides(args, {"epochs": "epochs", "batch_size": "batch_size", "lr": "lr0", "seed": "seed",
                             "decay_every": "decay_every", "full_frames_from": "full_frames_from"})
    if getattr(args, "crop", None) is not None:
        over["crop"] = None if args.crop == 0 else args.crop
    return _build(TrainConfig, dict(file_cfg.get("train", {})), over)


def write_json(path, data) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def prepare_out(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigurationError(f"output directory {path} is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- subcommands -------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = resolve_dataset(args, read_config(args.config))
    root = make_dataset(args.out, cfg, overwrite=args.force)
    write_json(root / "resolved.json", {"command": "generate", "dataset": cfg.to_json()})
    counts = cfg.split_counts()
    print(f"wrote {sum(counts.values())} scenes to {root} (train {counts['train']}, test {counts['test']})")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = read_config(args.config)
    mcfg = resolve_model(args, file_cfg)
    tcfg = resolve_train(args, file_cfg)
    scenes = load_split(args.data, "train")
    out = prepare_out(args.out, args.force)
    write_json(out / "resolved.json", {
        "command": "train", "data": str(args.data), "model": mcfg.to_json(), "train": tcfg.to_json(),
    })
    torch.manual_seed(tcfg.seed)
    model = RawMamba(mcfg)
    optimizer = make_optimizer(model.parameters(), tcfg)
    epochs: list[dict] = []

    def on_epoch(report, model, optimizer):
        epochs.append(report.to_json())
        checkpoint.save(out / "checkpoints" / f"epoch_{report.epoch:03d}", model, epoch=report.epoch,
                        seed=tcfg.seed, optimizer=optimizer, extra={"train_config": tcfg.to_json()})
        write_loss_log(out, epochs)
        print(f"epoch {report.epoch}  lr {report.lr:.3g}  loss {report.loss:.6f}", flush=True)

    try:
        train(model, scenes, tcfg, optimizer=optimizer, on_epoch=on_epoch)
    except DivergenceError as exc:
        write_json(out / "divergence.json", {"epoch": exc.epoch, "batch": exc.batch, "message": str(exc)})
        raise
    if epochs:
        final = out / "final"
        if final.exists():
            shutil.rmtree(final)
        shutil.copytree(out / "checkpoints" / f"epoch_{epochs[-1]['epoch']:03d}", final)
        plotting.loss_curve(epochs, out / "loss_curve.png")
    return EXIT_OK


def write_loss_log(out: Path, epochs: list[dict]) -> None:
    write_json(out / "loss_log.json", {"epochs": epochs})
    with open(out / "loss_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "loss", "batches"])
        w.writeheader()
        w.writerows(epochs)


def _load_checkpoint(path) -> checkpoint.Checkpoint:
    return checkpoint.load(path)


def cmd_derender(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    mode = args.mode or ckpt.mode
    if mode != ckpt.mode:
        raise ContractError(f"checkpoint was trained in {ckpt.mode!r} mode, input requested {mode!r}")
    scene = load_scene(args.input)
    T = scene.raw.shape[0]
    if mode == "image":
        if not 0 <= args.frame < T:
            raise ConfigurationError(f"frame {args.frame} out of range for a {T}-frame scene")
        unit = (scene, args.frame)
        frames = [args.frame]
    else:
        if T != ckpt.model.cfg.frames:
            raise ContractError(f"checkpoint expects {ckpt.model.cfg.frames}-frame clips, scene has {T}")
        unit = scene
        frames = list(range(T))
    out = prepare_out(args.out, args.force)
    write_json(out / "resolved.json", {
        "command": "derender", "checkpoint": str(args.checkpoint), "input": str(args.input),
        "mode": mode, "frame": args.frame, "error_map": args.error_map, "oracle": args.oracle,
    })
    name, pred, target = next(predict(ckpt.model, [unit], mode, batch_size=1))
    if args.oracle:
        pred = target
    pred = pred.numpy()
    target = target.numpy()
    print(f"prediction shape {(1, *pred.shape)}")
    for i, t in enumerate(frames):
        rmt.save(out / f"pred_{t:02d}.rmt", np.ascontiguousarray(pred[:, i]))
        if args.error_map:
            export.write_pnm(out / f"error_{t:02d}.ppm", export.error_map(pred[:, i], target[:, i]))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = None if args.oracle and args.checkpoint is None else _load_checkpoint(args.checkpoint)
    mode = args.mode or (ckpt.mode if ckpt else "video")
    if ckpt is not None and mode != ckpt.mode and not args.oracle:
        # one parameter set serves both modes; only the metadata construction differs
        log.info("evaluating a %s-mode checkpoint in %s mode", ckpt.mode, mode)
    splits = args.split or ["train", "test"]
    report = {"mode": mode, "oracle": args.oracle, "checkpoint": None if ckpt is None else str(args.checkpoint),
              "splits": {}}
    for split in splits:
        scenes = load_split(args.data, split)
        if not scenes:
            continue
        r = evaluate(None if ckpt is None else ckpt.model, scenes, mode, oracle=args.oracle)
        report["splits"][split] = r
        print(f"{split}  psnr {r['psnr']:.4f}  ssim {r['ssim']:.6f}  n={r['count']}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", report)
    write_json(out / "resolved.json", {
        "command": "eval", "checkpoint": None if ckpt is None else str(args.checkpoint), "data": str(args.data),
        "mode": mode, "splits": splits, "oracle": args.oracle,
    })
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "name", "psnr", "ssim"])
        for split, r in report["splits"].items():
            for row in r["entries"]:
                w.writerow([split, row["name"], f"{row['psnr']:.6f}", f"{row['ssim']:.8f}"])
    for split, r in report["splits"].items():
        plotting.psnr_per_entry(r, out / f"psnr_{split}.png", title=f"{split} ({mode})")
    return EXIT_OK


def cmd_inspect_scan(args) -> int:
    order = scan_order(args.kind, args.T, args.H, args.W)
    print(format_listing(order))
    T, H, W = order.dims
    first = order.inverse.reshape(T, H, W)[0]
    if args.ppm:
        export.write_pnm(args.ppm, export.index_heatmap(first))
    if args.png:
        plotting.scan_heatmap(first, args.png, title=f"{args.kind} {T}x{H}x{W}, t=0")
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rawmamba", description="sRGB-to-RAW de-rendering with metadata")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic RAW/sRGB dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, help="total scene count (train + test)")
    g.add_argument("--frames", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--test-fraction", type=float)
    g.add_argument("--sampling-rate", type=float)
    g.add_argument("--force", action="store_true", help="replace an existing dataset")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model; writes per-epoch checkpoints and a loss log")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=("image", "video"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--crop", type=int, help="training crop size (0 = full frames)")
    t.add_argument("--decay-every", type=int, help="epochs between x0.1 learning-rate steps")
    t.add_argument("--full-frames-from", type=int, help="epoch from which training uses full frames")
    t.add_argument("--width", type=int)
    t.add_argument("--modules", type=int)
    t.add_argument("--d-state", type=int)
    t.add_argument("--ablate", action="append", default=[], help=f"disable a branch: {', '.join(ABLATIONS)}")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("derender", help="predict RAW for one scene")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True, help="scene directory")
    d.add_argument("--out", required=True)
    d.add_argument("--mode", choices=("image", "video"))
    d.add_argument("--frame", type=int, default=0, help="frame index in image mode")
    d.add_argument("--error-map", action="store_true", help="write |pred - gt| PPM per frame")
    d.add_argument("--oracle", action="store_true", help="replace the prediction by ground truth")
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_derender)

    e = sub.add_parser("eval", help="PSNR / SSIM per scene and per split")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--mode", choices=("image", "video"))
    e.add_argument("--split", action="append", choices=("train", "test"))
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-scan", help="list a scan order as 'i -> (t,h,w)'")
    s.add_argument("T", type=int)
    s.add_argument("H", type=int)
    s.add_argument("W", type=int)
    s.add_argument("kind", choices=("hilbert", "raster"))
    s.add_argument("--ppm", help="write a heatmap of the t=0 slice")
    s.add_argument("--png", help="render the t=0 slice with matplotlib")
    s.set_defaults(func=cmd_inspect_scan)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "eval" and args.checkpoint is None and not args.oracle:
        parser.error("eval needs --checkpoint unless --oracle is given")
    try:
        apply_thread_cap()
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODE
    except LoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
