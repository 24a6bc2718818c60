"""Binary PGM (P5) / PPM (P6) export of 8-bit images."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DimensionError


def to_u8(img) -> np.ndarray:
    """Map values in [0, 1] to bytes with round-half-even on ``v * 255``."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pnm(img) -> bytes:
    """(H, W) -> P5 bytes, (H, W, 3) -> P6 bytes; values in [0, 1]."""
    a = to_u8(img)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise DimensionError(f"PNM export needs (H, W) or (H, W, 3), got {a.shape}")
    H, W = a.shape[:2]
    return magic + f"\n{W} {H}\n255\n".encode("ascii") + a.tobytes()


def decode_pnm(buf: bytes) -> np.ndarray:
    """Inverse of :func:`encode_pnm` for its own output (uint8 array)."""
    parts = buf.split(b"\n", 3)
    magic, size, maxval, payload = parts
    W, H = (int(v) for v in size.split())
    if maxval != b"255" or magic not in (b"P5", b"P6"):
        raise DimensionError("unsupported PNM header")
    shape = (H, W) if magic == b"P5" else (H, W, 3)
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape)


def write_pnm(path, img) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_pnm(img))
    os.replace(tmp, path)
    return path


def error_map(pred, target) -> np.ndarray:
    """|pred - target| averaged over the channel axis (first) as an (H, W, 3) gray image."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 3:
        raise DimensionError(f"error map needs matching (C, H, W) arrays, got {pred.shape} and {target.shape}")
    err = np.abs(pred - target).mean(axis=0)
    return np.repeat(err[:, :, None], 3, axis=2)


def index_heatmap(order_inverse: np.ndarray) -> np.ndarray:
    """Normalized sequence index of each cell of a (H, W) slice, as a gray (H, W, 3) image."""
    idx = np.asarray(order_inverse, dtype=np.float64)
    span = idx.max() - idx.min()
    norm = (idx - idx.min()) / span if span > 0 else np.zeros_like(idx)
    return np.repeat(norm[:, :, None], 3, axis=2)
