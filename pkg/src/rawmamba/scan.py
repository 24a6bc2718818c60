"""Spatiotemporal scan orders over a T x H x W cell grid.

A :class:`ScanOrder` is a bijection between sequence positions and linear
cell indices ``t*H*W + h*W + w``.  Two kinds exist:

* ``hilbert`` -- a Hilbert curve built on the smallest power-of-two
  hypercube enclosing the grid; each refinement level splits every cube
  into 2**d sub-cubes.  Cells outside the box are skipped, which keeps curve
  order and bijectivity.  Axes of extent 1 are dropped before building the
  curve, so a single-frame grid gets a genuine 2-D Hilbert curve.
* ``raster`` -- row-major order, W fastest.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True, eq=False)
class ScanOrder:
    dims: tuple[int, int, int]
    forward: np.ndarray  # sequence position -> linear cell index
    inverse: np.ndarray  # linear cell index -> sequence position
    kind: str

    def __len__(self) -> int:
        return len(self.forward)

    def coords(self) -> np.ndarray:
        """(L, 3) array of (t, h, w) in sequence order."""
        T, H, W = self.dims
        return np.stack(np.unravel_index(self.forward, (T, H, W)), axis=1)


def _check_dims(T: int, H: int, W: int) -> tuple[int, int, int]:
    dims = tuple(int(v) for v in (T, H, W))
    if any(v < 1 for v in dims):
        raise ConfigurationError(f"scan dimensions must be >= 1, got {dims}")
    return dims  # type: ignore[return-value]


def _make(dims, forward: np.ndarray, kind: str) -> ScanOrder:
    forward = forward.astype(np.int64)
    inverse = np.empty_like(forward)
    inverse[forward] = np.arange(len(forward))
    forward.setflags(write=False)
    inverse.setflags(write=False)
    return ScanOrder(dims, forward, inverse, kind)


@lru_cache(maxsize=None)
def hilbert_points(ndim: int, bits: int) -> np.ndarray:
    """Coordinates of the d-dimensional Hilbert curve of side ``2**bits``, in curve order.

    Uses Skilling's transposed-index decoding (AIP Conf. Proc. 707, 2004):
    every index is split into ``bits`` groups of ``ndim`` bits, one group per
    level of the recursive 2**d-way subdivision, then Gray-decoded and
    un-rotated level by level.
    """
    n = 1 << (ndim * bits)
    idx = np.arange(n, dtype=np.int64)
    X = np.zeros((ndim, n), dtype=np.int64)
    for level in range(bits):
        for i in range(ndim):
            bit = (idx >> (level * ndim + (ndim - 1 - i))) & 1
            X[i] |= bit << level
    if bits == 0:
        return X.T.copy()
    t = X[ndim - 1] >> 1
    for i in range(ndim - 1, 0, -1):
        X[i] ^= X[i - 1]
    X[0] ^= t
    Q = 2
    side = 1 << bits
    while Q != side:
        P = Q - 1
        for i in range(ndim - 1, -1, -1):
            flip = (X[i] & Q) != 0
            X[0] = np.where(flip, X[0] ^ P, X[0])
            swap = np.where(flip, 0, (X[0] ^ X[i]) & P)
            X[0] ^= swap
            X[i] ^= swap
        Q <<= 1
    out = X.T.copy()
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def hilbert3d_order(T: int, H: int, W: int) -> ScanOrder:
    dims = _check_dims(T, H, W)
    active = [a for a, v in enumerate(dims) if v > 1]
    if not active:
        return _make(dims, np.zeros(1, dtype=np.int64), "hilbert")
    side = max(dims[a] for a in active)
    bits = int(np.ceil(np.log2(side)))
    pts = hilbert_points(len(active), bits)
    full = np.zeros((len(pts), 3), dtype=np.int64)
    full[:, active] = pts
    inside = np.all(full < np.asarray(dims), axis=1)
    full = full[inside]
    forward = (full[:, 0] * dims[1] + full[:, 1]) * dims[2] + full[:, 2]
    return _make(dims, forward, "hilbert")


@lru_cache(maxsize=None)
def raster_order(T: int, H: int, W: int) -> ScanOrder:
    dims = _check_dims(T, H, W)
    return _make(dims, np.arange(dims[0] * dims[1] * dims[2]), "raster")


def scan_order(kind: str, T: int, H: int, W: int) -> ScanOrder:
    if kind == "hilbert":
        return hilbert3d_order(T, H, W)
    if kind == "raster":
        return raster_order(T, H, W)
    raise ConfigurationError(f"unknown scan kind {kind!r}")


def _index(order: np.ndarray, device) -> torch.Tensor:
    return torch.from_numpy(np.array(order)).to(device)


def rearrange(x: torch.Tensor, order: ScanOrder) -> torch.Tensor:
    """(n, C, T, H, W) volume -> (n, C, L) sequence in scan order."""
    if x.dim() != 5 or tuple(x.shape[2:]) != order.dims:
        raise DimensionError(f"volume {tuple(x.shape)} does not match scan dims {order.dims}")
    flat = x.reshape(*x.shape[:2], -1)
    return flat.index_select(2, _index(order.forward, x.device))


def restore(y: torch.Tensor, order: ScanOrder) -> torch.Tensor:
    """Inverse of :func:`rearrange`."""
    if y.dim() != 3 or y.shape[2] != len(order):
        raise DimensionError(f"sequence {tuple(y.shape)} does not match scan dims {order.dims}")
    return y.index_select(2, _index(order.inverse, y.device)).reshape(*y.shape[:2], *order.dims)


def reorder_permutation(src: ScanOrder, dst: ScanOrder) -> np.ndarray:
    """Index array ``p`` with ``seq_dst = seq_src[..., p]`` (restore by src, rearrange by dst)."""
    if src.dims != dst.dims:
        raise DimensionError(f"cannot reorder between dims {src.dims} and {dst.dims}")
    return src.inverse[dst.forward]


def reorder(seq: torch.Tensor, src: ScanOrder, dst: ScanOrder, axis: int = -1) -> torch.Tensor:
    return seq.index_select(axis, _index(reorder_permutation(src, dst), seq.device))


def face_adjacent_steps(order: ScanOrder) -> np.ndarray:
    """L1 distance between consecutive cells of the order."""
    c = order.coords()
    return np.abs(np.diff(c, axis=0)).sum(axis=1)


def locality_score(order: ScanOrder) -> float:
    """Mean |sequence distance| over all face-adjacent cell pairs (lower is more local)."""
    T, H, W = order.dims
    pos = order.inverse.reshape(T, H, W)
    diffs = [np.abs(np.diff(pos, axis=a)).ravel() for a in range(3) if order.dims[a] > 1]
    if not diffs:
        return 0.0
    return float(np.concatenate(diffs).mean())


def format_listing(order: ScanOrder) -> str:
    """One ``i -> (t,h,w)`` line per sequence position."""
    return "\n".join(f"{i} -> ({t},{h},{w})" for i, (t, h, w) in enumerate(order.coords()))


def parse_listing(text: str) -> np.ndarray:
    """Parse :func:`format_listing` output back to an (L, 3) coordinate array."""
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        head, _, tail = line.partition("->")
        rows.append([int(v) for v in tail.strip().strip("()").split(",")])
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)
