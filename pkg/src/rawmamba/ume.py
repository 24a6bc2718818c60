"""Unified metadata embedding.

Both metadata kinds are presented as an (sRGB, RAW) reference pair.  The
query sRGB features attend to the reference sRGB features twice:

* globally (GEB): a dense affinity over every reference position, used to
  pull reference RAW features;
* locally (LEB): position-encoded attention restricted to a window around
  the flow-displaced query position, with a learned additive bias.

The two embeddings are mixed by learnable scalars and consumed by the main
network through channel-wise cross attention (:class:`SearchBlock`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import check_finite, layer_norm, matmul, resize_bilinear, softmax

log = logging.getLogger(__name__)

KINDS = ("image", "video")


@dataclass
class MetadataPair:
    """Reference pair for one batch.

    ``srgb_ref`` is (n, 3, H, W), ``raw_ref`` is (n, 4, H, W).  Image kind
    carries a (n, 1, H, W) binary ``mask``; video kind may carry per-frame
    ``flow`` (n, T, 2, H, W) in pixels, channel 0 horizontal, with frame t
    content at ``p + flow_t(p)`` for reference content at ``p``.
    """

    srgb_ref: torch.Tensor
    raw_ref: torch.Tensor
    kind: str
    mask: torch.Tensor | None = None
    flow: torch.Tensor | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"metadata kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "image" and self.mask is None:
            raise ContractError("image metadata needs a sampling mask")
        if self.srgb_ref.shape[-2:] != self.raw_ref.shape[-2:]:
            raise DimensionError(
                f"reference sRGB {tuple(self.srgb_ref.shape)} and RAW {tuple(self.raw_ref.shape)} disagree"
            )

    def to(self, dtype) -> "MetadataPair":
        cast = lambda t: None if t is None else t.to(dtype)  # noqa: E731
        return MetadataPair(cast(self.srgb_ref), cast(self.raw_ref), self.kind, cast(self.mask), cast(self.flow))


@dataclass
class EmbeddingSet:
    e_global: torch.Tensor | None
    e_local: torch.Tensor | None
    e_fused: torch.Tensor
    fusion_weights: tuple[torch.Tensor, torch.Tensor]


# --- encoders ----------------------------------------------------------------


class ConvEncoder(nn.Module):
    """Stack of stride-2 conv stages applied frame by frame.

    Returns one feature map per stage, so stage i has stride 2**(i+1).
    """

    def __init__(self, in_channels: int, widths: tuple[int, ...]):
        super().__init__()
        stages = []
        prev = in_channels
        for w in widths:
            stages.append(nn.Sequential(
                nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(w, w, 3, padding=1), nn.GELU(),
            ))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.widths = tuple(widths)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """``x`` is (n, C, T, H, W) or (n, C, H, W); outputs keep the same layout."""
        video = x.dim() == 5
        if video:
            n, c, T, H, W = x.shape
            x = x.transpose(1, 2).reshape(n * T, c, H, W)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        if video:
            feats = [f.reshape(n, T, *f.shape[1:]).transpose(1, 2) for f in feats]
        return feats


# --- GEB ---------------------------------------------------------------------


def geb_affinity(f_query: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
    """Affinity ``softmax(Fq Fr^T)`` over reference positions.

    ``f_query`` is (n, Lq, C), ``f_ref`` is (n, Lr, C); result (n, Lq, Lr).
    """
    if f_ref.shape[1] == 0:
        raise ContractError("metadata empty: no reference positions")
    if f_query.shape[-1] != f_ref.shape[-1]:
        raise DimensionError(f"feature widths differ: {tuple(f_query.shape)} vs {tuple(f_ref.shape)}")
    return softmax(matmul(f_query, f_ref.transpose(1, 2)), axis=-1)


def geb_embed(affinity: torch.Tensor, f_raw: torch.Tensor) -> torch.Tensor:
    """Global embedding ``A1 Fraw``: (n, Lq, Lr) x (n, Lr, C) -> (n, Lq, C)."""
    if affinity.shape[-1] != f_raw.shape[1]:
        raise DimensionError(
            f"affinity references {affinity.shape[-1]} != RAW reference positions {f_raw.shape[1]}"
        )
    return matmul(affinity, f_raw)


# --- LEB ---------------------------------------------------------------------


def sinusoidal_pe(channels: int, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, (channels, h, w).

    The first half of the channels encodes the row, the second half the
    column, each as interleaved sin/cos pairs.
    """
    if channels % 4:
        raise ConfigurationError(f"positional encoding width must be a multiple of 4, got {channels}")
    half = channels // 2
    freq = 1.0 / (10000.0 ** (torch.arange(0, half, 2, dtype=torch.float64) / half))

    def axis_code(n: int) -> torch.Tensor:
        ang = torch.arange(n, dtype=torch.float64)[:, None] * freq[None, :]
        return torch.stack([ang.sin(), ang.cos()], dim=-1).reshape(n, half)

    rows = axis_code(h).T[:, :, None].expand(half, h, w)
    cols = axis_code(w).T[:, None, :].expand(half, h, w)
    return torch.cat([rows, cols], dim=0).to(dtype)


def bilinear_sample(img: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample (C, h, w) ``img`` at real coordinates ``ys``/``xs`` (any equal shape), border-clamped."""
    h, w = img.shape[-2:]
    ys = ys.clamp(0, h - 1)
    xs = xs.clamp(0, w - 1)
    y0 = ys.floor().long()
    x0 = xs.floor().long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    wy = (ys - y0).to(img.dtype)
    wx = (xs - x0).to(img.dtype)
    top = img[:, y0, x0] * (1 - wx) + img[:, y0, x1] * wx
    bot = img[:, y1, x0] * (1 - wx) + img[:, y1, x1] * wx
    return top * (1 - wy) + bot * wy


def warp_position_encoding(pe: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Move ``pe`` (C, h, w) along ``flow`` (..., 2, h, w) given in feature cells.

    ``out[..., :, i, j] = pe(i + flow_y, j + flow_x)``: a reference cell is
    tagged with the position its content occupies in the query frame.
    """
    if flow.shape[-3] != 2 or flow.shape[-2:] != pe.shape[-2:]:
        raise DimensionError(f"flow {tuple(flow.shape)} does not match encoding grid {tuple(pe.shape)}")
    h, w = pe.shape[-2:]
    lead = flow.shape[:-3]
    fl = flow.reshape(-1, 2, h, w)
    ii = torch.arange(h, dtype=fl.dtype)[:, None]
    jj = torch.arange(w, dtype=fl.dtype)[None, :]
    with torch.no_grad():
        out = torch.stack([bilinear_sample(pe, ii + f[1], jj + f[0]) for f in fl])
    return out.reshape(*lead, *pe.shape)


def window_indices(h: int, w: int, flow: np.ndarray | None, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference indices of the k x k window around each query's source position.

    ``flow`` is (T, 2, h, w) in feature cells or ``None``.  Returns ``idx``
    (T, h*w, k*k) of flat reference indices (clamped) and a boolean ``valid``
    of the same shape marking in-frame slots.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigurationError(f"window must be odd and positive, got {window}")
    r = window // 2
    T = 1 if flow is None else flow.shape[0]
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    di, dj = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    idx = np.empty((T, h * w, window * window), dtype=np.int64)
    valid = np.empty_like(idx, dtype=bool)
    for t in range(T):
        ci, cj = ii, jj
        if flow is not None:
            ci = np.rint(ii - flow[t, 1]).astype(np.int64)
            cj = np.rint(jj - flow[t, 0]).astype(np.int64)
        yi = ci.reshape(-1, 1) + di.reshape(1, -1)
        xj = cj.reshape(-1, 1) + dj.reshape(1, -1)
        valid[t] = (yi >= 0) & (yi < h) & (xj >= 0) & (xj < w)
        idx[t] = np.clip(yi, 0, h - 1) * w + np.clip(xj, 0, w - 1)
    return idx, valid


def leb_attend(
    f_query: torch.Tensor,
    f_ref: torch.Tensor,
    f_raw: torch.Tensor,
    pe: torch.Tensor,
    pe_warped: torch.Tensor,
    *,
    flow: torch.Tensor | None = None,
    window: int | None = 7,
    offset_bias: torch.Tensor | None = None,
    temperature: float | None = None,
) -> torch.Tensor:
    """Local embedding ``A2 (Fraw + PE~)`` with ``A2 = softmax((Fq+PE)(Fr+PE~)^T / sqrt(d) + B)``.

    Shapes: ``f_query`` (n, C, T, h, w); ``f_ref``, ``f_raw`` (n, C, h, w);
    ``pe`` (C, h, w); ``pe_warped`` (n, T, C, h, w); ``flow`` (n, T, 2, h, w)
    in feature cells; ``offset_bias`` (n, T, h*w, k*k).  ``window=None``
    attends to every reference position.  Returns (n, C, T, h, w).
    """
    n, C, T, h, w = f_query.shape
    if f_ref.shape != (n, C, h, w) or f_raw.shape != (n, C, h, w):
        raise DimensionError(
            f"reference features {tuple(f_ref.shape)}/{tuple(f_raw.shape)} do not match queries {tuple(f_query.shape)}"
        )
    if pe_warped.shape != (n, T, C, h, w):
        raise DimensionError(f"warped encoding {tuple(pe_warped.shape)} != {(n, T, C, h, w)}")
    scale = 1.0 / (temperature if temperature is not None else math.sqrt(C))
    q = (f_query + pe[:, None]).permute(0, 2, 3, 4, 1).reshape(n, T, h * w, C)
    k = (f_ref[:, None] + pe_warped).permute(0, 1, 3, 4, 2).reshape(n, T, h * w, C)
    v = (f_raw[:, None] + pe_warped).permute(0, 1, 3, 4, 2).reshape(n, T, h * w, C)

    if window is None:
        logits = matmul(q, k.transpose(-1, -2)) * scale
        out = matmul(softmax(logits, axis=-1), v)
    else:
        fl = None if flow is None else flow.detach().cpu().numpy()
        outs = []
        for b in range(n):
            idx, valid = window_indices(h, w, None if fl is None else fl[b], window)
            if idx.shape[0] == 1 and T > 1:
                idx = np.repeat(idx, T, 0)
                valid = np.repeat(valid, T, 0)
            it = torch.from_numpy(idx)
            vt = torch.from_numpy(valid)
            kb = k[b][torch.arange(T)[:, None, None], it]  # (T, hw, K, C)
            vb = v[b][torch.arange(T)[:, None, None], it]
            logits = (q[b].unsqueeze(2) * kb).sum(-1) * scale
            if offset_bias is not None:
                logits = logits + offset_bias[b]
            empty = ~vt.any(-1)
            if bool(empty.any()):
                log.warning("LEB window empty for %d queries; using full-reference attention", int(empty.sum()))
                vt = vt | empty[..., None]
                full = matmul(softmax(matmul(q[b], k[b].transpose(-1, -2)) * scale, axis=-1), v[b])
            att = softmax(logits, axis=-1, mask=vt)
            ob = (att.unsqueeze(-1) * vb).sum(2)
            if bool(empty.any()):
                ob = torch.where(empty[..., None], full, ob)
            outs.append(ob)
        out = torch.stack(outs)
    return check_finite(out.reshape(n, T, h, w, C).permute(0, 4, 1, 2, 3), "leb_attend")


def fuse_embeddings(e_global: torch.Tensor, e_local: torch.Tensor, w_g, w_l) -> torch.Tensor:
    if e_global.shape != e_local.shape:
        raise DimensionError(f"embedding shapes differ: {tuple(e_global.shape)} vs {tuple(e_local.shape)}")
    return w_g * e_global + w_l * e_local


# --- search ------------------------------------------------------------------


def channel_attention_map(q: torch.Tensor, k: torch.Tensor, temperature) -> torch.Tensor:
    """Softmax over key channels of cosine similarities: (n, Cq, P) x (n, Ck, P) -> (n, Cq, Ck)."""
    qn = q / q.norm(dim=-1, keepdim=True).clamp(min=1e-6)
    kn = k / k.norm(dim=-1, keepdim=True).clamp(min=1e-6)
    return softmax(matmul(qn, kn.transpose(1, 2)) * temperature, axis=-1)


class SearchBlock(nn.Module):
    """Channel-wise transformer block: the main features query the metadata embedding.

    Attention is C x C (transposed attention), so cost is linear in the
    number of cells.  The feed-forward branch is gated (``gelu(a) * b``),
    which lets the metadata scale the main features multiplicatively.  Both
    residual branches end in zero-initialized projections.
    """

    def __init__(self, channels: int, e_channels: int, ffn_expand: int = 2):
        super().__init__()
        self.q = nn.Conv3d(channels, channels, 1)
        self.k = nn.Conv3d(e_channels, channels, 1)
        self.v = nn.Conv3d(e_channels, channels, 1)
        self.temperature = nn.Parameter(torch.ones(()))
        self.proj = nn.Conv3d(channels, channels, 1)
        self.ffn_in = nn.Conv3d(channels, 2 * channels * ffn_expand, 1)
        self.ffn_out = nn.Conv3d(channels * ffn_expand, channels, 1)
        for m in (self.proj, self.ffn_out):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, feat: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        """``feat`` (n, C, T, H, W); ``e`` (n, Ce, T, h, w) is resized to ``feat``'s grid."""
        n, C, T, H, W = feat.shape
        e = resize_bilinear(e, (H, W))
        q = self.q(layer_norm(feat, axis=1)).reshape(n, C, -1)
        k = self.k(layer_norm(e, axis=1)).reshape(n, C, -1)
        v = self.v(layer_norm(e, axis=1)).reshape(n, C, -1)
        att = channel_attention_map(q, k, self.temperature)
        x = feat + self.proj(matmul(att, v).reshape(n, C, T, H, W))
        gate, value = self.ffn_in(layer_norm(x, axis=1)).chunk(2, dim=1)
        return x + self.ffn_out(F.gelu(gate) * value)


# --- module ------------------------------------------------------------------


class UnifiedMetadataEmbedding(nn.Module):
    """Encodes the reference pair and builds the fused embedding for query features at stride ``stride``."""

    def __init__(self, channels: int, stride: int = 4, window: int = 7, temperature: float | None = None,
                 use_geb: bool = True, use_leb: bool = True):
        super().__init__()
        if not (use_geb or use_leb):
            raise ConfigurationError("UME needs at least one of GEB/LEB")
        stages = int(round(math.log2(stride)))
        if 2 ** stages != stride:
            raise ConfigurationError(f"UME stride must be a power of two, got {stride}")
        widths = (channels,) * stages
        self.f_srgb_ref = ConvEncoder(3, widths)
        self.f_raw_ref = ConvEncoder(4, widths)
        self.stride, self.window, self.temperature = stride, window, temperature
        self.use_geb, self.use_leb = use_geb, use_leb
        k = window * window if window else 1
        self.offset_head = nn.Conv2d(channels, k, 3, padding=1)
        nn.init.zeros_(self.offset_head.weight)
        nn.init.zeros_(self.offset_head.bias)
        self.w_global = nn.Parameter(torch.tensor(0.5))
        self.w_local = nn.Parameter(torch.tensor(0.5))

    def encode_reference(self, meta: MetadataPair) -> tuple[torch.Tensor, torch.Tensor]:
        if meta.kind == "image" and float(meta.mask.sum()) == 0:
            raise ContractError("metadata empty: sampling mask has no positions")
        srgb, raw = meta.srgb_ref, meta.raw_ref
        return self.f_srgb_ref(srgb)[-1], self.f_raw_ref(raw)[-1]

    def feature_flow(self, meta: MetadataPair, T: int, h: int, w: int, dtype) -> torch.Tensor:
        """Per-frame flow at feature resolution, in feature cells: (n, T, 2, h, w)."""
        n = meta.srgb_ref.shape[0]
        if meta.flow is None:
            return torch.zeros(n, T, 2, h, w, dtype=dtype)
        fl = meta.flow
        if fl.shape[:3] != (n, T, 2):
            raise DimensionError(f"flow {tuple(fl.shape)} does not match batch/frames {(n, T)}")
        pooled = F.avg_pool2d(fl.reshape(n * T, 2, *fl.shape[-2:]), self.stride) / self.stride
        return pooled.reshape(n, T, 2, h, w).to(dtype)

    def forward(self, f_query: torch.Tensor, meta: MetadataPair) -> EmbeddingSet:
        """``f_query`` is the (n, C, T, h, w) sRGB feature map at this module's stride."""
        n, C, T, h, w = f_query.shape
        f_ref, f_raw = self.encode_reference(meta)
        if f_ref.shape[-2:] != (h, w):
            raise DimensionError(f"reference grid {tuple(f_ref.shape[-2:])} != query grid {(h, w)}")
        e_global = e_local = None
        if self.use_geb:
            q = f_query.permute(0, 2, 3, 4, 1).reshape(n, T * h * w, C)
            r = f_ref.permute(0, 2, 3, 1).reshape(n, h * w, C)
            v = f_raw.permute(0, 2, 3, 1).reshape(n, h * w, C)
            e_global = geb_embed(geb_affinity(q, r), v).reshape(n, T, h, w, C).permute(0, 4, 1, 2, 3)
        if self.use_leb:
            pe = sinusoidal_pe(C, h, w, f_query.dtype)
            flow = self.feature_flow(meta, T, h, w, f_query.dtype)
            pe_warped = warp_position_encoding(pe, flow)
            bias = None
            if self.window:
                b = self.offset_head(f_query.transpose(1, 2).reshape(n * T, C, h, w))
                bias = b.reshape(n, T, -1, h * w).transpose(2, 3)
            e_local = leb_attend(f_query, f_ref, f_raw, pe, pe_warped, flow=flow, window=self.window,
                                 offset_bias=bias, temperature=self.temperature)
        if e_global is None:
            fused = self.w_local * e_local
        elif e_local is None:
            fused = self.w_global * e_global
        else:
            fused = fuse_embeddings(e_global, e_local, self.w_global, self.w_local)
        return EmbeddingSet(e_global, e_local, fused, (self.w_global, self.w_local))
