"""Local tone-aware Mamba stack.

One module is: Hilbert-order local block -> re-order to raster -> global
block with channel attention -> restore -> 1x1x1 refinement.  Every residual
branch ends in a zero-initialized projection, so a freshly built stack is
exactly the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigurationError, DimensionError
from .scan import ScanOrder, hilbert3d_order, raster_order, rearrange, reorder, restore
from .ssm import BidirectionalMamba
from .tensor import check_finite, depthwise_conv3d, layer_norm, upsample_bilinear


@dataclass
class LtaConfig:
    num_modules: int = 3
    d_state: int = 16
    dwc_kernel: tuple[int, int, int] = (1, 3, 3)
    ca_reduction: int = 4
    use_local: bool = True
    use_global: bool = True

    def __post_init__(self):
        if self.num_modules < 1:
            raise ConfigurationError("num_modules must be >= 1")
        self.dwc_kernel = tuple(self.dwc_kernel)


class LayerNorm(nn.Module):
    """Affine layer norm over ``axis`` built on the package primitive."""

    def __init__(self, channels: int, axis: int = -1):
        super().__init__()
        self.axis = axis
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return layer_norm(x, self.axis, self.gain, self.bias)


class DepthwiseConv(nn.Module):
    def __init__(self, channels: int, kernel=(1, 3, 3), zero_init: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(channels, *kernel))
        self.bias = nn.Parameter(torch.zeros(channels))
        if not zero_init:
            nn.init.normal_(self.weight, std=0.1)

    def forward(self, x):
        return depthwise_conv3d(x, self.weight, self.bias)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate over a (n, L, C) sequence."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=1)
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x).unsqueeze(1)


def _dwc_on_sequence(seq: torch.Tensor, order: ScanOrder, conv: DepthwiseConv) -> torch.Tensor:
    """Apply a volume-layout depthwise conv to a (n, L, C) sequence in ``order``."""
    vol = restore(seq.transpose(1, 2), order)
    return rearrange(conv(vol), order).transpose(1, 2)


class LocalBlock(nn.Module):
    """``F1 = SSM(LN(F)) + F``; ``F2 = F1 + DWC(LN(F1))`` on a Hilbert-ordered sequence."""

    def __init__(self, channels: int, cfg: LtaConfig):
        super().__init__()
        self.norm1 = LayerNorm(channels)
        self.ssm = BidirectionalMamba(channels, cfg.d_state)
        self.norm2 = LayerNorm(channels)
        self.dwc = DepthwiseConv(channels, cfg.dwc_kernel)

    def forward(self, seq: torch.Tensor, order: ScanOrder) -> torch.Tensor:
        f1 = self.ssm(self.norm1(seq)) + seq
        return f1 + _dwc_on_sequence(self.norm2(f1), order, self.dwc)


class GlobalBlock(nn.Module):
    """``F3 = SSM(LN(F2)) + F2``; ``F4 = F3 + DWC(LN(F3 + CA(F2)))`` on a raster sequence."""

    def __init__(self, channels: int, cfg: LtaConfig):
        super().__init__()
        self.norm1 = LayerNorm(channels)
        self.ssm = BidirectionalMamba(channels, cfg.d_state)
        self.ca = ChannelAttention(channels, cfg.ca_reduction)
        self.norm2 = LayerNorm(channels)
        self.dwc = DepthwiseConv(channels, cfg.dwc_kernel)

    def forward(self, seq: torch.Tensor, order: ScanOrder, return_f3: bool = False):
        f3 = self.ssm(self.norm1(seq)) + seq
        f4 = f3 + _dwc_on_sequence(self.norm2(f3 + self.ca(seq)), order, self.dwc)
        return (f4, f3) if return_f3 else f4


class LtaModule(nn.Module):
    def __init__(self, channels: int, cfg: LtaConfig):
        super().__init__()
        self.cfg = cfg
        self.local = LocalBlock(channels, cfg) if cfg.use_local else None
        self.global_ = GlobalBlock(channels, cfg) if cfg.use_global else None
        self.refine = nn.Conv3d(channels, channels, 1)
        nn.init.zeros_(self.refine.weight)
        nn.init.zeros_(self.refine.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(n, C, T, H, W) -> same shape."""
        T, H, W = x.shape[2:]
        local, glob = hilbert3d_order(T, H, W), raster_order(T, H, W)
        seq = rearrange(x, local).transpose(1, 2)
        if self.local is not None:
            seq = self.local(seq, local)
        seq = reorder(seq, local, glob, axis=1)
        if self.global_ is not None:
            seq = self.global_(seq, glob)
        out = restore(seq.transpose(1, 2), glob)
        return out + self.refine(out)


class LtaStack(nn.Module):
    def __init__(self, channels: int, cfg: LtaConfig | None = None):
        super().__init__()
        self.cfg = cfg or LtaConfig()
        self.blocks = nn.ModuleList(LtaModule(channels, self.cfg) for _ in range(self.cfg.num_modules))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, block in enumerate(self.blocks):
            x = check_finite(block(x), f"lta.{i}")
        return x


class FeatureAggregator(nn.Module):
    """``F = Conv(sum_i up(F_enc^i))``: resize every level to the finest and fuse with a 1x1x1 conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.fuse = nn.Conv3d(channels, channels, 1)

    def forward(self, pyramid: list[torch.Tensor], strides: list[int]) -> torch.Tensor:
        if not pyramid:
            raise ConfigurationError("aggregation needs at least one pyramid level")
        if len(strides) != len(pyramid):
            raise DimensionError("one stride per pyramid level required")
        finest = min(strides)
        total = None
        for feat, s in zip(pyramid, strides):
            if s % finest:
                raise ConfigurationError(f"stride {s} is not a multiple of the finest stride {finest}")
            up = upsample_bilinear(feat, s // finest)
            total = up if total is None else total + up
        return self.fuse(total)
