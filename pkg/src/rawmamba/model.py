"""End-to-end sRGB-to-RAW de-rendering network.

sRGB clip -> pyramid encoder -> metadata search at every scale -> multi-scale
aggregation -> LTA-Mamba stack -> 3-D conv decoder -> sigmoid RAW.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, DimensionError
from .lta import FeatureAggregator, LtaConfig, LtaStack
from .tensor import check_finite, upsample_bilinear
from .ume import ConvEncoder, MetadataPair, SearchBlock, UnifiedMetadataEmbedding

ABLATIONS = ("geb", "leb", "metadata", "local", "global")


@dataclass
class ModelConfig:
    mode: str = "video"
    frames: int = 5
    width: int = 16
    strides: tuple[int, ...] = (2, 4, 8)
    ume_stride: int = 4
    window: int = 7
    d: int | None = None  # attention temperature sqrt(d); defaults to width
    lta: LtaConfig = field(default_factory=LtaConfig)
    ablate: tuple[str, ...] = ()

    def __post_init__(self):
        if isinstance(self.lta, dict):
            self.lta = LtaConfig(**self.lta)
        self.strides = tuple(self.strides)
        self.ablate = tuple(self.ablate)
        if self.mode not in ("image", "video"):
            raise ConfigurationError(f"mode must be 'image' or 'video', got {self.mode!r}")
        if self.mode == "image":
            self.frames = 1
        bad = set(self.ablate) - set(ABLATIONS)
        if bad:
            raise ConfigurationError(f"unknown ablations {sorted(bad)}; choose from {ABLATIONS}")
        if {"geb", "leb"} <= set(self.ablate):
            raise ConfigurationError("ablating both GEB and LEB is the 'metadata' ablation")
        if list(self.strides) != [2 ** (i + 1) for i in range(len(self.strides))]:
            raise ConfigurationError(f"pyramid strides must be 2, 4, 8, ...; got {self.strides}")
        if self.ume_stride not in self.strides:
            raise ConfigurationError(f"UME stride {self.ume_stride} is not a pyramid stride")
        if self.width % 4:
            raise ConfigurationError("width must be a multiple of 4")
        self.lta.use_local = "local" not in self.ablate
        self.lta.use_global = "global" not in self.ablate

    @property
    def uses_metadata(self) -> bool:
        return "metadata" not in self.ablate

    def to_json(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        d["ablate"] = list(self.ablate)
        d["lta"]["dwc_kernel"] = list(self.lta.dwc_kernel)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        lta = dict(d.pop("lta", {}))
        if "dwc_kernel" in lta:
            lta["dwc_kernel"] = tuple(lta["dwc_kernel"])
        return cls(lta=LtaConfig(**lta), **d)


class Decoder(nn.Module):
    """(3x3x3 conv, GELU, bilinear x2) per octave of stride, then a full-resolution
    conv that also sees the input sRGB, and a 1x1x1 head to 4 channels."""

    def __init__(self, channels: int, stride: int):
        super().__init__()
        self.octaves = int(round(math.log2(stride)))
        self.up = nn.ModuleList(nn.Conv3d(channels, channels, 3, padding=1) for _ in range(self.octaves))
        self.fuse = nn.Conv3d(channels + 3, channels, 3, padding=1)
        self.head = nn.Conv3d(channels, 4, 1)

    def forward(self, feat: torch.Tensor, srgb: torch.Tensor) -> torch.Tensor:
        x = feat
        for conv in self.up:
            x = upsample_bilinear(F.gelu(conv(x)), 2)
        x = F.gelu(self.fuse(torch.cat([x, srgb], dim=1)))
        return torch.sigmoid(self.head(x))


class RawMamba(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        C = cfg.width
        self.encoder = ConvEncoder(3, (C,) * len(cfg.strides))
        if cfg.uses_metadata:
            self.ume = UnifiedMetadataEmbedding(
                C, cfg.ume_stride, cfg.window, temperature=None if cfg.d is None else math.sqrt(cfg.d),
                use_geb="geb" not in cfg.ablate, use_leb="leb" not in cfg.ablate,
            )
            self.search = nn.ModuleList(SearchBlock(C, C) for _ in cfg.strides)
        else:
            self.ume = None
            self.search = None
        self.aggregate = FeatureAggregator(C)
        self.lta = LtaStack(C, cfg.lta)
        self.decoder = Decoder(C, min(cfg.strides))

    def encode_inputs(self, x: torch.Tensor, meta: MetadataPair):
        """Query features at the UME stride plus the encoded reference pair."""
        pyramid = self.encoder(x)
        level = self.cfg.strides.index(self.cfg.ume_stride)
        f_ref, f_raw = self.ume.encode_reference(meta)
        return pyramid[level], f_ref, f_raw

    def check_inputs(self, x: torch.Tensor, meta: MetadataPair | None, mode: str) -> None:
        if x.dim() != 5 or x.shape[1] != 3:
            raise DimensionError(f"sRGB input must be (n, 3, T, H, W), got {tuple(x.shape)}")
        if mode not in ("image", "video"):
            raise ContractError(f"unknown mode {mode!r}")
        if mode == "image" and x.shape[2] != 1:
            raise ContractError(f"image mode takes a single frame, got T={x.shape[2]}")
        big = max(self.cfg.strides)
        if x.shape[-1] % big or x.shape[-2] % big:
            raise DimensionError(f"spatial size {tuple(x.shape[-2:])} must be a multiple of {big}")
        if meta is not None and meta.kind != mode:
            raise ContractError(f"metadata kind {meta.kind!r} does not match mode {mode!r}")
        if self.ume is not None and meta is None:
            raise ContractError("this model needs metadata")

    def forward(self, x: torch.Tensor, meta: MetadataPair | None = None, mode: str | None = None) -> torch.Tensor:
        """De-render (n, 3, T, H, W) sRGB into (n, 4, T, H, W) RAW in [0, 1]."""
        mode = mode or (meta.kind if meta is not None else self.cfg.mode)
        self.check_inputs(x, meta, mode)
        pyramid = [check_finite(f, f"encoder.{i}") for i, f in enumerate(self.encoder(x))]
        if self.ume is not None:
            level = self.cfg.strides.index(self.cfg.ume_stride)
            emb = self.ume(pyramid[level], meta.to(x.dtype))
            e = check_finite(emb.e_fused, "ume")
            pyramid = [blk(f, e) for blk, f in zip(self.search, pyramid)]
        feat = check_finite(self.aggregate(pyramid, list(self.cfg.strides)), "aggregate")
        feat = self.lta(feat)
        return check_finite(self.decoder(feat, x), "decoder")
