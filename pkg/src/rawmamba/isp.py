"""Synthetic RAW scenes and a small forward ISP.

RAW frames are 4 x H x W arrays in the packed [R, Gr, Gb, B] layout with
linear values in [0, 1].  The ISP averages the greens, applies white
balance, a colour matrix, a global gamma and a mean-normalizing local tone
curve, then quantizes to 8 bits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError

DEFAULT_CCM = (
    (1.60, -0.45, -0.15),
    (-0.25, 1.45, -0.20),
    (-0.05, -0.55, 1.60),
)


@dataclass(frozen=True)
class IspParams:
    wb_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ccm: tuple[tuple[float, float, float], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    gamma: float = 1 / 2.2
    ltm_strength: float = 0.0
    ltm_radius: int = 4

    def validate(self) -> None:
        if len(self.wb_gains) != 3 or any(not g > 0 for g in self.wb_gains):
            raise ConfigurationError(f"white-balance gains must be 3 positive values, got {self.wb_gains}")
        ccm = np.asarray(self.ccm, dtype=np.float64)
        if ccm.shape != (3, 3) or np.abs(ccm.sum(axis=1) - 1).max() > 1e-9:
            raise ConfigurationError("colour matrix must be 3x3 with unit row sums")
        if not self.gamma > 0:
            raise ConfigurationError("gamma must be positive")
        if not 0 <= self.ltm_strength <= 0.5:
            raise ConfigurationError("local tone-mapping strength must lie in [0, 0.5]")
        if self.ltm_radius < 0:
            raise ConfigurationError("local tone-mapping radius must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "IspParams":
        return cls(
            wb_gains=tuple(d["wb_gains"]),
            ccm=tuple(tuple(r) for r in d["ccm"]),
            gamma=d["gamma"],
            ltm_strength=d["ltm_strength"],
            ltm_radius=d["ltm_radius"],
        )


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    frames: int = 5
    height: int = 32
    width: int = 32
    velocity: tuple[float, float] = (0.0, 0.0)  # (dx, dy) pixels per frame
    margin: int | None = None
    regions: int = 6


def quantize(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def _canvas(rng: np.random.Generator, H: int, W: int, regions: int) -> np.ndarray:
    """Smooth random colour field plus flat-coloured rectangles and discs, 3 x H x W."""
    base_colour = rng.uniform(0.05, 0.45, size=3)
    field_ = np.empty((3, H, W))
    for c in range(3):
        noise = rng.standard_normal((H, W))
        sm = ndimage.gaussian_filter(noise, sigma=rng.uniform(2.0, 6.0), mode="wrap")
        sm = sm / (np.abs(sm).max() + 1e-12)
        field_[c] = base_colour[c] * (1 + 0.6 * sm)
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(regions):
        colour = rng.uniform(0.02, 0.7, size=3)
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        if rng.random() < 0.5:
            hh, ww = rng.uniform(3, H / 3), rng.uniform(3, W / 3)
            m = (np.abs(yy - cy) < hh) & (np.abs(xx - cx) < ww)
        else:
            r = rng.uniform(2, min(H, W) / 4)
            m = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        shade = 1 + 0.15 * (yy - cy) / H
        field_[:, m] = (colour[:, None] * shade[m][None, :])
    detail = ndimage.gaussian_filter(rng.standard_normal((H, W)), 0.7)
    field_ *= 1 + 0.04 * detail / (np.abs(detail).max() + 1e-12)
    return np.clip(field_, 0.0, 1.0)


def synth_raw(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Generate a translating RAW clip.

    Returns ``raw`` (T, 4, H, W) and ``flow`` (T, 2, H, W).  Frame t is frame 0
    translated by ``t * velocity``; ``flow[t]`` holds that displacement
    ((dx, dy) per pixel).
    """
    T, H, W = spec.frames, spec.height, spec.width
    if T < 1 or H < 1 or W < 1:
        raise ConfigurationError("scene needs positive frame count and resolution")
    vx, vy = spec.velocity
    need = math.ceil(max(abs(vx), abs(vy)) * (T - 1)) + 1
    margin = need if spec.margin is None else spec.margin
    if margin < need:
        raise ConfigurationError(f"displacement {need - 1} px exceeds canvas margin {margin}")
    rng = np.random.default_rng(spec.seed)
    canvas = _canvas(rng, H + 2 * margin, W + 2 * margin, spec.regions)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    raw = np.empty((T, 4, H, W))
    flow = np.empty((T, 2, H, W))
    for t in range(T):
        sy = yy + margin - t * vy
        sx = xx + margin - t * vx
        rgb = np.stack([ndimage.map_coordinates(canvas[c], [sy, sx], order=1, mode="nearest") for c in range(3)])
        raw[t] = np.stack([rgb[0], rgb[1], rgb[1], rgb[2]])
        flow[t, 0] = t * vx
        flow[t, 1] = t * vy
    return np.clip(raw, 0.0, 1.0), flow


def box_mean(img: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return img
    return ndimage.uniform_filter(img, size=2 * radius + 1, mode="reflect")


def isp_forward(raw: np.ndarray, p: IspParams, quantized: bool = True) -> np.ndarray:
    """RAW (4, H, W) -> sRGB (3, H, W) in [0, 1], quantized to multiples of 1/255."""
    p.validate()
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] != 4:
        raise ConfigurationError(f"RAW frame must be 4 x H x W, got {raw.shape}")
    rgb = np.stack([raw[0], 0.5 * (raw[1] + raw[2]), raw[3]])
    rgb = rgb * np.asarray(p.wb_gains)[:, None, None]
    rgb = np.einsum("ij,jhw->ihw", np.asarray(p.ccm), rgb)
    rgb = np.clip(rgb, 0.0, 1.0) ** p.gamma
    if p.ltm_strength > 0:
        lum = box_mean(rgb.mean(axis=0), p.ltm_radius)
        rgb = rgb * (lum + 1e-3)[None] ** (-p.ltm_strength)
        rgb = rgb / max(1.0, float(rgb.max()))
    rgb = np.clip(rgb, 0.0, 1.0)
    return quantize(rgb) if quantized else rgb


def sampling_stride(rate: float) -> int:
    if not 0 < rate <= 1:
        raise ConfigurationError(f"sampling rate must lie in (0, 1], got {rate}")
    return math.ceil(1 / math.sqrt(rate) - 1e-12)


def sample_metadata(raw: np.ndarray, rate: float = 0.015) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-grid sampling: returns ``mask`` (H, W) and ``raw * mask``."""
    s = sampling_stride(rate)
    H, W = raw.shape[-2:]
    mask = np.zeros((H, W))
    mask[::s, ::s] = 1.0
    return mask, raw * mask


@dataclass
class IspRanges:
    wb: tuple[float, float] = (0.7, 1.4)
    gamma: tuple[float, ...] = (1 / 2.2,)
    ltm_strength: tuple[float, float] = (0.0, 0.4)
    ltm_radius: tuple[int, ...] = (4, 8)
    velocity: float = 1.5
    ccm: tuple = field(default=DEFAULT_CCM)


def random_isp_params(rng: np.random.Generator, ranges: IspRanges = IspRanges()) -> IspParams:
    return IspParams(
        wb_gains=tuple(float(v) for v in rng.uniform(*ranges.wb, size=3)),
        ccm=tuple(tuple(r) for r in ranges.ccm),
        gamma=float(rng.choice(ranges.gamma)),
        ltm_strength=float(rng.uniform(*ranges.ltm_strength)),
        ltm_radius=int(rng.choice(ranges.ltm_radius)),
    )
