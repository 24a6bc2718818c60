"""Dense tensor primitives, reverse-mode gradients and a finite-difference checker.

Tensors are ``torch.Tensor`` values; torch's autograd graph plays the role of
the tape.  The primitives below wrap the handful of operations the model is
built from and enforce the package's shape and finiteness contracts: every
primitive fails fast on NaN/Inf output instead of propagating it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, DimensionError, EvaluationError

Tensor = torch.Tensor


def check_finite(x: Tensor, name: str) -> Tensor:
    """Return ``x`` unchanged, raising :class:`EvaluationError` if it holds NaN/Inf."""
    if not bool(torch.isfinite(x).all()):
        raise EvaluationError(f"non-finite values produced by {name}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match exactly."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return check_finite(torch.matmul(a, b), "matmul")


def softmax(x: Tensor, axis: int = -1, mask: Tensor | None = None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` (boolean, broadcastable to ``x``) excludes entries: they receive
    probability zero.  A slice with every entry excluded is an error.
    """
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.dim()}")
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    shift = x.detach().amax(dim=axis, keepdim=True)
    if not bool(torch.isfinite(shift).all()):
        raise EvaluationError("softmax slice has no admissible entry")
    e = torch.exp(x - shift)
    return check_finite(e / e.sum(dim=axis, keepdim=True), "softmax")


def layer_norm(
    x: Tensor,
    axis: int = -1,
    gain: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each slice along ``axis`` to zero mean / unit variance, then apply the affine map."""
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    if x.dim() == 0 or x.shape[axis] < 1:
        raise DimensionError(f"layer_norm needs a non-empty axis, got shape {tuple(x.shape)}")
    mu = x.mean(dim=axis, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=axis, keepdim=True)
    y = xc / torch.sqrt(var + eps)
    if gain is not None or bias is not None:
        shape = [1] * x.dim()
        shape[axis] = x.shape[axis]
        if gain is not None:
            y = y * gain.reshape(shape)
        if bias is not None:
            y = y + bias.reshape(shape)
    return check_finite(y, "layer_norm")


def depthwise_conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3-D convolution with 'same' zero padding.

    ``x`` is ``n x C x T x H x W`` and ``kernel`` is ``C x kt x kh x kw`` with
    odd extents.
    """
    if x.dim() != 5 or kernel.dim() != 4 or kernel.shape[0] != x.shape[1]:
        raise DimensionError(
            f"depthwise_conv3d shape mismatch: input {tuple(x.shape)}, kernel {tuple(kernel.shape)}"
        )
    if any(k % 2 == 0 for k in kernel.shape[1:]):
        raise ConfigurationError(f"depthwise kernel extents must be odd, got {tuple(kernel.shape[1:])}")
    pad = tuple(k // 2 for k in kernel.shape[1:])
    y = F.conv3d(x, kernel.unsqueeze(1), bias, padding=pad, groups=x.shape[1])
    return check_finite(y, "depthwise_conv3d")


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes, half-pixel centres (align_corners off)."""
    if x.dim() < 2:
        raise DimensionError("resize_bilinear needs at least two axes")
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    y = F.interpolate(x.reshape(-1, 1, h, w), size=tuple(size), mode="bilinear", align_corners=False)
    return check_finite(y.reshape(*lead, *size), "resize_bilinear")


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Upsample the last two axes by an integer factor."""
    if int(factor) != factor or factor < 1:
        raise ConfigurationError(f"upsample factor must be an integer >= 1, got {factor}")
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    return resize_bilinear(x, (h * int(factor), w * int(factor)))


def backward(output: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar ``output`` w.r.t. each parameter.

    Parameters the output does not depend on receive zeros.  The graph is
    released afterwards.
    """
    if output.numel() != 1:
        raise ContractError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    params = list(params)
    if not output.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(output.reshape(()), params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class GradCheckReport:
    """Outcome of :func:`grad_check`: one max relative error per parameter."""

    errors: list[float] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare autograd gradients of ``f()`` against central differences.

    ``params`` are float64 leaf tensors with ``requires_grad`` set, read by
    ``f`` through closure.  The error for one parameter is
    ``max |g_ad - g_fd| / max(1, |g_fd|)`` over its entries.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ContractError("grad_check requires float64 parameters")
    analytic = backward(f(), params)
    report = GradCheckReport(tol=tol)
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, analytic)):
            flat = p.view(-1)
            fd = torch.empty_like(flat)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                fp = float(f())
                flat[j] = orig - h
                fm = float(f())
                flat[j] = orig
                if not (torch.isfinite(torch.tensor(fp)) and torch.isfinite(torch.tensor(fm))):
                    raise EvaluationError(f"non-finite objective when perturbing parameter {i}, entry {j}")
                fd[j] = (fp - fm) / (2 * h)
            diff = (g.reshape(-1) - fd).abs() / fd.abs().clamp(min=1.0)
            report.errors.append(float(diff.max()) if diff.numel() else 0.0)
    return report
