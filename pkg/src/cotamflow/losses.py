"""Photometric, smoothness and self-supervision losses.

Stop-gradient inputs are detached inside the loss functions, so callers may
pass live tensors without coupling graphs.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import _kernels
from .ops import bilinear_warp

CHARBONNIER_EPS = 1e-3
DENOM_EPS = 1e-6
L1_WEIGHT = 0.15
CENSUS_WEIGHT = 0.85
CENSUS_SIZE = 7
SMOOTH_EDGE_WEIGHT = 50.0

_GRAY = (0.299, 0.587, 0.114)


def charbonnier(x: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(x * x + CHARBONNIER_EPS ** 2)


def _gray255(img: torch.Tensor) -> torch.Tensor:
    if img.shape[1] == 3:
        w = torch.tensor(_GRAY, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
        return (img * w).sum(1) * 255.0
    return img.mean(1) * 255.0


def census_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Soft Hamming distance of 7x7 census signatures, in [0, 1). Shape (B, 1, H, W).

    Per neighbour: ``x**2 / (0.1 + x**2)`` on the difference of the
    normalised intensity offsets ``t / sqrt(0.81 + t**2)``.
    """
    return _kernels.census_distance(_gray255(a), _gray255(b), CENSUS_SIZE // 2).unsqueeze(1)


def photometric_difference(i1: torch.Tensor, i2w: torch.Tensor) -> torch.Tensor:
    """``0.15 * mean_c |i1 - i2w| + 0.85 * census distance``, shape (B, 1, H, W)."""
    if i1.shape != i2w.shape:
        raise ValueError(f"photometric_difference: shape mismatch {tuple(i1.shape)} vs {tuple(i2w.shape)}")
    l1 = (i1 - i2w).abs().mean(1, keepdim=True)
    return L1_WEIGHT * l1 + CENSUS_WEIGHT * census_distance(i1, i2w)


def photometric_loss(i1: torch.Tensor, i2: torch.Tensor, f12: torch.Tensor, o12: torch.Tensor) -> torch.Tensor:
    """Occlusion-masked Charbonnier photometric loss; warp-invalid pixels count as occluded."""
    i2w, valid = bilinear_warp(i2, f12)
    weight = (1.0 - o12.detach()) * valid
    penalty = charbonnier(photometric_difference(i1, i2w))
    return (penalty * weight).sum() / (weight.sum() + DENOM_EPS)


def smoothness_loss(i1: torch.Tensor, f12: torch.Tensor) -> torch.Tensor:
    """Second-order edge-aware smoothness.

    Image gradients are central differences, flow curvature is
    ``f(p+1) - 2 f(p) + f(p-1)`` summed over both flow channels; pixels
    lacking a neighbour along a direction contribute nothing. Normalised by
    the total pixel count.
    """
    n = f12.shape[0] * f12.shape[2] * f12.shape[3]
    total = f12.new_zeros(())
    if f12.shape[3] >= 3:
        gx = ((i1[..., 2:] - i1[..., :-2]) / 2).abs().sum(1)
        fxx = (f12[..., 2:] - 2 * f12[..., 1:-1] + f12[..., :-2]).abs().sum(1)
        total = total + (torch.exp(-SMOOTH_EDGE_WEIGHT * gx) * fxx).sum()
    if f12.shape[2] >= 3:
        gy = ((i1[..., 2:, :] - i1[..., :-2, :]) / 2).abs().sum(1)
        fyy = (f12[..., 2:, :] - 2 * f12[..., 1:-1, :] + f12[..., :-2, :]).abs().sum(1)
        total = total + (torch.exp(-SMOOTH_EDGE_WEIGHT * gy) * fyy).sum()
    return total / n


def selfsup_loss(f_t: torch.Tensor, f_s: torch.Tensor, o_ss: torch.Tensor) -> torch.Tensor:
    """Charbonnier end-point distance to the (frozen) teacher, weighted by ``o_ss``."""
    r = f_t.detach() - f_s
    # charbonnier of the L2 norm, written without the inner sqrt (finite gradient at 0)
    penalty = torch.sqrt((r * r).sum(1, keepdim=True) + CHARBONNIER_EPS ** 2)
    weight = o_ss.detach()
    return (penalty * weight).sum() / (weight.sum() + DENOM_EPS)


@dataclass
class LossBreakdown:
    l_ph: torch.Tensor
    l_sm: torch.Tensor
    l_ss: torch.Tensor
    total: torch.Tensor
    lambda1: float
    lambda2: float
    empty_ph: bool = False
    empty_ss: bool = False

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_ph", "l_sm", "l_ss", "total")}


def total_loss(
    i1: torch.Tensor,
    i2: torch.Tensor,
    f12: torch.Tensor,
    o_other: torch.Tensor,
    f_t: torch.Tensor | None,
    f_s: torch.Tensor | None,
    o_ss_other: torch.Tensor | None,
    lambda1: float,
    lambda2: float,
) -> LossBreakdown:
    """``L_ph + lambda1 * L_sm + lambda2 * L_ss``.

    ``o_other`` and ``o_ss_other`` normally come from the peer network. With
    ``lambda2 == 0`` the self-supervision inputs may be ``None``.
    """
    l_ph = photometric_loss(i1, i2, f12, o_other)
    l_sm = smoothness_loss(i1, f12)
    total = l_ph + lambda1 * l_sm
    empty_ss = True
    if lambda2 != 0 and f_s is not None:
        l_ss = selfsup_loss(f_t, f_s, o_ss_other)
        total = total + lambda2 * l_ss
        empty_ss = bool(o_ss_other.sum() == 0)
    else:
        l_ss = f12.new_zeros(())
    _, valid = bilinear_warp(i2[:, :1], f12.detach())
    empty_ph = bool(((1.0 - o_other.detach()) * valid).sum() == 0)
    return LossBreakdown(l_ph, l_sm, l_ss, total, lambda1, lambda2, empty_ph, empty_ss)
