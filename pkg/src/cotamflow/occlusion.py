"""Soft occlusion from forward/backward flow via the range map of the backward flow.

All outputs are plain data (no autograd history): occlusion is always consumed
under stop-gradient.
"""
from __future__ import annotations

from typing import Callable

import torch

from . import _kernels


def _as_batch(flow: torch.Tensor) -> torch.Tensor:
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"flow must be (B, 2, H, W), got {tuple(flow.shape)}")
    return flow


def range_map(f21: torch.Tensor) -> torch.Tensor:
    """Bilinear mass splatted onto image 1 by every pixel of image 2 moved along ``f21``.

    Returns (B, 1, H, W). A pixel receiving no mass has no correspondence.
    """
    f21 = _as_batch(f21)
    mass = _kernels.splat_range(f21.detach().cpu().numpy())
    return torch.from_numpy(mass).to(f21.dtype).unsqueeze(1)


def occlusion_map(f12: torch.Tensor, f21: torch.Tensor) -> torch.Tensor:
    """``clamp(1 - range_map(f21), 0, 1)``; pixels whose forward flow leaves the frame are set to 1."""
    f12 = _as_batch(f12)
    f21 = _as_batch(f21)
    if f12.shape != f21.shape:
        raise ValueError(f"occlusion_map: shape mismatch {tuple(f12.shape)} vs {tuple(f21.shape)}")
    occ = (1.0 - range_map(f21)).clamp(0.0, 1.0)
    f12 = f12.detach()
    _, _, h, w = f12.shape
    gy, gx = torch.meshgrid(torch.arange(h, dtype=f12.dtype), torch.arange(w, dtype=f12.dtype), indexing="ij")
    x = gx + f12[:, 0]
    y = gy + f12[:, 1]
    outside = ((x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)).unsqueeze(1)
    return torch.where(outside, torch.ones_like(occ), occ)


def selfsup_occlusion(o_teacher_t: torch.Tensor, o_aug: torch.Tensor) -> torch.Tensor:
    """Pixels occluded in the augmented view but visible in the transformed teacher view."""
    if o_teacher_t.shape != o_aug.shape:
        raise ValueError(f"selfsup_occlusion: shape mismatch {tuple(o_teacher_t.shape)} vs {tuple(o_aug.shape)}")
    return (o_aug.detach() - o_teacher_t.detach()).clamp(0.0, 1.0)


# estimator hook used by the trainer; swap to try another occlusion model
OcclusionEstimator = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
default_estimator: OcclusionEstimator = occlusion_map
