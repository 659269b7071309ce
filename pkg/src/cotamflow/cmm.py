"""Cost-volume modulation: sparse deformable aggregation over a K-point grid.

``dense_modulation`` is the dense neighbourhood-weighted form the sparse
scheme generalises; it runs on numpy arrays and serves as a reference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import _kernels
from .ops import pixel_grid


def kernel_grid(kernel_size: int = 3) -> torch.Tensor:
    """Fixed integer offsets (K, 2) as (dx, dy), row-major with dy outer."""
    r = kernel_size // 2
    return torch.tensor([(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)], dtype=torch.long)


@dataclass
class SamplePointSet:
    base: torch.Tensor      # (K, 2) integer (dx, dy)
    offsets: torch.Tensor   # (B, K, 2, H, W) learned (dx, dy)
    masks: torch.Tensor     # (B, K, H, W) in [0, 1]
    weights: torch.Tensor   # (K,)

    @property
    def k(self) -> int:
        return self.base.shape[0]


def deformable_aggregate(c: torch.Tensor, pts: SamplePointSet) -> torch.Tensor:
    """``sum_k w_k * C(p + p_k + dp_k(p), f) * m_k(p)``, shared over channels f."""
    b, _, h, w = c.shape
    gx, gy = pixel_grid(b, h, w, c)
    base = pts.base.to(c.dtype)
    x = gx.unsqueeze(1) + base[:, 0].view(1, -1, 1, 1) + pts.offsets[:, :, 0]
    y = gy.unsqueeze(1) + base[:, 1].view(1, -1, 1, 1) + pts.offsets[:, :, 1]
    coef = pts.masks * pts.weights.view(1, -1, 1, 1)
    return _kernels.deformable_sample(c, x, y, coef)


class CostVolumeModulation(nn.Module):
    """Offset/mask head (zero-initialised) plus K learned kernel weights.

    Kernel weights start as ``2 * delta_center``: with the zero head every
    mask is ``sigmoid(0) = 0.5``, so a fresh module is the identity.
    """

    def __init__(self, radius: int = 4, kernel_size: int = 3):
        super().__init__()
        self.kernel_size = kernel_size
        k = kernel_size ** 2
        self.register_buffer("base", kernel_grid(kernel_size), persistent=False)
        self.head = nn.Conv2d((2 * radius + 1) ** 2, 3 * k, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        init = torch.zeros(k)
        init[k // 2] = 2.0
        self.weights = nn.Parameter(init)

    def offsets(self, c: torch.Tensor) -> SamplePointSet:
        raw = self.head(c)
        b, _, h, w = raw.shape
        k = self.base.shape[0]
        return SamplePointSet(
            base=self.base,
            offsets=raw[:, :2 * k].reshape(b, k, 2, h, w),
            masks=torch.sigmoid(raw[:, 2 * k:]),
            weights=self.weights,
        )

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return deformable_aggregate(c, self.offsets(c))


def cmm_offsets(c: torch.Tensor, params: CostVolumeModulation) -> SamplePointSet:
    return params.offsets(c)


def cmm_modulate(c: torch.Tensor, params: CostVolumeModulation) -> torch.Tensor:
    return params(c)


def dense_modulation(c: np.ndarray, weights: np.ndarray, radius: int) -> np.ndarray:
    """``C'(p, f) = sum_{q in N(p)} w(p, q) C(q, f)`` with zero padding.

    c: (H, W, F); weights: (H, W, (2r+1)**2), neighbour index
    ``(dy + r) * (2r + 1) + (dx + r)``; every row must sum to 1.
    """
    c = np.asarray(c, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    k = (2 * radius + 1) ** 2
    if c.ndim != 3 or weights.shape != c.shape[:2] + (k,):
        raise ValueError(f"dense_modulation: weights {weights.shape} do not match volume {c.shape}")
    if np.abs(weights.sum(-1) - 1.0).max() > 1e-6:
        raise ValueError("dense_modulation: weight rows must sum to 1")
    return _kernels.dense_modulate(c, weights, radius)
