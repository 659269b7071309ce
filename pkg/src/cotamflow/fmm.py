"""Flow modulation: re-sample the upsampled flow along a learned local displacement."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import photometric_difference
from .ops import bilinear_sample, bilinear_warp, pixel_grid, self_correlation


def confidence_map(i1: torch.Tensor, i2: torch.Tensor, f_up: torch.Tensor) -> torch.Tensor:
    """``exp(-|B(i1, warp(i2, f_up))|)`` in (0, 1], shape (B, 1, H, W).

    Pixels whose warp sample leaves the frame get the per-image least
    confident value ``exp(-max B)``.
    """
    if i1.shape != i2.shape or i1.shape[-2:] != f_up.shape[-2:]:
        raise ValueError("confidence_map: inputs must share H x W")
    i2w, valid = bilinear_warp(i2, f_up)
    diff = photometric_difference(i1, i2w)
    worst = diff.amax(dim=(1, 2, 3), keepdim=True)
    diff = torch.where(valid > 0, diff, worst)
    return torch.exp(-diff.abs())


def displacement_warp(f_up: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """``F(p) = f_up(p + d(p))`` with border clamping, so every pixel gets a flow."""
    if f_up.shape != d.shape:
        raise ValueError(f"displacement_warp: shape mismatch {tuple(f_up.shape)} vs {tuple(d.shape)}")
    b, _, h, w = f_up.shape
    gx, gy = pixel_grid(b, h, w, d)
    return bilinear_sample(f_up, gx + d[:, 0], gy + d[:, 1], padding="border")


class FlowModulation(nn.Module):
    """Confidence + self-cost volume -> bounded displacement -> re-sampled flow.

    The last conv is zero-initialised, so a fresh module returns its input
    flow unchanged. ``|D| <= radius`` through a scaled tanh.
    """

    def __init__(self, radius: int = 4, hidden: tuple[int, int] = (64, 32)):
        super().__init__()
        self.radius = radius
        c_in = 1 + (2 * radius + 1) ** 2
        self.conv1 = nn.Conv2d(c_in, hidden[0], 3, padding=1)
        self.conv2 = nn.Conv2d(hidden[0], hidden[1], 3, padding=1)
        self.conv3 = nn.Conv2d(hidden[1], 2, 3, padding=1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def displacement(self, conf: torch.Tensor, cs: torch.Tensor) -> torch.Tensor:
        x = torch.cat([conf, cs], 1)
        x = F.leaky_relu(self.conv1(x), 0.1)
        x = F.leaky_relu(self.conv2(x), 0.1)
        return self.radius * torch.tanh(self.conv3(x))

    def forward(self, f_up, x1, i1, i2):
        conf = confidence_map(i1, i2, f_up)
        cs = self_correlation(x1, self.radius)
        return displacement_warp(f_up, self.displacement(conf, cs))


def fmm_modulate(f_up, x1, i1, i2, params: FlowModulation) -> torch.Tensor:
    return params(f_up, x1, i1, i2)
