"""Differentiable dense primitives on (B, C, H, W) tensors, plus a gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import _kernels


def _check_same_hw(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.dim() != 4 or b.dim() != 4 or a.shape[0] != b.shape[0] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def pixel_grid(b: int, h: int, w: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=like.dtype, device=like.device),
        torch.arange(w, dtype=like.dtype, device=like.device),
        indexing="ij",
    )
    return gx.expand(b, h, w), gy.expand(b, h, w)


def bilinear_sample(src: torch.Tensor, x: torch.Tensor, y: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Sample ``src`` (B, C, H, W) at pixel coordinates ``x``/``y`` of shape (B, *S).

    Returns (B, C, *S). ``padding="zeros"`` treats pixels outside the frame as
    zero; ``"border"`` clamps the coordinates into the frame first. Exact at
    integer coordinates.
    """
    b, c, h, w = src.shape
    if padding == "border":
        x = x.clamp(0, w - 1)
        y = y.clamp(0, h - 1)
    elif padding != "zeros":
        raise ValueError(f"unknown padding {padding!r}")
    x0f = torch.floor(x)
    y0f = torch.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.long()
    y0 = y0f.long()
    flat = src.reshape(b, c, h * w)
    out_shape = (b, c) + tuple(x.shape[1:])
    out = None
    for dx, dy, wt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(b, 1, -1).expand(b, c, -1)
        vals = flat.gather(2, idx).reshape(out_shape)
        term = vals * (wt * inside.to(wt.dtype)).unsqueeze(1)
        out = term if out is None else out + term
    return out


def bilinear_warp(src: torch.Tensor, flow: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Backward warp: ``out(p) = src(p + flow(p))``.

    Samples whose position falls outside the source rectangle are returned as
    zero and flagged 0 in the (B, 1, H, W) validity mask.
    """
    _check_same_hw(src, flow, "bilinear_warp")
    if flow.shape[1] != 2:
        raise ValueError("flow must have 2 channels")
    b, _, h, w = src.shape
    gx, gy = pixel_grid(b, h, w, flow)
    x = gx + flow[:, 0]
    y = gy + flow[:, 1]
    valid = ((x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)).to(src.dtype).unsqueeze(1)
    return bilinear_sample(src, x, y) * valid, valid


def correlation(x1: torch.Tensor, x2: torch.Tensor, radius: int) -> torch.Tensor:
    """Cost volume ``C(p, (dx, dy)) = <x1(p), x2(p + (dx, dy))> / D``.

    Output has (2r+1)**2 channels ordered row-major from (-r, -r) to (r, r),
    i.e. channel ``(dy + r) * (2r + 1) + (dx + r)``. Zero padding outside.
    """
    if x1.shape != x2.shape:
        raise ValueError(f"correlation: shape mismatch {tuple(x1.shape)} vs {tuple(x2.shape)}")
    if radius < 1:
        raise ValueError("correlation radius must be >= 1")
    return _kernels.correlation(x1, x2, radius)


def self_correlation(x: torch.Tensor, radius: int) -> torch.Tensor:
    return correlation(x, x, radius)


def image_pyramid(img: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Level 0 is the input; each further level is 2x2 average pooled."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = img.shape[-2:]
    s = 2 ** (levels - 1)
    if h % s or w % s:
        raise ValueError(f"image size {h}x{w} not divisible by {s}")
    out = [img]
    for _ in range(levels - 1):
        out.append(F.avg_pool2d(out[-1], 2))
    return out


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self) -> str:
        lines = [f"  {name:<24s} max rel err {err:.3e}" for name, err in self.errors.items()]
        lines += [f"  FAIL {msg}" for msg in self.failures]
        return "\n".join(lines)


def _scalar(outputs, weights) -> torch.Tensor:
    if isinstance(outputs, torch.Tensor):
        outputs = (outputs,)
    total = 0.0
    for i, o in enumerate(outputs):
        if not (isinstance(o, torch.Tensor) and o.is_floating_point()):
            continue
        total = total + (o * weights[i]).sum() if weights is not None else total + o.sum()
    return total


def gradcheck(
    fn: Callable,
    inputs: Sequence[torch.Tensor],
    tol: float = 1e-4,
    eps: float = 1e-5,
    params: Iterable[tuple[str, torch.Tensor]] = (),
    max_entries: int | None = None,
    random_projection: bool = False,
    seed: int = 0,
) -> GradcheckReport:
    """Compare autograd gradients of ``fn(*inputs)`` with central differences.

    The objective is the sum of all floating outputs (or a fixed random
    projection of them). Inputs with ``requires_grad`` and the extra named
    ``params`` (tensors ``fn`` closes over, e.g. module weights) are checked;
    they are perturbed in place. The error per tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over the
    checked entries. Run in float64.
    """
    report = GradcheckReport(tol=tol)
    named = [(f"input{i}", t) for i, t in enumerate(inputs) if isinstance(t, torch.Tensor) and t.requires_grad]
    named += list(params)
    if not named:
        raise ValueError("nothing to check: no input requires grad")

    weights = None
    if random_projection:
        with torch.no_grad():
            outs = fn(*inputs)
        outs = (outs,) if isinstance(outs, torch.Tensor) else outs
        gen = torch.Generator().manual_seed(seed)
        weights = [torch.randn(o.shape, generator=gen, dtype=o.dtype) if isinstance(o, torch.Tensor) else None
                   for o in outs]

    objective = _scalar(fn(*inputs), weights)
    grads = torch.autograd.grad(objective, [t for _, t in named], allow_unused=True)
    rng = np.random.default_rng(seed)
    for (name, t), g in zip(named, grads):
        analytic = torch.zeros_like(t) if g is None else g.detach()
        if not torch.all(torch.isfinite(analytic)):
            report.failures.append(f"{name}: non-finite analytic gradient")
            report.errors[name] = float("inf")
            continue
        flat = t.data.view(-1)
        a_flat = analytic.reshape(-1)
        n = flat.numel()
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        numeric = np.empty(len(idx))
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(_scalar(fn(*inputs), weights))
                flat[i] = orig - eps
                fm = float(_scalar(fn(*inputs), weights))
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * eps)
        a = a_flat[torch.as_tensor(idx, dtype=torch.long)].double().numpy()
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        err = 0.0 if scale == 0 else float(np.abs(a - numeric).max() / scale)
        report.errors[name] = err
        if not np.isfinite(err) or err >= tol:
            report.failures.append(f"{name}: relative error {err:.3e} >= {tol:.1e}")
    return report
