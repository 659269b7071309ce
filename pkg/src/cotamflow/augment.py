"""Self-supervision sample construction: spatial, occlusion and appearance transforms.

Coordinates are pixel coordinates with x to the right and y down. The affine
``A`` (2x3) maps a point of the original frame to the transformed frame; the
output is the crop rectangle ``(x0, y0, h, w)`` of the transformed frame.
Flow vectors are mapped by the linear part of ``A``. With this convention a
rotation by +90 degrees turns the vector (1, 0) into (0, 1), i.e. pointing down.

Tensors are (B, C, H, W) or (C, H, W); one ``AugmentParams`` applies to every
item of a batch. ``build_selfsup_sample`` draws one parameter set per item.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .ops import bilinear_sample

MODES = ("full", "crop", "none")

GAIN_RANGE = (0.8, 1.2)
BIAS_RANGE = (-0.1, 0.1)
MAX_SIGMA = 0.02
MAX_OCCLUDERS = 3
MAX_OCCLUDER_FRAC = 0.25


@dataclass(frozen=True)
class AugmentConfig:
    mode: str = "full"
    crop_size: tuple[int, int] | None = None   # (h, w); None keeps the input size
    max_rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.15)
    max_occluders: int = MAX_OCCLUDERS
    occluder_fill: str = "mean"                 # "mean" or "noise"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"augment mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.max_occluders <= MAX_OCCLUDERS:
            raise ValueError(f"max_occluders must be in [0, {MAX_OCCLUDERS}]")
        if self.occluder_fill not in ("mean", "noise"):
            raise ValueError(f"unknown occluder_fill {self.occluder_fill!r}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")


@dataclass
class AugmentParams:
    affine: np.ndarray                            # (2, 3) float64, original -> transformed frame
    crop: tuple[int, int, int, int]               # (x0, y0, h, w) in the transformed frame
    occluders: list[tuple[int, int, int, int]] = field(default_factory=list)  # (x, y, w, h) in crop coords
    gain: np.ndarray = field(default_factory=lambda: np.ones(3))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma: float = 0.0
    seed: int = 0
    fill: str = "mean"

    @property
    def size(self) -> tuple[int, int]:
        return self.crop[2], self.crop[3]

    def check(self, frame: tuple[int, int] | None = None) -> None:
        """Raise ValueError if any range invariant is violated."""
        a = np.asarray(self.affine, dtype=np.float64)
        if a.shape != (2, 3):
            raise ValueError(f"affine must be 2x3, got {a.shape}")
        if abs(np.linalg.det(a[:, :2])) < 1e-12:
            raise ValueError("affine linear part is singular")
        g = np.asarray(self.gain)
        b = np.asarray(self.bias)
        if np.any(g < GAIN_RANGE[0]) or np.any(g > GAIN_RANGE[1]):
            raise ValueError("gain outside [0.8, 1.2]")
        if np.any(b < BIAS_RANGE[0]) or np.any(b > BIAS_RANGE[1]):
            raise ValueError("bias outside [-0.1, 0.1]")
        if not 0 <= self.sigma <= MAX_SIGMA:
            raise ValueError("noise sigma outside [0, 0.02]")
        if len(self.occluders) > MAX_OCCLUDERS:
            raise ValueError("too many occluders")
        h, w = self.size
        for ox, oy, ow, oh in self.occluders:
            if ow * oh > MAX_OCCLUDER_FRAC * h * w:
                raise ValueError("occluder larger than 25% of the frame")
            if ox < 0 or oy < 0 or ox + ow > w or oy + oh > h or ow < 1 or oh < 1:
                raise ValueError("occluder outside the crop")
        if frame is not None and not crop_inside(a, self.crop, frame):
            raise ValueError(f"crop {self.crop} leaves the transformed frame")


def identity_params(h: int, w: int, seed: int = 0) -> AugmentParams:
    return AugmentParams(affine=np.array([[1.0, 0, 0], [0, 1.0, 0]]), crop=(0, 0, h, w), seed=seed)


def _inverse(affine: np.ndarray) -> np.ndarray:
    a = np.asarray(affine, dtype=np.float64)
    lin = a[:, :2]
    if abs(np.linalg.det(lin)) < 1e-12:
        raise ValueError("affine linear part is singular")
    inv = np.linalg.inv(lin)
    return np.concatenate([inv, -inv @ a[:, 2:]], axis=1)


def crop_inside(affine: np.ndarray, crop, frame: tuple[int, int]) -> bool:
    """True if every crop pixel maps back into the source frame (corners suffice: both are convex)."""
    x0, y0, ch, cw = crop
    fh, fw = frame
    inv = _inverse(affine)
    corners = np.array([[x0, y0], [x0 + cw - 1, y0], [x0, y0 + ch - 1], [x0 + cw - 1, y0 + ch - 1]], dtype=np.float64)
    src = corners @ inv[:, :2].T + inv[:, 2]
    tol = 1e-9
    return bool(np.all(src[:, 0] >= -tol) and np.all(src[:, 0] <= fw - 1 + tol)
                and np.all(src[:, 1] >= -tol) and np.all(src[:, 1] <= fh - 1 + tol))


def _sample_linear(rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    if cfg.mode != "full":
        return np.eye(2)
    theta = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    s = rng.uniform(*cfg.scale_range)
    c, si = math.cos(theta), math.sin(theta)
    return s * np.array([[c, -si], [si, c]])


def sample_transform(rng: np.random.Generator, frame: tuple[int, int], cfg: AugmentConfig = AugmentConfig()) -> AugmentParams:
    """Draw parameters for a ``frame = (H, W)`` input. Deterministic in the rng state."""
    fh, fw = frame
    ch, cw = cfg.crop_size if cfg.crop_size is not None else frame
    if cfg.mode == "none":
        return identity_params(fh, fw, seed=int(rng.integers(2 ** 31)))
    if ch > fh or cw > fw:
        raise ValueError(f"crop {ch}x{cw} larger than frame {fh}x{fw}")

    affine = crop = None
    for _ in range(20):
        lin = _sample_linear(rng, cfg)
        a = np.concatenate([lin, np.zeros((2, 1))], axis=1)
        # bounding box of the transformed frame, in which the crop is searched
        corners = np.array([[0, 0], [fw - 1, 0], [0, fh - 1], [fw - 1, fh - 1]], dtype=np.float64) @ lin.T
        lo = np.ceil(corners.min(0)).astype(int)
        hi = np.floor(corners.max(0)).astype(int) - np.array([cw - 1, ch - 1])
        if np.any(hi < lo):
            continue
        for _ in range(20):
            x0 = int(rng.integers(lo[0], hi[0] + 1))
            y0 = int(rng.integers(lo[1], hi[1] + 1))
            if crop_inside(a, (x0, y0, ch, cw), frame):
                affine, crop = a, (x0, y0, ch, cw)
                break
        if affine is not None:
            break
    if affine is None:
        affine = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        crop = (int(rng.integers(0, fw - cw + 1)), int(rng.integers(0, fh - ch + 1)), ch, cw)

    occluders = []
    for _ in range(int(rng.integers(0, cfg.max_occluders + 1))):
        ow = int(rng.integers(max(1, cw // 8), cw // 2 + 1))
        oh = int(rng.integers(max(1, ch // 8), ch // 2 + 1))
        occluders.append((int(rng.integers(0, cw - ow + 1)), int(rng.integers(0, ch - oh + 1)), ow, oh))

    p = AugmentParams(
        affine=affine,
        crop=crop,
        occluders=occluders,
        gain=rng.uniform(*GAIN_RANGE, size=3),
        bias=rng.uniform(*BIAS_RANGE, size=3),
        sigma=float(rng.uniform(0.0, MAX_SIGMA)),
        seed=int(rng.integers(2 ** 31)),
        fill=cfg.occluder_fill,
    )
    p.check(frame)
    return p


def _source_coords(p: AugmentParams, frame: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    if not crop_inside(p.affine, p.crop, frame):
        raise ValueError(f"crop {p.crop} leaves the transformed frame {frame}")
    x0, y0, ch, cw = p.crop
    inv = _inverse(p.affine)
    gy, gx = np.meshgrid(np.arange(ch, dtype=np.float64) + y0, np.arange(cw, dtype=np.float64) + x0, indexing="ij")
    sx = inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]
    sy = inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]
    return sx, sy


def _is_identity(p: AugmentParams, frame: tuple[int, int]) -> bool:
    return (np.array_equal(p.affine, [[1, 0, 0], [0, 1, 0]])
            and tuple(p.crop) == (0, 0) + tuple(frame))


def _resample(t: torch.Tensor, p: AugmentParams) -> torch.Tensor:
    """Spatial part shared by every transform: ``out(p') = t(A^-1 (p' + crop origin))``."""
    single = t.dim() == 3
    x = t.unsqueeze(0) if single else t
    frame = tuple(x.shape[-2:])
    if _is_identity(p, frame):
        out = x.clone()
    else:
        sx, sy = _source_coords(p, frame)
        b = x.shape[0]
        xs = torch.from_numpy(sx).to(x.dtype).expand(b, *sx.shape)
        ys = torch.from_numpy(sy).to(x.dtype).expand(b, *sy.shape)
        out = bilinear_sample(x, xs, ys, padding="border")
    return out[0] if single else out


def _appearance(img: torch.Tensor, p: AugmentParams, gen: torch.Generator) -> torch.Tensor:
    c = img.shape[-3]
    shape = (1,) * (img.dim() - 3) + (c, 1, 1)
    gain = torch.as_tensor(np.resize(p.gain, c), dtype=img.dtype).view(shape)
    bias = torch.as_tensor(np.resize(p.bias, c), dtype=img.dtype).view(shape)
    out = img * gain + bias
    if p.sigma > 0:
        out = out + p.sigma * torch.randn(img.shape, generator=gen, dtype=torch.float64).to(img.dtype)
    return out.clamp(0.0, 1.0)


def apply_image_transform(i1: torch.Tensor, i2: torch.Tensor, p: AugmentParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp + crop both images, apply the shared appearance change, erase occluders in the second only."""
    if i1.shape != i2.shape:
        raise ValueError(f"image shapes differ: {tuple(i1.shape)} vs {tuple(i2.shape)}")
    frame = tuple(i1.shape[-2:])
    if _is_identity(p, frame) and not p.occluders and p.sigma == 0 \
            and np.all(np.asarray(p.gain) == 1) and np.all(np.asarray(p.bias) == 0):
        return i1.clone(), i2.clone()
    gen = torch.Generator().manual_seed(p.seed)
    c = i1.shape[-3]
    both = _resample(torch.cat([i1, i2], -3), p)
    a = _appearance(both[..., :c, :, :], p, gen)
    b = _appearance(both[..., c:, :, :], p, gen)
    if p.occluders:
        b = b.clone()
        mean = b.mean(dim=(-2, -1), keepdim=True)
        for ox, oy, ow, oh in p.occluders:
            region = b[..., oy:oy + oh, ox:ox + ow]
            if p.fill == "noise":
                fill = torch.rand(region.shape, generator=gen, dtype=torch.float64).to(b.dtype)
            else:
                fill = mean.expand_as(region)
            b[..., oy:oy + oh, ox:ox + ow] = fill
    return a, b


def apply_flow_transform(f12: torch.Tensor, p: AugmentParams) -> torch.Tensor:
    """``F'(p') = A_lin F(A^-1 p')`` on the crop."""
    lin = np.asarray(p.affine, dtype=np.float64)[:, :2]
    if abs(np.linalg.det(lin)) < 1e-12:
        raise ValueError("affine linear part is singular")
    moved = _resample(f12, p)
    if np.array_equal(lin, np.eye(2)):
        return moved
    u, v = moved[..., 0, :, :], moved[..., 1, :, :]
    return torch.stack([lin[0, 0] * u + lin[0, 1] * v, lin[1, 0] * u + lin[1, 1] * v], dim=-3)


def apply_occlusion_transform(o12: torch.Tensor, p: AugmentParams) -> torch.Tensor:
    return _resample(o12, p).clamp(0.0, 1.0)


@dataclass
class AugmentedSample:
    i1_t: torch.Tensor
    i2_t: torch.Tensor
    f_teacher_t: torch.Tensor
    o_teacher_t: torch.Tensor
    params: list[AugmentParams]


def sample_batch_params(rng: np.random.Generator, batch: int, frame: tuple[int, int],
                        cfg: AugmentConfig = AugmentConfig()) -> list[AugmentParams]:
    return [sample_transform(rng, frame, cfg) for _ in range(batch)]


def _batch_resample(t: torch.Tensor, params: list[AugmentParams]) -> torch.Tensor:
    """Per-item spatial transform of a (B, C, H, W) batch in one sampling call."""
    frame = tuple(t.shape[-2:])
    if all(_is_identity(p, frame) for p in params):
        return t.clone()
    sizes = {p.size for p in params}
    if len(sizes) != 1:
        raise ValueError("all items of a batch need the same crop size")
    coords = [_source_coords(p, frame) for p in params]
    xs = torch.from_numpy(np.stack([c[0] for c in coords])).to(t.dtype)
    ys = torch.from_numpy(np.stack([c[1] for c in coords])).to(t.dtype)
    return bilinear_sample(t, xs, ys, padding="border")


def transform_teacher(f12: torch.Tensor, o12: torch.Tensor, params: list[AugmentParams]) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched ``apply_flow_transform`` / ``apply_occlusion_transform`` (detached)."""
    if len(params) != f12.shape[0]:
        raise ValueError(f"{len(params)} parameter sets for a batch of {f12.shape[0]}")
    c = f12.shape[1]
    moved = _batch_resample(torch.cat([f12.detach(), o12.detach()], 1), params)
    flow, occ = moved[:, :c], moved[:, c:].clamp(0.0, 1.0)
    lin = torch.from_numpy(np.stack([np.asarray(p.affine, dtype=np.float64)[:, :2] for p in params])).to(flow.dtype)
    if not torch.equal(lin, torch.eye(2, dtype=lin.dtype).expand_as(lin)):
        flow = torch.einsum("bij,bjhw->bihw", lin, flow)
    return flow, occ


def transform_images(i1: torch.Tensor, i2: torch.Tensor, params: list[AugmentParams]) -> tuple[torch.Tensor, torch.Tensor]:
    """``apply_image_transform`` per item, stacked."""
    if len(params) != i1.shape[0]:
        raise ValueError(f"{len(params)} parameter sets for a batch of {i1.shape[0]}")
    out = [apply_image_transform(i1[k], i2[k], p) for k, p in enumerate(params)]
    return torch.stack([a for a, _ in out]), torch.stack([b for _, b in out])


def build_selfsup_sample(
    i1: torch.Tensor,
    i2: torch.Tensor,
    f12: torch.Tensor,
    o12: torch.Tensor,
    rng: np.random.Generator | list[AugmentParams],
    cfg: AugmentConfig = AugmentConfig(),
    images: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> AugmentedSample:
    """Transform a (B, ., H, W) batch; teacher flow and occlusion are detached.

    ``rng`` may be a generator (one draw per item) or a ready parameter list,
    which lets several networks share the same augmentation; ``images`` may
    carry already transformed images for that list.
    """
    b = i1.shape[0]
    params = rng if isinstance(rng, list) else sample_batch_params(rng, b, tuple(i1.shape[-2:]), cfg)
    if len(params) != b:
        raise ValueError(f"{len(params)} parameter sets for a batch of {b}")
    t1, t2 = images if images is not None else transform_images(i1, i2, params)
    ff, oo = transform_teacher(f12, o12, params)
    return AugmentedSample(t1, t2, ff, oo, list(params))
