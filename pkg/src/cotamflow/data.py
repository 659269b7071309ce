"""Synthetic layered-translation scenes with exact ground truth, directory loaders and batching.

Images are float32 (H, W, 3) arrays in [0, 1]; flows are (H, W, 2).

Synthetic scenes are rendered analytically: every layer carries a texture
made of a few sinusoids, so a translated layer is evaluated exactly at the
shifted coordinates (no resampling). Layer 0 is the background, later layers
are ellipses or rectangles painted on top. The flow of a pixel of image 1 is
the translation of the topmost layer there; it is occluded if its target
leaves the frame or is covered in image 2 by a different layer.

Bilinear photoconsistency of ``warp(i2, gt_flow)`` holds to roughly 1e-2 on
visible pixels whose 2x2 sampling footprint stays within one layer. Pixels next
to a layer edge mix two layers and are excluded by ``footprint_mask``.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from . import flowio


@dataclass(frozen=True)
class SynthConfig:
    size: tuple[int, int] = (64, 64)
    texture_wavelength: tuple[float, float] = (18.0, 48.0)   # min/max sinusoid wavelength, px
    texture_components: int = 6
    patches: tuple[int, int] = (1, 3)                         # min/max foreground patches
    max_translation: float = 8.0
    patch_size: tuple[float, float] = (0.15, 0.35)           # radius range as a fraction of min(H, W)
    occlusion_target: float | None = None                     # resample patches until within +-0.05 (best effort)
    seed: int = 0
    zero_motion: bool = False

    def __post_init__(self):
        h, w = self.size
        if self.max_translation >= min(h, w) / 4:
            raise ValueError(f"max_translation {self.max_translation} must be < min(size)/4 = {min(h, w) / 4}")
        lo, hi = self.patches
        if not 0 <= lo <= hi:
            raise ValueError("patches must satisfy 0 <= min <= max")
        if self.texture_wavelength[0] <= 2 or self.texture_wavelength[0] > self.texture_wavelength[1]:
            raise ValueError("texture_wavelength must satisfy 2 < min <= max")


@dataclass
class SamplePair:
    i1: np.ndarray
    i2: np.ndarray
    gt_flow: np.ndarray | None = None
    gt_occ: np.ndarray | None = None
    valid: np.ndarray | None = None
    gt_flow_bwd: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        has = [self.gt_flow is not None, self.gt_occ is not None]
        if any(has) and not all(has) and self.valid is None:
            raise ValueError("synthetic pairs carry gt_flow and gt_occ together")


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class _Layer:
    kind: str                       # "background", "ellipse", "rect"
    center: np.ndarray              # (x, y) in image 1
    radii: np.ndarray               # (rx, ry); ignored for the background
    angle: float
    motion: np.ndarray              # (u, v)
    freqs: np.ndarray               # (K, 2) cycles per pixel
    phases: np.ndarray              # (K, 3)
    amps: np.ndarray                # (K, 3)
    base: np.ndarray                # (3,)

    def texture(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Texture at layer-local (image 1) coordinates; (..., 3)."""
        arg = 2 * np.pi * (x[..., None] * self.freqs[:, 0] + y[..., None] * self.freqs[:, 1])  # (..., K)
        out = np.broadcast_to(self.base, x.shape + (3,)).copy()
        for c in range(3):
            out[..., c] += (self.amps[:, c] * np.sin(arg + self.phases[:, c])).sum(-1)
        return out

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.kind == "background":
            return np.ones(x.shape, dtype=bool)
        c, s = np.cos(self.angle), np.sin(self.angle)
        dx, dy = x - self.center[0], y - self.center[1]
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        if self.kind == "ellipse":
            return (lx / self.radii[0]) ** 2 + (ly / self.radii[1]) ** 2 <= 1.0
        return (np.abs(lx) <= self.radii[0]) & (np.abs(ly) <= self.radii[1])


def _random_texture(rng: np.random.Generator, cfg: SynthConfig):
    k = cfg.texture_components
    lo, hi = cfg.texture_wavelength
    lam = np.exp(rng.uniform(np.log(lo), np.log(hi), size=k))
    theta = rng.uniform(0, np.pi, size=k)
    freqs = np.stack([np.cos(theta), np.sin(theta)], 1) / lam[:, None]
    phases = rng.uniform(0, 2 * np.pi, size=(k, 3))
    amps = rng.uniform(0.02, 0.08, size=(k, 3))
    base = rng.uniform(0.25, 0.75, size=3)
    return freqs, phases, amps, base


def _random_motion(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    if cfg.zero_motion:
        return np.zeros(2)
    r = cfg.max_translation * np.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * np.pi)
    return np.array([r * np.cos(a), r * np.sin(a)])


def _make_layers(rng: np.random.Generator, cfg: SynthConfig, global_only: bool = False) -> list[_Layer]:
    h, w = cfg.size
    layers = [_Layer("background", np.zeros(2), np.zeros(2), 0.0, _random_motion(rng, cfg), *_random_texture(rng, cfg))]
    if global_only:
        return layers
    n = int(rng.integers(cfg.patches[0], cfg.patches[1] + 1))
    m = min(h, w)
    for _ in range(n):
        kind = "ellipse" if rng.uniform() < 0.5 else "rect"
        radii = rng.uniform(cfg.patch_size[0] * m, cfg.patch_size[1] * m, size=2)
        center = np.array([rng.uniform(0, w - 1), rng.uniform(0, h - 1)])
        layers.append(_Layer(kind, center, radii, float(rng.uniform(0, np.pi)), _random_motion(rng, cfg),
                             *_random_texture(rng, cfg)))
    return layers


def _label(layers: list[_Layer], x: np.ndarray, y: np.ndarray, frame: int) -> np.ndarray:
    """Index of the topmost layer at (x, y) of image ``frame`` (1 or 2)."""
    lab = np.zeros(x.shape, dtype=np.int64)
    for k, layer in enumerate(layers[1:], start=1):
        shift = layer.motion if frame == 2 else np.zeros(2)
        lab[layer.inside(x - shift[0], y - shift[1])] = k
    return lab


def _render(layers: list[_Layer], x: np.ndarray, y: np.ndarray, frame: int) -> tuple[np.ndarray, np.ndarray]:
    lab = _label(layers, x, y, frame)
    img = np.zeros(x.shape + (3,))
    for k, layer in enumerate(layers):
        sel = lab == k
        if not sel.any():
            continue
        shift = layer.motion if frame == 2 else np.zeros(2)
        img[sel] = layer.texture(x[sel] - shift[0], y[sel] - shift[1])
    return np.clip(img, 0.0, 1.0), lab


def _quantize16(img: np.ndarray) -> np.ndarray:
    # snap to 16-bit levels so the PNG cache round-trips bit-exactly
    return (np.rint(img * 65535.0) / 65535.0).astype(np.float32)


def _scene(layers: list[_Layer], size: tuple[int, int]) -> SamplePair:
    h, w = size
    y, x = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    i1, lab1 = _render(layers, x, y, 1)
    i2, lab2 = _render(layers, x, y, 2)
    motions = np.stack([l.motion for l in layers])
    flow = motions[lab1]
    bwd = -motions[lab2]
    tx, ty = x + flow[..., 0], y + flow[..., 1]
    outside = (tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)
    covered = _label(layers, tx, ty, 2) != lab1
    occ = (outside | covered).astype(np.float32)
    return SamplePair(_quantize16(i1), _quantize16(i2), flow.astype(np.float32), occ,
                      gt_flow_bwd=bwd.astype(np.float32))


def synth_pair(cfg: SynthConfig, rng: np.random.Generator | int | None = None, global_only: bool = False) -> SamplePair:
    """One scene. ``rng`` defaults to ``cfg.seed``; ``global_only`` renders a pure background translation."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    elif not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    tries = 10 if cfg.occlusion_target is not None else 1
    best = None
    for _ in range(tries):
        pair = _scene(_make_layers(rng, cfg, global_only), cfg.size)
        if cfg.occlusion_target is None:
            return pair
        err = abs(float(pair.gt_occ.mean()) - cfg.occlusion_target)
        if best is None or err < best[0]:
            best = (err, pair)
        if err <= 0.05:
            break
    return best[1]


def translation_pair(cfg: SynthConfig, u: float, v: float, rng: np.random.Generator | int = 0) -> SamplePair:
    """Background-only scene moving by exactly (u, v)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    layer = _Layer("background", np.zeros(2), np.zeros(2), 0.0, np.array([u, v], dtype=np.float64),
                   *_random_texture(rng, cfg))
    return _scene([layer], cfg.size)


def synth_dataset(cfg: SynthConfig, n: int, seed: int | None = None) -> list[SamplePair]:
    """``n`` pairs; item k uses its own stream seeded by (seed, k), so any subset is reproducible alone."""
    seed = cfg.seed if seed is None else seed
    out = []
    for k in range(n):
        p = synth_pair(cfg, np.random.default_rng([seed, k]))
        p.name = f"{k:06d}"
        out.append(p)
    return out


def footprint_mask(pair: SamplePair) -> np.ndarray:
    """Visible pixels whose bilinear footprint in image 2 lies within a single layer of motion ``gt_flow``."""
    if pair.gt_flow is None or pair.gt_flow_bwd is None:
        raise ValueError("footprint_mask needs forward and backward ground truth")
    h, w = pair.gt_flow.shape[:2]
    y, x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    tx = x + pair.gt_flow[..., 0]
    ty = y + pair.gt_flow[..., 1]
    ok = pair.gt_occ < 0.5
    x0 = np.floor(tx).astype(int)
    y0 = np.floor(ty).astype(int)
    for dx in (0, 1):
        for dy in (0, 1):
            xi = np.clip(x0 + dx, 0, w - 1)
            yi = np.clip(y0 + dy, 0, h - 1)
            ok &= np.all(np.abs(pair.gt_flow_bwd[yi, xi] + pair.gt_flow) < 1e-6, axis=-1)
    return ok


# --------------------------------------------------------------------------
# directory layouts

LAYOUTS = ("sintel", "kitti", "synth-cache")


class LazyPairs(Sequence[SamplePair]):
    """Sequence that reads each pair from disk on access."""

    def __init__(self, entries: list, loader):
        self._entries = entries
        self._loader = loader

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[i] for i in range(*k.indices(len(self)))]
        return self._loader(self._entries[k])


def _frame_index(name: str) -> int | None:
    m = re.fullmatch(r"frame_(\d+)\.png", name)
    return int(m.group(1)) if m else None


def _sintel_entries(root: Path):
    clean = root / "clean"
    if not clean.is_dir():
        raise ValueError(f"sintel layout: missing directory {clean}")
    entries = []
    for scene in sorted(p for p in clean.iterdir() if p.is_dir()):
        frames = sorted((i, f) for f in scene.iterdir() if (i := _frame_index(f.name)) is not None)
        if not frames:
            raise ValueError(f"sintel layout: no frame_XXXX.png in {scene}")
        idx = {i: f for i, f in frames}
        for i, f in frames:
            if i + 1 in idx:
                flo = root / "flow" / scene.name / f.name.replace(".png", ".flo")
                entries.append((f, idx[i + 1], flo if flo.exists() else None, f"{scene.name}/{f.stem}"))
    return entries


def _sintel_load(e) -> SamplePair:
    f1, f2, flo, name = e
    flow = flowio.read_flo(flo) if flo is not None else None
    valid = np.ones(flow.shape[:2], dtype=bool) if flow is not None else None
    return SamplePair(flowio.read_image(f1), flowio.read_image(f2), flow, None, valid, name=name)


def _kitti_entries(root: Path):
    img = root / "image_2"
    if not img.is_dir():
        raise ValueError(f"kitti layout: missing directory {img}")
    entries = []
    for f in sorted(img.glob("*_10.png")):
        stem = f.name[:-len("_10.png")]
        f2 = img / f"{stem}_11.png"
        if not f2.exists():
            raise ValueError(f"kitti layout: missing second frame {f2}")
        gt = root / "flow_occ" / f"{stem}_10.png"
        entries.append((f, f2, gt if gt.exists() else None, stem))
    if not entries:
        raise ValueError(f"kitti layout: no XXXXXX_10.png in {img}")
    return entries


def _kitti_load(e) -> SamplePair:
    f1, f2, gt, name = e
    flow = valid = None
    if gt is not None:
        flow, valid = flowio.read_kitti_flow(gt)
    return SamplePair(flowio.read_image(f1), flowio.read_image(f2), flow, None, valid, name=name)


def _cache_entries(root: Path):
    entries = []
    for f in sorted(root.glob("*_img1.png")):
        stem = f.name[:-len("_img1.png")]
        for suffix in ("_img2.png", "_flow.flo", "_occ.png"):
            if not (root / f"{stem}{suffix}").exists():
                raise ValueError(f"synth-cache layout: missing {root / (stem + suffix)}")
        entries.append((root, stem))
    if not entries:
        raise ValueError(f"synth-cache layout: no NNNNNN_img1.png in {root}")
    return entries


def _cache_load(e) -> SamplePair:
    root, stem = e
    i1 = flowio.read_image(root / f"{stem}_img1.png")
    i2 = flowio.read_image(root / f"{stem}_img2.png")
    flow = flowio.read_flo(root / f"{stem}_flow.flo")
    occ = flowio.read_image(root / f"{stem}_occ.png")[..., 0]
    bwd_path = root / f"{stem}_flow_bwd.flo"
    bwd = flowio.read_flo(bwd_path) if bwd_path.exists() else None
    return SamplePair(i1, i2, flow, occ, gt_flow_bwd=bwd, name=stem)


def load_dataset(path: str | os.PathLike, layout: str = "synth-cache") -> LazyPairs:
    """Index a directory; pairs are read on access. Empty or malformed layouts raise ValueError."""
    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"dataset directory does not exist: {root}")
    if layout == "sintel":
        return LazyPairs(_sintel_entries(root), _sintel_load)
    if layout == "kitti":
        return LazyPairs(_kitti_entries(root), _kitti_load)
    if layout == "synth-cache":
        return LazyPairs(_cache_entries(root), _cache_load)
    raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")


def save_synth_cache(pairs: Sequence[SamplePair], path: str | os.PathLike) -> None:
    """Images as 16-bit PNG, flows as .flo, occlusion as a 16-bit gray PNG."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for k, p in enumerate(pairs):
        stem = p.name or f"{k:06d}"
        flowio.write_image(p.i1, root / f"{stem}_img1.png", bits=16)
        flowio.write_image(p.i2, root / f"{stem}_img2.png", bits=16)
        flowio.write_flo(p.gt_flow, root / f"{stem}_flow.flo")
        flowio.write_image(np.repeat(p.gt_occ[..., None], 3, -1), root / f"{stem}_occ.png", bits=16)
        if p.gt_flow_bwd is not None:
            flowio.write_flo(p.gt_flow_bwd, root / f"{stem}_flow_bwd.flo")


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    i1: torch.Tensor                    # (B, 3, H, W)
    i2: torch.Tensor
    gt_flow: torch.Tensor | None = None  # (B, 2, H, W)
    valid: torch.Tensor | None = None    # (B, 1, H, W)
    indices: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.i1.shape[0]


def collate(pairs: Sequence[SamplePair], indices: Sequence[int] = (), dtype=torch.float32) -> Batch:
    i1 = torch.stack([flowio.image_to_tensor(p.i1, dtype)[0] for p in pairs])
    i2 = torch.stack([flowio.image_to_tensor(p.i2, dtype)[0] for p in pairs])
    gt = valid = None
    if all(p.gt_flow is not None for p in pairs):
        gt = torch.stack([flowio.flow_to_tensor(p.gt_flow, dtype)[0] for p in pairs])
        valid = torch.stack([
            torch.from_numpy(np.ones(p.gt_flow.shape[:2], bool) if p.valid is None else p.valid.astype(bool))
            for p in pairs]).unsqueeze(1)
    return Batch(i1, i2, gt, valid, list(indices))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(seq: Sequence[SamplePair], batch_size: int, seed: int, epoch: int = 0) -> Iterator[Batch]:
    """Seeded per-epoch shuffle; the final partial batch is dropped."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(seq), seed, epoch)
    for s in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[s:s + batch_size].tolist()
        yield collate([seq[i] for i in idx], idx)
