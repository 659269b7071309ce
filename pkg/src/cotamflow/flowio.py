"""Dense-array conventions, flow file formats, metrics and flow rendering.

Arrays on this side of the package are numpy, channel-last:

* image:      (H, W, C) float in [0, 1], C in {1, 3}
* flow:       (H, W, 2) float, pixels; channel 0 = u (x), channel 1 = v (y)
* occlusion:  (H, W) float in [0, 1], 1 = occluded
* validity:   (H, W) in {0, 1}

The network side works on torch tensors shaped (B, C, H, W); the
``*_to_tensor`` / ``tensor_to_*`` helpers convert between the two.
"""
from __future__ import annotations

import os

import cv2
import numpy as np
import torch
import torch.nn.functional as F

FLO_MAGIC = 202021.25
KITTI_OFFSET = 2 ** 15
KITTI_SCALE = 64.0


class FlowFormatError(ValueError):
    """A flow/image file does not match its declared layout."""


# --------------------------------------------------------------------------
# validation


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be HxWx1 or HxWx3, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return img


def check_flow(flow: np.ndarray) -> np.ndarray:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be HxWx2, got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    return flow


def check_occlusion(occ: np.ndarray) -> np.ndarray:
    occ = np.asarray(occ)
    if occ.ndim != 2:
        raise ValueError(f"occlusion map must be HxW, got {occ.shape}")
    if not np.all(np.isfinite(occ)) or occ.min() < 0 or occ.max() > 1:
        raise ValueError("occlusion values must be finite and in [0, 1]")
    return occ


def check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"validity mask must be HxW, got {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("validity mask must be binary")
    return mask


# --------------------------------------------------------------------------
# tensor conversion


def image_to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1))).to(dtype)[None]


def flow_to_tensor(flow: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return image_to_tensor(flow, dtype)


def tensor_to_flow(t: torch.Tensor) -> np.ndarray:
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValueError("expected a single-sample batch")
        t = t[0]
    return t.detach().cpu().numpy().transpose(1, 2, 0)


tensor_to_image = tensor_to_flow


# --------------------------------------------------------------------------
# .flo


def write_flo(flow: np.ndarray, path: str | os.PathLike) -> None:
    flow = check_flow(flow)
    h, w, _ = flow.shape
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: header truncated")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    w, h = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if w < 1 or h < 1:
        raise FlowFormatError(f"{path}: invalid size {w}x{h}")
    n = 2 * w * h
    if len(raw) < 12 + 4 * n:
        raise FlowFormatError(f"{path}: payload truncated ({len(raw) - 12} of {4 * n} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=12)
    return data.reshape(h, w, 2).astype(np.float32)


# --------------------------------------------------------------------------
# KITTI 16-bit PNG


def write_kitti_flow(flow: np.ndarray, mask: np.ndarray, path: str | os.PathLike) -> None:
    flow = check_flow(flow)
    mask = check_mask(mask)
    codes = np.rint(flow.astype(np.float64) * KITTI_SCALE + KITTI_OFFSET)
    if codes.min() < 0 or codes.max() > 65535:
        raise ValueError("flow magnitude exceeds the KITTI 16-bit range")
    rgb = np.empty(flow.shape[:2] + (3,), dtype=np.uint16)
    rgb[..., :2] = codes.astype(np.uint16)
    rgb[..., 2] = mask.astype(np.uint16)
    if not cv2.imwrite(str(path), rgb[..., ::-1]):
        raise OSError(f"could not write {path}")


def read_kitti_flow(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FlowFormatError(f"{path}: unreadable image")
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise FlowFormatError(f"{path}: expected 16-bit 3-channel PNG, got {raw.dtype} {raw.shape}")
    rgb = raw[..., ::-1].astype(np.float64)
    flow = ((rgb[..., :2] - KITTI_OFFSET) / KITTI_SCALE).astype(np.float32)
    valid = (rgb[..., 2] > 0).astype(np.uint8)
    return flow, valid


# --------------------------------------------------------------------------
# plain images


def read_image(path: str | os.PathLike) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FlowFormatError(f"{path}: unreadable image")
    if raw.ndim == 2:
        raw = raw[..., None]
    elif raw.shape[2] == 4:
        raw = raw[..., :3]
    if raw.shape[2] == 3:
        raw = raw[..., ::-1]
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FlowFormatError(f"{path}: unsupported pixel type {raw.dtype}")
    return (raw.astype(np.float64) / scale).astype(np.float32)


def write_image(img: np.ndarray, path: str | os.PathLike, bits: int = 8) -> None:
    img = check_image(np.clip(img, 0.0, 1.0))
    if bits == 8:
        out = np.rint(img * 255.0).astype(np.uint8)
    elif bits == 16:
        out = np.rint(img.astype(np.float64) * 65535.0).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    if out.shape[2] == 3:
        out = out[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(out)):
        raise OSError(f"could not write {path}")


# --------------------------------------------------------------------------
# metrics


def _epe(est, gt, mask):
    est = check_flow(est).astype(np.float64)
    gt = check_flow(gt).astype(np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(gt.shape[:2], dtype=bool)
    else:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != gt.shape[:2]:
            raise ValueError("mask shape does not match flow")
    if not mask.any():
        raise ValueError("validity mask selects no pixels")
    epe = np.sqrt(((est - gt) ** 2).sum(-1))
    return epe, gt, mask


def aepe(est: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Average end-point error over the valid pixels."""
    epe, _, mask = _epe(est, gt, mask)
    return float(epe[mask].mean())


def f1_rate(est: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Percentage of valid pixels with EPE > 3 px and > 5% of the GT magnitude."""
    epe, gt, mask = _epe(est, gt, mask)
    mag = np.sqrt((gt ** 2).sum(-1))
    outlier = (epe > 3.0) & (epe > 0.05 * mag)
    return float(100.0 * outlier[mask].mean())


# --------------------------------------------------------------------------
# rendering


def _color_wheel() -> np.ndarray:
    segments = [(15, (1, 0, 0), (1, 1, 0)),   # red -> yellow
                (6, (1, 1, 0), (0, 1, 0)),    # yellow -> green
                (4, (0, 1, 0), (0, 1, 1)),    # green -> cyan
                (11, (0, 1, 1), (0, 0, 1)),   # cyan -> blue
                (13, (0, 0, 1), (1, 0, 1)),   # blue -> magenta
                (6, (1, 0, 1), (1, 0, 0))]    # magenta -> red
    rows = []
    for n, a, b in segments:
        t = np.arange(n)[:, None] / n
        rows.append((1 - t) * np.array(a, float) + t * np.array(b, float))
    return np.concatenate(rows)


COLOR_WHEEL = _color_wheel()


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Render flow with the Middlebury colour wheel; zero motion is white."""
    flow = check_flow(flow).astype(np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.sqrt(u * u + v * v)
    if max_mag is None:
        max_mag = float(mag.max())
    elif max_mag <= 0:
        raise ValueError("max_mag must be positive")
    if max_mag == 0:
        return np.ones(flow.shape[:2] + (3,))
    rad = np.minimum(mag / max_mag, 1.0)
    ncols = len(COLOR_WHEEL)
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * COLOR_WHEEL[k0] + f * COLOR_WHEEL[k1]
    return 1 - rad[..., None] * (1 - col)


# --------------------------------------------------------------------------
# resampling


def upsample_flow(flow, factor: int):
    """Bilinear upsampling by an integer factor, scaling vectors by the factor.

    Accepts a (B, 2, H, W) tensor or an (H, W, 2) array and returns the same
    kind. Pixel centres are aligned (half-pixel convention).
    """
    if int(factor) != factor or factor < 2:
        raise ValueError("upsampling factor must be an integer >= 2")
    factor = int(factor)
    if isinstance(flow, torch.Tensor):
        return factor * F.interpolate(flow, scale_factor=factor, mode="bilinear", align_corners=False)
    t = flow_to_tensor(check_flow(flow), dtype=torch.float64)
    return tensor_to_flow(upsample_flow(t, factor)).astype(np.asarray(flow).dtype)
