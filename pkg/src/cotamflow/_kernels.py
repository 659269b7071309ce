"""Hot scatter/aggregation loops with a numba path and a pure-numpy fallback.

Set ``COTAMFLOW_DISABLE_NUMBA=1`` before import to force the numpy versions.
Both implementations are always importable (``*_numba`` / ``*_numpy``) so they
can be cross-checked and benchmarked in one process.
"""
from __future__ import annotations

import os

import numpy as np
import torch
import torch.nn.functional as F

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

# reassociation lets the channel reductions vectorise; the compiled order is fixed, so results stay reproducible
_FM = {"reassoc", "contract"}

USE_NUMBA = HAS_NUMBA and os.environ.get("COTAMFLOW_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def splat_range_numpy(flow: np.ndarray) -> np.ndarray:
    """Forward-splat unit mass from every pixel to ``p + flow(p)``.

    flow: (B, 2, H, W) float64. Returns (B, H, W) float64 with the bilinear
    mass received by each target pixel; mass landing outside is dropped.
    """
    b, _, h, w = flow.shape
    out = np.zeros((b, h * w), dtype=np.float64)
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    for i in range(b):
        x = gx + flow[i, 0]
        y = gy + flow[i, 1]
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        for dx, dy, wt in (
            (0, 0, (1 - fx) * (1 - fy)),
            (1, 0, fx * (1 - fy)),
            (0, 1, (1 - fx) * fy),
            (1, 1, fx * fy),
        ):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wt > 0)
            np.add.at(out[i], (yi[ok] * w + xi[ok]), wt[ok])
    return out.reshape(b, h, w)


def dense_modulate_numpy(cost: np.ndarray, weights: np.ndarray, radius: int) -> np.ndarray:
    """Neighbourhood-weighted sum of a cost volume.

    cost: (H, W, F); weights: (H, W, (2r+1)**2) with neighbour index
    ``(dy + r) * (2r + 1) + (dx + r)``. Outside the frame the cost is zero.
    """
    h, w, f = cost.shape
    k = 2 * radius + 1
    padded = np.zeros((h + 2 * radius, w + 2 * radius, f), dtype=np.float64)
    padded[radius:radius + h, radius:radius + w] = cost
    out = np.zeros((h, w, f), dtype=np.float64)
    for dy in range(k):
        for dx in range(k):
            out += weights[:, :, dy * k + dx, None] * padded[dy:dy + h, dx:dx + w]
    return out


def correlation_forward_torch(x1: torch.Tensor, x2: torch.Tensor, radius: int) -> torch.Tensor:
    """(B, D, H, W) x2 -> (B, (2r+1)**2, H, W) mean-over-D inner products, zero padded."""
    b, d, h, w = x1.shape
    k = 2 * radius + 1
    x2p = F.pad(x2, (radius, radius, radius, radius))
    out = x1.new_empty(b, k * k, h, w)
    for dy in range(k):
        for dx in range(k):
            out[:, dy * k + dx] = (x1 * x2p[:, :, dy:dy + h, dx:dx + w]).sum(1) / d
    return out


def correlation_backward_torch(grad, x1, x2, radius):
    b, d, h, w = x1.shape
    k = 2 * radius + 1
    x2p = F.pad(x2, (radius, radius, radius, radius))
    gx1 = torch.zeros_like(x1)
    gx2p = torch.zeros_like(x2p)
    for dy in range(k):
        for dx in range(k):
            g = grad[:, dy * k + dx].unsqueeze(1) / d
            gx1 += g * x2p[:, :, dy:dy + h, dx:dx + w]
            gx2p[:, :, dy:dy + h, dx:dx + w] += g * x1
    return gx1, gx2p[:, :, radius:radius + h, radius:radius + w].contiguous()


if HAS_NUMBA:

    # correlation and deformable kernels take channels-last (B, H, W, C) arrays so
    # the innermost loop is contiguous; the wrappers transpose.

    @njit(cache=True, fastmath=_FM)
    def correlation_forward_numba(x1, x2, radius):
        b, h, w, d = x1.shape
        k = 2 * radius + 1
        out = np.zeros((b, h, w, k * k), dtype=x1.dtype)
        inv = 1.0 / d
        for i in range(b):
            for y in range(h):
                for x in range(w):
                    for dy in range(-radius, radius + 1):
                        yy = y + dy
                        if yy < 0 or yy >= h:
                            continue
                        for dx in range(-radius, radius + 1):
                            xx = x + dx
                            if xx < 0 or xx >= w:
                                continue
                            s = x1.dtype.type(0)
                            for c in range(d):
                                s += x1[i, y, x, c] * x2[i, yy, xx, c]
                            out[i, y, x, (dy + radius) * k + dx + radius] = s * inv
        return out

    @njit(cache=True, fastmath=_FM)
    def correlation_backward_numba(grad, x1, x2, radius):
        b, h, w, d = x1.shape
        k = 2 * radius + 1
        gx1 = np.zeros_like(x1)
        gx2 = np.zeros_like(x2)
        inv = 1.0 / d
        for i in range(b):
            for y in range(h):
                for x in range(w):
                    for dy in range(-radius, radius + 1):
                        yy = y + dy
                        if yy < 0 or yy >= h:
                            continue
                        for dx in range(-radius, radius + 1):
                            xx = x + dx
                            if xx < 0 or xx >= w:
                                continue
                            g = grad[i, y, x, (dy + radius) * k + dx + radius] * inv
                            if g == 0.0:
                                continue
                            for c in range(d):
                                gx1[i, y, x, c] += g * x2[i, yy, xx, c]
                                gx2[i, yy, xx, c] += g * x1[i, y, x, c]
        return gx1, gx2

    @njit(cache=True)
    def splat_range_numba(flow):
        b, _, h, w = flow.shape
        out = np.zeros((b, h, w), dtype=np.float64)
        for i in range(b):
            for y in range(h):
                for x in range(w):
                    tx = x + flow[i, 0, y, x]
                    ty = y + flow[i, 1, y, x]
                    x0 = int(np.floor(tx))
                    y0 = int(np.floor(ty))
                    fx = tx - x0
                    fy = ty - y0
                    for dy in range(2):
                        yy = y0 + dy
                        if yy < 0 or yy >= h:
                            continue
                        wy = fy if dy == 1 else 1.0 - fy
                        for dx in range(2):
                            xx = x0 + dx
                            if xx < 0 or xx >= w:
                                continue
                            wx = fx if dx == 1 else 1.0 - fx
                            wt = wx * wy
                            if wt > 0.0:
                                out[i, yy, xx] += wt
        return out

    @njit(cache=True)
    def dense_modulate_numba(cost, weights, radius):
        h, w, f = cost.shape
        k = 2 * radius + 1
        out = np.zeros((h, w, f), dtype=np.float64)
        for y in range(h):
            for x in range(w):
                for dy in range(k):
                    qy = y + dy - radius
                    if qy < 0 or qy >= h:
                        continue
                    for dx in range(k):
                        qx = x + dx - radius
                        if qx < 0 or qx >= w:
                            continue
                        wt = weights[y, x, dy * k + dx]
                        for c in range(f):
                            out[y, x, c] += wt * cost[qy, qx, c]
        return out

    @njit(cache=True, fastmath=_FM)
    def deform_forward_numba(c, x, y, coef):
        # c: (B, H, W, F); x, y, coef: (B, H, W, K); out: (B, H, W, F)
        b, h, w, f = c.shape
        k = x.shape[3]
        out = np.zeros((b, h, w, f), dtype=c.dtype)
        for i in range(b):
            for yy in range(h):
                for xx in range(w):
                    for kk in range(k):
                        cf = coef[i, yy, xx, kk]
                        if cf == 0.0:
                            continue
                        px = x[i, yy, xx, kk]
                        py = y[i, yy, xx, kk]
                        x0 = int(np.floor(px))
                        y0 = int(np.floor(py))
                        fx = px - x0
                        fy = py - y0
                        for dy in range(2):
                            cy = y0 + dy
                            if cy < 0 or cy >= h:
                                continue
                            wy = fy if dy == 1 else 1.0 - fy
                            for dx in range(2):
                                cx = x0 + dx
                                if cx < 0 or cx >= w:
                                    continue
                                wt = (fx if dx == 1 else 1.0 - fx) * wy * cf
                                for ch in range(f):
                                    out[i, yy, xx, ch] += wt * c[i, cy, cx, ch]
        return out

    @njit(cache=True, fastmath=_FM)
    def deform_backward_numba(g, c, x, y, coef):
        b, h, w, f = c.shape
        k = x.shape[3]
        gc = np.zeros_like(c)
        gx = np.zeros_like(x)
        gy = np.zeros_like(y)
        gcoef = np.zeros_like(coef)
        for i in range(b):
            for yy in range(h):
                for xx in range(w):
                    for kk in range(k):
                        cf = coef[i, yy, xx, kk]
                        px = x[i, yy, xx, kk]
                        py = y[i, yy, xx, kk]
                        x0 = int(np.floor(px))
                        y0 = int(np.floor(py))
                        fx = px - x0
                        fy = py - y0
                        acc_coef = 0.0
                        acc_x = 0.0
                        acc_y = 0.0
                        for dy in range(2):
                            cy = y0 + dy
                            if cy < 0 or cy >= h:
                                continue
                            wy = fy if dy == 1 else 1.0 - fy
                            dwy = 1.0 if dy == 1 else -1.0
                            for dx in range(2):
                                cx = x0 + dx
                                if cx < 0 or cx >= w:
                                    continue
                                wx = fx if dx == 1 else 1.0 - fx
                                dwx = 1.0 if dx == 1 else -1.0
                                s = c.dtype.type(0)
                                wt = wx * wy * cf
                                for ch in range(f):
                                    gv = g[i, yy, xx, ch]
                                    s += gv * c[i, cy, cx, ch]
                                    gc[i, cy, cx, ch] += wt * gv
                                acc_coef += wx * wy * s
                                acc_x += dwx * wy * s
                                acc_y += wx * dwy * s
                        gcoef[i, yy, xx, kk] = acc_coef
                        gx[i, yy, xx, kk] = acc_x * cf
                        gy[i, yy, xx, kk] = acc_y * cf
        return gc, gx, gy, gcoef

    @njit(cache=True, fastmath=_FM)
    def census_forward_numba(a, bimg, r):
        n, h, w = a.shape
        out = np.zeros((n, h, w), dtype=a.dtype)
        cnt = (2 * r + 1) ** 2
        for i in range(n):
            for y in range(h):
                for x in range(w):
                    ca = a[i, y, x]
                    cb = bimg[i, y, x]
                    s = 0.0
                    for oy in range(-r, r + 1):
                        qy = min(max(y + oy, 0), h - 1)
                        for ox in range(-r, r + 1):
                            qx = min(max(x + ox, 0), w - 1)
                            ta = a[i, qy, qx] - ca
                            tb = bimg[i, qy, qx] - cb
                            na = ta / np.sqrt(0.81 + ta * ta)
                            nb = tb / np.sqrt(0.81 + tb * tb)
                            d = (na - nb) * (na - nb)
                            s += d / (0.1 + d)
                    out[i, y, x] = s / cnt
        return out

    @njit(cache=True, fastmath=_FM)
    def census_backward_numba(g, a, bimg, r, need_a=True):
        n, h, w = a.shape
        ga = np.zeros_like(a)
        gb = np.zeros_like(bimg)
        cnt = (2 * r + 1) ** 2
        for i in range(n):
            for y in range(h):
                for x in range(w):
                    gv = g[i, y, x] / cnt
                    if gv == 0.0:
                        continue
                    ca = a[i, y, x]
                    cb = bimg[i, y, x]
                    for oy in range(-r, r + 1):
                        qy = min(max(y + oy, 0), h - 1)
                        for ox in range(-r, r + 1):
                            qx = min(max(x + ox, 0), w - 1)
                            ta = a[i, qy, qx] - ca
                            tb = bimg[i, qy, qx] - cb
                            sa = 0.81 + ta * ta
                            sb = 0.81 + tb * tb
                            na = ta / np.sqrt(sa)
                            nb = tb / np.sqrt(sb)
                            delta = na - nb
                            d = delta * delta
                            # d/d(delta) of d / (0.1 + d)
                            gdelta = gv * 0.2 * delta / ((0.1 + d) * (0.1 + d))
                            gta = gdelta * 0.81 / (sa * np.sqrt(sa))
                            gtb = -gdelta * 0.81 / (sb * np.sqrt(sb))
                            if need_a:
                                ga[i, qy, qx] += gta
                                ga[i, y, x] -= gta
                            gb[i, qy, qx] += gtb
                            gb[i, y, x] -= gtb
        return ga, gb

else:  # pragma: no cover
    splat_range_numba = splat_range_numpy
    dense_modulate_numba = dense_modulate_numpy
    correlation_forward_numba = correlation_backward_numba = None
    deform_forward_numba = deform_backward_numba = None
    census_forward_numba = census_backward_numba = None


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().contiguous().numpy()


def _nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).contiguous().numpy()


def _nchw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(a).permute(0, 3, 1, 2).contiguous()


class CorrelationFunction(torch.autograd.Function):
    """Correlation with explicit backward; numba loops or the torch shift loop."""

    @staticmethod
    def forward(ctx, x1, x2, radius, use_numba):
        ctx.save_for_backward(x1, x2)
        ctx.radius = radius
        ctx.use_numba = use_numba
        if use_numba:
            return _nchw(correlation_forward_numba(_nhwc(x1), _nhwc(x2), radius))
        return correlation_forward_torch(x1, x2, radius)

    @staticmethod
    def backward(ctx, grad):
        x1, x2 = ctx.saved_tensors
        if ctx.use_numba:
            gx1, gx2 = correlation_backward_numba(_nhwc(grad), _nhwc(x1), _nhwc(x2), ctx.radius)
            gx1, gx2 = _nchw(gx1), _nchw(gx2)
        else:
            gx1, gx2 = correlation_backward_torch(grad, x1, x2, ctx.radius)
        return gx1, gx2, None, None


def correlation(x1: torch.Tensor, x2: torch.Tensor, radius: int, use_numba: bool | None = None) -> torch.Tensor:
    if use_numba is None:
        use_numba = USE_NUMBA
    use_numba = use_numba and x1.device.type == "cpu" and x1.dtype == x2.dtype
    return CorrelationFunction.apply(x1, x2, int(radius), bool(use_numba))


def splat_range(flow: np.ndarray) -> np.ndarray:
    flow = np.ascontiguousarray(flow, dtype=np.float64)
    if USE_NUMBA:
        return splat_range_numba(flow)
    return splat_range_numpy(flow)


def dense_modulate(cost: np.ndarray, weights: np.ndarray, radius: int) -> np.ndarray:
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if USE_NUMBA:
        return dense_modulate_numba(cost, weights, int(radius))
    return dense_modulate_numpy(cost, weights, int(radius))


class DeformableSampleFunction(torch.autograd.Function):
    """``out[b, f, p] = sum_k coef[b, k, p] * bilinear(c[b, f], x[b, k, p], y[b, k, p])`` (numba)."""

    @staticmethod
    def forward(ctx, c, x, y, coef):
        ctx.save_for_backward(c, x, y, coef)
        return _nchw(deform_forward_numba(_nhwc(c), _nhwc(x), _nhwc(y), _nhwc(coef)))

    @staticmethod
    def backward(ctx, g):
        c, x, y, coef = ctx.saved_tensors
        grads = deform_backward_numba(_nhwc(g), _nhwc(c), _nhwc(x), _nhwc(y), _nhwc(coef))
        return tuple(_nchw(t) for t in grads)


def deformable_sample(c, x, y, coef, use_numba: bool | None = None):
    """Weighted sum over K bilinear samples that share positions across channels.

    c: (B, F, H, W); x, y, coef: (B, K, H, W). Zero padding outside the frame.
    """
    if use_numba is None:
        use_numba = USE_NUMBA
    dtypes = {c.dtype, x.dtype, y.dtype, coef.dtype}
    if use_numba and c.device.type == "cpu" and len(dtypes) == 1:
        return DeformableSampleFunction.apply(c, x, y, coef)
    from .ops import bilinear_sample

    samples = bilinear_sample(c, x, y)  # (B, F, K, H, W)
    return (samples * coef.unsqueeze(1)).sum(2)


class CensusFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b, radius):
        ctx.save_for_backward(a, b)
        ctx.radius = radius
        return torch.from_numpy(census_forward_numba(_np(a), _np(b), radius))

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved_tensors
        need_a, need_b = ctx.needs_input_grad[:2]
        ga, gb = census_backward_numba(_np(g), _np(a), _np(b), ctx.radius, need_a)
        return (torch.from_numpy(ga) if need_a else None), (torch.from_numpy(gb) if need_b else None), None


def _census_signature_torch(gray: torch.Tensor, radius: int) -> torch.Tensor:
    size = 2 * radius + 1
    n, h, w = gray.shape
    g = gray.unsqueeze(1)
    patches = F.unfold(F.pad(g, (radius,) * 4, mode="replicate"), size).view(n, size * size, h, w)
    t = patches - g
    return t / torch.sqrt(0.81 + t * t)


def census_distance(a: torch.Tensor, b: torch.Tensor, radius: int, use_numba: bool | None = None) -> torch.Tensor:
    """Soft Hamming distance of census signatures of two (N, H, W) gray images (0..255 scale).

    Neighbours beyond the border replicate the edge pixel.
    """
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and a.device.type == "cpu" and a.dtype == b.dtype:
        return CensusFunction.apply(a, b, int(radius))
    d = (_census_signature_torch(a, radius) - _census_signature_torch(b, radius)) ** 2
    return (d / (0.1 + d)).mean(1)
