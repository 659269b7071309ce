import numpy as np
import pytest
import torch

from cotamflow import _kernels
from cotamflow.cmm import (CostVolumeModulation, SamplePointSet, cmm_modulate, cmm_offsets,
                           deformable_aggregate, dense_modulation, kernel_grid)
from cotamflow.gradsuite import case_cmm_modulate


def _brute_dense(c, w, r):
    h, wd, f = c.shape
    k = 2 * r + 1
    out = np.zeros_like(c)
    for y in range(h):
        for x in range(wd):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < wd:
                        out[y, x] += w[y, x, (dy + r) * k + dx + r] * c[yy, xx]
    return out


def _normalised(rng, shape):
    w = rng.random(shape)
    return w / w.sum(-1, keepdims=True)


def test_dense_identity_constant_and_oracle(rng):
    c = rng.normal(size=(6, 6, 9))
    delta = np.zeros((6, 6, 9))
    delta[..., 4] = 1
    assert np.array_equal(dense_modulation(c, delta, 1), c)
    const = np.full((6, 6, 4), 2.5)
    uni = np.full((6, 6, 9), 1 / 9)
    assert np.allclose(dense_modulation(const, uni, 1)[1:-1, 1:-1], 2.5)
    w = _normalised(rng, (6, 6, 9))
    assert np.abs(dense_modulation(c, w, 1) - _brute_dense(c, w, 1)).max() < 1e-6


def test_dense_rejects_unnormalised(rng):
    with pytest.raises(ValueError):
        dense_modulation(rng.normal(size=(4, 4, 9)), np.ones((4, 4, 9)), 1)


def _pts(weights, h, w, b=1):
    k = weights.numel()
    return SamplePointSet(base=kernel_grid(3), offsets=torch.zeros(b, k, 2, h, w, dtype=torch.float64),
                          masks=torch.ones(b, k, h, w, dtype=torch.float64), weights=weights)


@pytest.mark.parametrize("use_numba", [True, False])
def test_sparse_matches_dense_oracle(use_numba, monkeypatch):
    monkeypatch.setattr(_kernels, "USE_NUMBA", use_numba and _kernels.HAS_NUMBA)
    rng = np.random.default_rng(7)
    for _ in range(20):
        c = rng.normal(size=(16, 16, 9))
        wk = rng.random(9)
        wk /= wk.sum()
        sparse = deformable_aggregate(torch.from_numpy(c.transpose(2, 0, 1)[None].copy()),
                                      _pts(torch.from_numpy(wk), 16, 16))
        dense = dense_modulation(c, np.broadcast_to(wk, (16, 16, 9)), 1)
        assert np.abs(sparse[0].numpy().transpose(1, 2, 0) - dense).max() < 1e-6


def test_identity_configuration_exact():
    c = torch.randn(2, 9, 7, 8, dtype=torch.float64)
    w = torch.zeros(9, dtype=torch.float64)
    w[4] = 1
    assert torch.equal(deformable_aggregate(c, _pts(w, 7, 8, b=2)), c)
    mod = CostVolumeModulation(radius=1).double()
    assert torch.allclose(cmm_modulate(c, mod), c, atol=1e-6, rtol=0)


def test_zero_head_offsets():
    mod = CostVolumeModulation(radius=1)
    c = torch.randn(1, 9, 5, 5)
    pts = cmm_offsets(c, mod)
    assert mod.head.out_channels == 3 * pts.k == 27
    assert torch.all(pts.offsets == 0) and torch.all(pts.masks == 0.5)


def test_spike_reduced_by_k():
    c = torch.zeros(1, 9, 7, 7, dtype=torch.float64)
    c[0, 3, 3, 3] = 9.0
    out = deformable_aggregate(c, _pts(torch.full((9,), 1 / 9, dtype=torch.float64), 7, 7))
    assert out[0, 3, 3, 3].item() == pytest.approx(1.0)


def test_linearity_and_shape():
    g = torch.Generator().manual_seed(3)
    mod = CostVolumeModulation(radius=1).double()
    with torch.no_grad():
        mod.head.weight.normal_(generator=g).mul_(0.1)
    c = torch.randn(1, 9, 6, 6, generator=g, dtype=torch.float64)
    pts = cmm_offsets(c, mod)
    pts = SamplePointSet(pts.base, pts.offsets.detach(), pts.masks.detach(), pts.weights.detach())
    a = deformable_aggregate(3.0 * c, pts)
    assert a.shape == c.shape
    assert torch.allclose(a, 3.0 * deformable_aggregate(c, pts))


def test_cmm_gradcheck():
    rep = case_cmm_modulate()
    assert rep.passed, str(rep)
