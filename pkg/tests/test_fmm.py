import math

import pytest
import torch

from cotamflow import losses
from cotamflow.fmm import FlowModulation, confidence_map, displacement_warp, fmm_modulate
from cotamflow.gradsuite import case_fmm_modulate


def _rand(seed, *shape):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_confidence_perfect_match_is_one():
    i = _rand(0, 1, 3, 8, 8)
    m = confidence_map(i, i, torch.zeros(1, 2, 8, 8, dtype=torch.float64))
    assert m.shape == (1, 1, 8, 8)
    assert torch.all(m == 1.0)


def test_confidence_value_and_monotonicity(monkeypatch):
    i1 = _rand(1, 1, 3, 6, 6)
    i2 = _rand(2, 1, 3, 6, 6)
    f = torch.zeros(1, 2, 6, 6, dtype=torch.float64)
    b = losses.photometric_difference(i1, i2)
    m = confidence_map(i1, i2, f)
    assert torch.allclose(m, torch.exp(-b))
    order = torch.argsort(b.flatten())
    assert torch.all(torch.diff(m.flatten()[order]) <= 0)
    monkeypatch.setattr("cotamflow.fmm.photometric_difference", lambda a, c: torch.ones_like(a[:, :1]))
    assert math.isclose(confidence_map(i1, i2, f)[0, 0, 0, 0].item(), math.exp(-1), rel_tol=1e-12)


def test_confidence_out_of_frame_least_confident():
    i1 = _rand(3, 1, 3, 6, 6)
    i2 = _rand(4, 1, 3, 6, 6)
    f = torch.zeros(1, 2, 6, 6, dtype=torch.float64)
    f[0, 0, :, -1] = 5.0
    m = confidence_map(i1, i2, f)
    assert torch.allclose(m[..., -1], m.min().expand(1, 1, 6))
    assert torch.all((m > 0) & (m <= 1))
    with pytest.raises(ValueError):
        confidence_map(i1, i2[..., :5], f)


def test_displacement_warp():
    f = torch.randn(1, 2, 5, 7, dtype=torch.float64)
    assert torch.equal(displacement_warp(f, torch.zeros_like(f)), f)
    const = torch.full((1, 2, 5, 7), 1.7, dtype=torch.float64)
    d = torch.randn(1, 2, 5, 7, dtype=torch.float64) * 4
    assert torch.allclose(displacement_warp(const, d), const)
    ramp = torch.zeros(1, 2, 5, 7, dtype=torch.float64)
    ramp[:, 0] = torch.arange(7, dtype=torch.float64)
    d = torch.zeros_like(ramp)
    d[:, 0] = 1
    out = displacement_warp(ramp, d)
    assert torch.equal(out[0, 0, :, :-1], ramp[0, 0, :, :-1] + 1)
    with pytest.raises(ValueError):
        displacement_warp(f, d[..., :3])


def test_zero_head_is_bit_exact_identity():
    mod = FlowModulation(radius=2, hidden=(8, 4))
    g = torch.Generator().manual_seed(5)
    with torch.no_grad():
        mod.conv1.weight.normal_(generator=g)
        mod.conv2.weight.normal_(generator=g)
    f = torch.randn(2, 2, 8, 8, generator=g)
    out = fmm_modulate(f, torch.randn(2, 6, 8, 8, generator=g), torch.rand(2, 3, 8, 8, generator=g),
                       torch.rand(2, 3, 8, 8, generator=g), mod)
    assert out.shape == f.shape
    assert torch.equal(out, f)


def test_displacement_bounded_by_radius():
    mod = FlowModulation(radius=2, hidden=(4, 4)).double()
    with torch.no_grad():
        for p in mod.parameters():
            p.fill_(3.0)
    d = mod.displacement(torch.ones(1, 1, 4, 4, dtype=torch.float64), torch.ones(1, 25, 4, 4, dtype=torch.float64))
    assert d.abs().max() <= 2.0


def test_fmm_gradcheck():
    rep = case_fmm_modulate()
    assert rep.passed, str(rep)
