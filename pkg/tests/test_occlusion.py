import numpy as np
import pytest
import torch

from cotamflow import data, flowio, occlusion


def _flow(h, w, u=0.0, v=0.0):
    f = torch.zeros(1, 2, h, w, dtype=torch.float64)
    f[:, 0] = u
    f[:, 1] = v
    return f


def test_range_map_zero_flow_is_one():
    r = occlusion.range_map(_flow(5, 6))
    assert r.shape == (1, 1, 5, 6) and torch.all(r == 1)


def test_range_map_integer_shift():
    u, w = 2, 7
    r = occlusion.range_map(_flow(4, w, -u))[0, 0]
    assert torch.all(r[:, w - u:] == 0)
    assert torch.all(r[:, :w - u] == 1)


def _inbounds_mass(flow):
    _, _, h, w = flow.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            tx, ty = x + flow[0, 0, y, x], y + flow[0, 1, y, x]
            x0, y0 = int(np.floor(tx)), int(np.floor(ty))
            fx, fy = tx - x0, ty - y0
            for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                               (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
                if 0 <= x0 + dx < w and 0 <= y0 + dy < h:
                    total += wt
    return total


def test_range_map_mass_conservation(rng):
    for _ in range(5):
        f = rng.uniform(-3, 3, size=(1, 2, 9, 8))
        r = occlusion.range_map(torch.from_numpy(f))
        expected = _inbounds_mass(f)
        assert abs(r.sum().item() - expected) <= 1e-6 * expected


def test_occlusion_zero_and_uniform_shift():
    assert torch.all(occlusion.occlusion_map(_flow(5, 5), _flow(5, 5)) == 0)
    u, w = 3, 10
    o = occlusion.occlusion_map(_flow(4, w, u), _flow(4, w, -u))[0, 0]
    assert torch.all(o[:, w - u:] == 1) and torch.all(o[:, :w - u] == 0)
    # reversed roles: stripe on the opposite border, same area
    o21 = occlusion.occlusion_map(_flow(4, w, -u), _flow(4, w, u))[0, 0]
    assert torch.all(o21[:, :u] == 1) and o21.sum() == o.sum()


def test_occlusion_range_and_errors(rng):
    f12 = torch.from_numpy(rng.normal(size=(2, 2, 8, 8)) * 3)
    f21 = torch.from_numpy(rng.normal(size=(2, 2, 8, 8)) * 3)
    o = occlusion.occlusion_map(f12, f21)
    assert o.min() >= 0 and o.max() <= 1
    with pytest.raises(ValueError):
        occlusion.occlusion_map(f12, f21[..., :7])


def test_selfsup_occlusion():
    x = torch.rand(1, 1, 5, 5, dtype=torch.float64)
    assert torch.all(occlusion.selfsup_occlusion(x, x) == 0)
    aug = torch.zeros(1, 1, 5, 5)
    aug[..., 1:3, 1:3] = 1
    out = occlusion.selfsup_occlusion(torch.zeros_like(aug), aug)
    assert torch.equal(out, aug)
    out = occlusion.selfsup_occlusion(torch.rand(1, 1, 5, 5), torch.rand(1, 1, 5, 5))
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        occlusion.selfsup_occlusion(aug, aug[..., :4])


def _agreement(pair):
    f = flowio.flow_to_tensor(pair.gt_flow, torch.float64)
    b = flowio.flow_to_tensor(pair.gt_flow_bwd, torch.float64)
    o = occlusion.occlusion_map(f, b)[0, 0].numpy()
    return ((o > 0.5) == (pair.gt_occ > 0.5)).mean()


def test_translation_scenes_agree_with_ground_truth():
    cfg = data.SynthConfig()
    for k in range(10):
        g = np.random.default_rng(k)
        u, v = g.uniform(-8, 8, 2)
        assert _agreement(data.translation_pair(cfg, u, v, g)) >= 0.95
