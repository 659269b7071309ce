import numpy as np
import pytest
import torch

from cotamflow import augment
from cotamflow.augment import AugmentConfig, AugmentParams, identity_params, sample_transform

FRAME = (32, 40)


def _imgs(seed, b=None):
    g = torch.Generator().manual_seed(seed)
    shape = (3,) + FRAME if b is None else (b, 3) + FRAME
    return torch.rand(shape, generator=g, dtype=torch.float64), torch.rand(shape, generator=g, dtype=torch.float64)


def _params_equal(a, b):
    return (np.array_equal(a.affine, b.affine) and a.crop == b.crop and a.occluders == b.occluders
            and np.array_equal(a.gain, b.gain) and np.array_equal(a.bias, b.bias)
            and a.sigma == b.sigma and a.seed == b.seed)


def test_sampling_deterministic():
    cfg = AugmentConfig(crop_size=(24, 32))
    a = sample_transform(np.random.default_rng(5), FRAME, cfg)
    b = sample_transform(np.random.default_rng(5), FRAME, cfg)
    assert _params_equal(a, b)


def test_sampling_ranges_over_many_draws():
    rng = np.random.default_rng(0)
    cfg = AugmentConfig(crop_size=(24, 32))
    for _ in range(1000):
        p = sample_transform(rng, FRAME, cfg)
        p.check(FRAME)
        assert np.all((p.gain >= 0.8) & (p.gain <= 1.2))
        assert np.all((p.bias >= -0.1) & (p.bias <= 0.1))
        assert 0 <= p.sigma <= 0.02 and len(p.occluders) <= 3
        assert all(w * h <= 0.25 * 24 * 32 for _, _, w, h in p.occluders)
        assert augment.crop_inside(p.affine, p.crop, FRAME)


def test_none_mode_is_identity():
    p = sample_transform(np.random.default_rng(1), FRAME, AugmentConfig(mode="none"))
    assert np.array_equal(p.affine, [[1, 0, 0], [0, 1, 0]])
    assert p.occluders == [] and np.all(p.gain == 1) and np.all(p.bias == 0) and p.sigma == 0


def test_check_rejects_bad_params():
    p = identity_params(*FRAME)
    p.gain = np.array([1.3, 1, 1])
    with pytest.raises(ValueError):
        p.check()
    p = identity_params(*FRAME)
    p.crop = (20, 0, 32, 40)
    with pytest.raises(ValueError):
        p.check(FRAME)
    with pytest.raises(ValueError):
        AugmentConfig(mode="bogus")


def test_identity_transforms_are_noops():
    i1, i2 = _imgs(0)
    p = identity_params(*FRAME)
    a, b = augment.apply_image_transform(i1, i2, p)
    assert torch.equal(a, i1) and torch.equal(b, i2)
    f = torch.randn(2, *FRAME, dtype=torch.float64)
    assert torch.equal(augment.apply_flow_transform(f, p), f)
    o = torch.rand(1, *FRAME, dtype=torch.float64)
    assert torch.equal(augment.apply_occlusion_transform(o, p), o)


def test_occluders_only_in_second_image_and_clamped():
    i1, i2 = _imgs(1)
    p = identity_params(*FRAME)
    p.occluders = [(3, 4, 10, 6)]
    p.gain = np.full(3, 1.2)
    p.bias = np.full(3, 0.1)
    a, b = augment.apply_image_transform(i1, i2, p)
    region = b[:, 4:10, 3:13]
    assert torch.all(region == region[:, :1, :1])
    assert not torch.all(a[:, 4:10, 3:13] == a[:, 4:5, 3:4])
    assert a.min() >= 0 and a.max() <= 1 and b.max() <= 1
    assert torch.any(a == 1.0)


def test_flow_zoom_and_rotation():
    h, w = FRAME
    const = torch.zeros(2, h, w, dtype=torch.float64)
    const[0] = 1.0
    zoom = AugmentParams(affine=np.array([[2.0, 0, 0], [0, 2.0, 0]]), crop=(0, 0, h, w))
    out = augment.apply_flow_transform(const, zoom)
    assert torch.allclose(out[0], torch.tensor(2.0, dtype=torch.float64)) and torch.all(out[1] == 0)
    # x' = (h - 1) - y, y' = x: a 90 degree turn of a square frame; x right, y down
    sq = torch.zeros(2, h, h, dtype=torch.float64)
    sq[0] = 1.0
    rot = AugmentParams(affine=np.array([[0.0, -1, h - 1], [1, 0, 0]]), crop=(0, 0, h, h))
    out = augment.apply_flow_transform(sq, rot)
    assert torch.allclose(out[0], torch.tensor(0.0, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(out[1], torch.tensor(1.0, dtype=torch.float64))
    sing = AugmentParams(affine=np.array([[1.0, 2, 0], [0.5, 1, 0]]), crop=(0, 0, 4, 4))
    with pytest.raises(ValueError):
        augment.apply_flow_transform(sq, sing)


def test_occlusion_constant_and_range():
    o = torch.full((1,) + FRAME, 0.3, dtype=torch.float64)
    p = sample_transform(np.random.default_rng(2), FRAME, AugmentConfig(crop_size=(24, 32)))
    out = augment.apply_occlusion_transform(o, p)
    assert out.shape == (1, 24, 32) and torch.allclose(out, torch.tensor(0.3, dtype=torch.float64))
    r = augment.apply_occlusion_transform(torch.rand(1, *FRAME, dtype=torch.float64), p)
    assert r.min() >= 0 and r.max() <= 1


def _g(x, y):
    return 0.5 + 0.2 * np.sin(0.21 * x + 0.13 * y) + 0.2 * np.cos(0.17 * y - 0.07 * x)


def test_affine_motion_consistency():
    """Transformed GT flow matches the analytically recomputed flow of the transformed pair."""
    h, w = FRAME
    m = np.array([[0.03, -0.02], [0.01, 0.04]])     # F(p) = M p + c
    c = np.array([1.5, -0.75])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    flow = np.stack([m[0, 0] * xx + m[0, 1] * yy + c[0], m[1, 0] * xx + m[1, 1] * yy + c[1]])
    i1 = torch.from_numpy(np.stack([_g(xx, yy)] * 3))
    p = sample_transform(np.random.default_rng(3), FRAME, AugmentConfig(crop_size=(24, 32), max_occluders=0))
    p.gain, p.bias, p.sigma = np.ones(3), np.zeros(3), 0.0
    f_t = augment.apply_flow_transform(torch.from_numpy(flow), p).numpy()
    a = p.affine
    ainv = np.linalg.inv(a[:, :2])
    x0, y0, ch, cw = p.crop
    py, px = np.mgrid[0:ch, 0:cw].astype(np.float64)
    px += x0
    py += y0
    sx = ainv[0, 0] * (px - a[0, 2]) + ainv[0, 1] * (py - a[1, 2])
    sy = ainv[1, 0] * (px - a[0, 2]) + ainv[1, 1] * (py - a[1, 2])
    # target of the source point in frame 2, mapped forward by A
    tx = sx + m[0, 0] * sx + m[0, 1] * sy + c[0]
    ty = sy + m[1, 0] * sx + m[1, 1] * sy + c[1]
    gt_u = a[0, 0] * tx + a[0, 1] * ty + a[0, 2] - px
    gt_v = a[1, 0] * tx + a[1, 1] * ty + a[1, 2] - py
    inner = (slice(2, -2), slice(2, -2))
    assert np.abs(f_t[0][inner] - gt_u[inner]).max() < 1e-3
    assert np.abs(f_t[1][inner] - gt_v[inner]).max() < 1e-3
    t1, _ = augment.apply_image_transform(i1, i1, p)
    assert np.abs(t1[0].numpy()[inner] - _g(sx, sy)[inner]).max() < 5e-3


def test_build_selfsup_sample_shapes_determinism_identity():
    i1, i2 = _imgs(4, b=2)
    f = torch.randn(2, 2, *FRAME, dtype=torch.float64, requires_grad=True)
    o = torch.rand(2, 1, *FRAME, dtype=torch.float64)
    cfg = AugmentConfig(crop_size=(24, 32))
    s1 = augment.build_selfsup_sample(i1, i2, f, o, np.random.default_rng(9), cfg)
    s2 = augment.build_selfsup_sample(i1, i2, f, o, np.random.default_rng(9), cfg)
    for t in (s1.i1_t, s1.i2_t, s1.f_teacher_t, s1.o_teacher_t):
        assert t.shape[-2:] == (24, 32)
    assert torch.equal(s1.i2_t, s2.i2_t) and torch.equal(s1.f_teacher_t, s2.f_teacher_t)
    assert not s1.f_teacher_t.requires_grad
    ident = [identity_params(*FRAME) for _ in range(2)]
    s3 = augment.build_selfsup_sample(i1, i2, f, o, ident)
    assert torch.equal(s3.i1_t, i1) and torch.equal(s3.f_teacher_t, f.detach()) and torch.equal(s3.o_teacher_t, o)


def test_batched_matches_single_item():
    i1, i2 = _imgs(5, b=2)
    f = torch.randn(2, 2, *FRAME, dtype=torch.float64)
    o = torch.rand(2, 1, *FRAME, dtype=torch.float64)
    ps = augment.sample_batch_params(np.random.default_rng(4), 2, FRAME, AugmentConfig(crop_size=(24, 32)))
    bf, bo = augment.transform_teacher(f, o, ps)
    for k, p in enumerate(ps):
        assert torch.allclose(bf[k], augment.apply_flow_transform(f[k], p), atol=1e-12)
        assert torch.allclose(bo[k], augment.apply_occlusion_transform(o[k], p), atol=1e-12)
