import os

import numpy as np
import pytest
import torch

from cotamflow import flowio


def test_flo_roundtrip_bit_exact(tmp_path, rng):
    f = rng.normal(size=(7, 5, 2)).astype(np.float32) * 10
    p = tmp_path / "a.flo"
    flowio.write_flo(f, p)
    g = flowio.read_flo(p)
    assert g.shape == (7, 5, 2)
    assert g.tobytes() == f.tobytes()


def test_flo_layout_and_size(tmp_path):
    f = np.tile(np.array([1.5, -0.5], np.float32), (2, 2, 1))
    p = tmp_path / "b.flo"
    flowio.write_flo(f, p)
    assert os.path.getsize(p) == 12 + 2 * 2 * 2 * 4
    raw = p.read_bytes()
    assert np.frombuffer(raw[:4], "<f4")[0] == np.float32(202021.25)
    assert tuple(np.frombuffer(raw[4:12], "<i4")) == (2, 2)


def test_flo_zero_payload(tmp_path):
    p = tmp_path / "z.flo"
    flowio.write_flo(np.zeros((1, 1, 2), np.float32), p)
    assert np.frombuffer(p.read_bytes()[12:], "<f4").tolist() == [0.0, 0.0]


def test_flo_rejects_bad_magic_truncation_and_nan(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(np.array([1.0], "<f4").tobytes() + np.array([1, 1], "<i4").tobytes() + bytes(8))
    with pytest.raises(flowio.FlowFormatError):
        flowio.read_flo(p)
    flowio.write_flo(np.ones((3, 3, 2), np.float32), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(flowio.FlowFormatError):
        flowio.read_flo(p)
    bad = np.zeros((2, 2, 2), np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        flowio.write_flo(bad, tmp_path / "nan.flo")


def test_kitti_codes_and_roundtrip(tmp_path, rng):
    f = rng.uniform(-40, 40, size=(6, 9, 2)).astype(np.float32)
    f[0, 0] = (1.0, 0.0)
    f[0, 1] = (0.0, 0.0)
    m = (rng.random((6, 9)) > 0.3).astype(np.uint8)
    p = tmp_path / "k.png"
    flowio.write_kitti_flow(f, m, p)
    import cv2
    raw = cv2.imread(str(p), cv2.IMREAD_UNCHANGED)[..., ::-1]
    assert raw.dtype == np.uint16
    assert raw[0, 0, 0] == 2 ** 15 + 64
    assert tuple(raw[0, 1, :2]) == (2 ** 15, 2 ** 15)
    g, v = flowio.read_kitti_flow(p)
    assert np.abs(g - f).max() <= 1 / 128
    assert np.array_equal(v, m)


def test_kitti_rejects_8bit(tmp_path):
    p = tmp_path / "x.png"
    flowio.write_image(np.zeros((4, 4, 3)), p)
    with pytest.raises(flowio.FlowFormatError):
        flowio.read_kitti_flow(p)


def test_image_roundtrip_16bit(tmp_path, rng):
    img = np.rint(rng.random((5, 6, 3)) * 65535) / 65535
    p = tmp_path / "i.png"
    flowio.write_image(img, p, bits=16)
    assert np.array_equal(flowio.read_image(p), img.astype(np.float32))


def test_check_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        flowio.check_image(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        flowio.check_image(np.zeros((2, 2, 2)))


def test_aepe_cases():
    z = np.zeros((3, 3, 2))
    assert flowio.aepe(z, z) == 0.0
    assert flowio.aepe(z + [3, 4], z) == pytest.approx(5.0)
    est = np.array([[[0, 0], [3, 4]]], float)
    assert flowio.aepe(est, np.zeros((1, 2, 2))) == pytest.approx(2.5)
    assert flowio.aepe(est + 7, np.zeros((1, 2, 2)) + 7) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        flowio.aepe(z, np.zeros((2, 3, 2)))
    with pytest.raises(ValueError):
        flowio.aepe(z, z, np.zeros((3, 3)))


def test_f1_rate_cases():
    gt = np.zeros((2, 2, 2)) + [100, 0]
    assert flowio.f1_rate(gt, gt) == 0.0
    assert flowio.f1_rate(gt - [10, 0], gt) == 100.0
    gt1 = np.zeros((2, 2, 2)) + [1, 0]
    assert flowio.f1_rate(np.zeros_like(gt1), gt1) == 0.0


def test_flow_to_color():
    assert np.array_equal(flowio.flow_to_color(np.zeros((3, 3, 2))), np.ones((3, 3, 3)))
    f = np.zeros((1, 1, 2)) + [0.0, 2.0]
    full = flowio.flow_to_color(f, max_mag=2.0)
    half = flowio.flow_to_color(f / 2, max_mag=2.0)
    assert np.allclose(1 - half, 0.5 * (1 - full))
    ang = np.linspace(0, 2 * np.pi, 360, endpoint=False)
    ring = np.stack([np.cos(ang), np.sin(ang)], -1)[None]
    col = flowio.flow_to_color(ring)
    assert col.min() >= 0 and col.max() <= 1
    # every primary shows up somewhere on the wheel
    for c in range(3):
        assert (col[0, :, c] > 0.99).any() and (col[0, :, c] < 0.01).any()


def test_upsample_flow():
    up = flowio.upsample_flow(np.ones((3, 4, 2), np.float32), 2)
    assert up.shape == (6, 8, 2) and np.all(up == 2)
    assert np.all(flowio.upsample_flow(np.zeros((2, 2, 2)), 3) == 0)
    # linear ramp: value at output pixel centre x' equals 2 * (x'+0.5)/2 - 0.5 mapped input coordinate
    w = 6
    f = np.zeros((4, w, 2))
    f[..., 0] = np.arange(w)
    up = flowio.upsample_flow(f, 2)
    xs = (np.arange(2 * w) + 0.5) / 2 - 0.5
    expected = 2 * np.clip(xs, 0, w - 1)
    assert np.allclose(up[0, :, 0], expected)
    with pytest.raises(ValueError):
        flowio.upsample_flow(f, 1)


def test_upsample_then_box_down_recovers_constant():
    t = torch.full((1, 2, 4, 4), 1.25, dtype=torch.float64)
    up = flowio.upsample_flow(t, 2)
    down = torch.nn.functional.avg_pool2d(up, 2) / 2
    assert torch.equal(down, t)
