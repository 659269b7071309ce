"""Finite-difference gradient suite over the differentiable primitives and losses.

Every case builds small float64 inputs (at most 8x8) from a fixed seed and
returns a ``GradcheckReport``. ``SUITE`` is a plain ordered mapping, so callers
(and tests) can add, drop or replace cases.
"""
from __future__ import annotations

import time
from typing import Callable

import torch

from . import losses, ops
from .cmm import CostVolumeModulation, cmm_modulate
from .fmm import FlowModulation, fmm_modulate
from .network import PyramidConfig, extract_features, init_params

STEP = 1e-5
TOL = 1e-4

Case = Callable[[], ops.GradcheckReport]


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _rand(gen, *shape, lo=0.0, hi=1.0, grad=True) -> torch.Tensor:
    t = torch.rand(shape, generator=gen, dtype=torch.float64) * (hi - lo) + lo
    return t.requires_grad_(grad)


def _randn(gen, *shape, scale=1.0, grad=True) -> torch.Tensor:
    return (torch.randn(shape, generator=gen, dtype=torch.float64) * scale).requires_grad_(grad)


def _randomise(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.3) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def _check(fn, inputs, module=None, max_entries=None) -> ops.GradcheckReport:
    params = [(f"param:{n}", p) for n, p in module.named_parameters()] if module is not None else []
    return ops.gradcheck(fn, inputs, tol=TOL, eps=STEP, params=params, max_entries=max_entries,
                         random_projection=True, seed=0)


def case_bilinear_warp() -> ops.GradcheckReport:
    g = _gen(1)
    src = _rand(g, 1, 2, 7, 8)
    flow = _rand(g, 1, 2, 7, 8, lo=-1.6, hi=1.6)
    return _check(lambda s, f: ops.bilinear_warp(s, f)[0], [src, flow])


def case_correlation() -> ops.GradcheckReport:
    g = _gen(2)
    return _check(lambda a, b: ops.correlation(a, b, 2), [_randn(g, 2, 3, 6, 7), _randn(g, 2, 3, 6, 7)])


def case_self_correlation() -> ops.GradcheckReport:
    g = _gen(3)
    return _check(lambda a: ops.self_correlation(a, 2), [_randn(g, 1, 4, 7, 6)])


def case_fmm_modulate() -> ops.GradcheckReport:
    g = _gen(4)
    mod = FlowModulation(radius=1, hidden=(6, 4)).double()
    _randomise(mod, g)
    f_up = _randn(g, 1, 2, 6, 6, scale=0.8)
    x1 = _randn(g, 1, 3, 6, 6)
    i1 = _rand(g, 1, 3, 6, 6)
    i2 = _rand(g, 1, 3, 6, 6)
    return _check(lambda f, x, a, b: fmm_modulate(f, x, a, b, mod), [f_up, x1, i1, i2], mod)


def case_cmm_modulate() -> ops.GradcheckReport:
    g = _gen(5)
    mod = CostVolumeModulation(radius=1, kernel_size=3).double()
    _randomise(mod, g, scale=0.2)
    c = _randn(g, 1, 9, 6, 7)
    return _check(lambda x: cmm_modulate(x, mod), [c], mod)


def case_photometric_loss() -> ops.GradcheckReport:
    g = _gen(6)
    i1 = _rand(g, 1, 3, 8, 8)
    i2 = _rand(g, 1, 3, 8, 8)
    f = _rand(g, 1, 2, 8, 8, lo=-1.2, hi=1.2)
    o = _rand(g, 1, 1, 8, 8, grad=False)
    return _check(lambda a, b, fl: losses.photometric_loss(a, b, fl, o), [i1, i2, f])


def case_smoothness_loss() -> ops.GradcheckReport:
    g = _gen(7)
    i1 = _rand(g, 1, 3, 8, 8, lo=0.0, hi=0.05)
    f = _randn(g, 1, 2, 8, 8)
    return _check(losses.smoothness_loss, [i1, f])


def case_selfsup_loss() -> ops.GradcheckReport:
    g = _gen(8)
    f_t = _randn(g, 1, 2, 8, 8, grad=False)
    f_s = _randn(g, 1, 2, 8, 8)
    o = _rand(g, 1, 1, 8, 8, grad=False)
    return _check(lambda s: losses.selfsup_loss(f_t, s, o), [f_s])


def case_extract_features() -> ops.GradcheckReport:
    g = _gen(9)
    cfg = PyramidConfig(levels=3, channels=(3, 4, 5), estimator_channels=(4,), context=False)
    model = init_params(0, cfg).double()
    img = _rand(g, 1, 3, 8, 8)
    feats = model.features
    return _check(lambda x: extract_features(x, model)[:2], [img], feats)


SUITE: dict[str, Case] = {
    "bilinear_warp": case_bilinear_warp,
    "correlation": case_correlation,
    "self_correlation": case_self_correlation,
    "fmm_modulate": case_fmm_modulate,
    "cmm_modulate": case_cmm_modulate,
    "photometric_loss": case_photometric_loss,
    "smoothness_loss": case_smoothness_loss,
    "selfsup_loss": case_selfsup_loss,
    "extract_features": case_extract_features,
}


def run_suite(suite: dict[str, Case] | None = None, log: Callable[[str], None] | None = None) -> tuple[bool, dict]:
    """Run every case; returns (all passed, {name: report or exception text})."""
    suite = SUITE if suite is None else suite
    ok = True
    results = {}
    for name, case in suite.items():
        t0 = time.perf_counter()
        try:
            rep = case()
        except Exception as exc:  # a crashing case is a failing case
            ok = False
            results[name] = f"error: {exc!r}"
            if log:
                log(f"FAIL {name}: {exc!r}")
            continue
        results[name] = rep
        worst = max(rep.errors.values(), default=0.0)
        ok &= rep.passed
        if log:
            status = "ok  " if rep.passed else "FAIL"
            log(f"{status} {name:<18s} max rel err {worst:.2e}  ({time.perf_counter() - t0:.1f}s)")
            if not rep.passed:
                log(str(rep))
    return ok, results
