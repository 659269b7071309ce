"""Time the numba kernels against the pure torch/numpy fallbacks.

    python benchmarks/bench_kernels.py [--reps 20] [--size 32] [--json out.json]

Each row is forward + backward (where differentiable) at training-like shapes,
reported as the median over ``--reps`` calls after one warm-up call (which
also absorbs JIT compilation). The last row times one full co-teaching step.
"""
from __future__ import annotations

import argparse
import json
import statistics
import time

import numpy as np
import torch

from cotamflow import _kernels, coteach, data, network


def _median_ms(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def _with_backward(make):
    def run():
        out, inputs = make()
        out.sum().backward()
        return inputs
    return run


def cases(size, batch):
    g = torch.Generator().manual_seed(0)
    h = w = size

    def corr(use):
        def make():
            a = torch.randn(batch, 32, h, w, generator=g).requires_grad_()
            b = torch.randn(batch, 32, h, w, generator=g).requires_grad_()
            return _kernels.correlation(a, b, 4, use_numba=use), (a, b)
        return _with_backward(make)

    def deform(use):
        def make():
            c = torch.randn(batch, 81, h, w, generator=g).requires_grad_()
            x = (torch.rand(batch, 9, h, w, generator=g) * (w - 1)).requires_grad_()
            y = (torch.rand(batch, 9, h, w, generator=g) * (h - 1)).requires_grad_()
            k = torch.rand(batch, 9, h, w, generator=g).requires_grad_()
            return _kernels.deformable_sample(c, x, y, k, use_numba=use), (c, x, y, k)
        return _with_backward(make)

    def census(use):
        def make():
            a = (torch.rand(batch, 2 * h, 2 * w, generator=g) * 255).requires_grad_()
            b = (torch.rand(batch, 2 * h, 2 * w, generator=g) * 255).requires_grad_()
            return _kernels.census_distance(a, b, 3, use_numba=use), (a, b)
        return _with_backward(make)

    rng = np.random.default_rng(0)
    flow = rng.normal(0, 3, (batch, 2, 2 * h, 2 * w))
    cost = rng.normal(size=(h, w, 81))
    wts = rng.random((h, w, 9))
    wts /= wts.sum(-1, keepdims=True)

    def numpy_kernel(fn):
        def select(use):
            def run():
                old = _kernels.USE_NUMBA
                _kernels.USE_NUMBA = use
                try:
                    fn()
                finally:
                    _kernels.USE_NUMBA = old
            return run
        return select

    return {
        "correlation r=4": corr,
        "deformable_sample K=9": deform,
        "census r=3": census,
        "splat_range": numpy_kernel(lambda: _kernels.splat_range(flow)),
        "dense_modulate r=1": numpy_kernel(lambda: _kernels.dense_modulate(cost, wts, 1)),
    }


def train_step_case(batch):
    ds = data.synth_dataset(data.SynthConfig(), batch, seed=0)
    b = next(iter(data.batches(ds, batch, 0, 1)))
    cfg = coteach.CoteachConfig(t_max=2, batch_size=batch)

    def select(use):
        def run():
            old = _kernels.USE_NUMBA
            _kernels.USE_NUMBA = use
            try:
                st = coteach.init_state(cfg, network.PyramidConfig.desk())
                st.set_epoch(2, cfg)
                coteach.train_step(st, b, cfg)
            finally:
                _kernels.USE_NUMBA = old
        return run
    return select


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--size", type=int, default=32, help="feature map side; census runs at twice this")
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--json", help="also write results here")
    ap.add_argument("--skip-step", action="store_true", help="skip the full training step row")
    args = ap.parse_args(argv)
    torch.set_num_threads(1)
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    table = cases(args.size, args.batch)
    if not args.skip_step:
        table[f"co-teaching step (64x64, batch {args.batch})"] = train_step_case(args.batch)
    rows = []
    print(f"{'kernel':<36s} {'numba ms':>10s} {'fallback ms':>12s} {'speedup':>8s}")
    for name, make in table.items():
        reps = max(3, args.reps // 5) if name.startswith("co-teaching") else args.reps
        fast = _median_ms(make(True), reps)
        slow = _median_ms(make(False), reps)
        rows.append({"kernel": name, "numba_ms": fast, "fallback_ms": slow, "speedup": slow / fast})
        print(f"{name:<36s} {fast:10.2f} {slow:12.2f} {slow / fast:7.1f}x", flush=True)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
