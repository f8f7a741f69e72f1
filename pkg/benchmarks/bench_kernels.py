#!/usr/bin/env python3
"""Benchmark the compiled convolution kernel against the numpy fallback.

Reports per-call time for both backends over a range of shapes (from
gradient-check-sized problems up to training-sized ones) plus a full flow
forward+backward pass under each backend.  The dispatcher's MAC crossover
(flowscale._kernels.MAC_CROSSOVER) was chosen from exactly this comparison:
the compiled loop wins below it, BLAS above it.

Usage: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from flowscale import _kernels
from flowscale._kernels import conv_py

try:
    from flowscale._kernels import _convext
except ImportError:
    _convext = None

SHAPES = [
    # (input NCHW, kernel OIHW, stride)  -- oracle scale to training scale
    ((1, 2, 4, 4), (4, 2, 3, 3), 1),
    ((1, 4, 8, 8), (8, 4, 3, 3), 1),
    ((2, 4, 8, 8), (8, 4, 3, 3), 1),
    ((8, 2, 8, 8), (32, 2, 3, 3), 1),
    ((8, 16, 16, 16), (32, 16, 4, 4), 2),
    ((8, 32, 8, 8), (32, 32, 3, 3), 1),
    ((16, 64, 4, 4), (64, 64, 3, 3), 1),
]


def timeit(fn, *args, budget=0.25):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    calls = 0
    while time.perf_counter() - t0 < budget:
        fn(*args)
        calls += 1
    return (time.perf_counter() - t0) / calls


def macs_of(xs, ws, stride):
    n, c, h, w = xs
    o, _, kh, kw = ws
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    return n * o * oh * ow * c * kh * kw


def bench_kernels():
    print(f"backend selected at import: {_kernels.BACKEND}")
    print(f"dispatch crossover: {_kernels.MAC_CROSSOVER} MACs\n")
    header = f"{'shape':>34} {'MACs':>9} {'numpy':>10} {'compiled':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    rng = np.random.default_rng(0)
    for xs, ws, stride in SHAPES:
        x = rng.normal(size=xs)
        w = rng.normal(size=ws)
        t_py = timeit(conv_py.conv2d_forward, x, w, stride)
        if _convext is not None:
            t_ext = timeit(_convext.conv2d_forward, x, w, stride)
            ratio = t_py / t_ext
            ext_s = f"{t_ext * 1e6:9.1f}u"
            ratio_s = f"{ratio:7.2f}x"
        else:
            ext_s, ratio_s = "     n/a", "    n/a"
        label = f"{xs}x{ws[0]}k{ws[2]} s{stride}"
        print(f"{label:>34} {macs_of(xs, ws, stride):>9} {t_py * 1e6:9.1f}u {ext_s} {ratio_s}")


def bench_flow():
    print("\nflow forward+backward, (1,16,16) L=2 K=4 hidden=16, batch 8:")
    from flowscale import autodiff as ad
    from flowscale.flows import FlowStack, GaussianPrior, flow_log_prob

    rng = np.random.default_rng(0)
    prior = GaussianPrior()
    stack = FlowStack((1, 16, 16), 2, 4, 16, name="b", rng=rng)
    xb = ad.Tensor(rng.normal(size=(8, 1, 16, 16)))
    with ad.no_grad():
        stack.forward(xb)

    def step():
        loss = ad.neg(ad.reduce_mean(flow_log_prob(stack, prior, xb)))
        stack.store.zero_grads()
        ad.backward(loss)

    t = timeit(step, budget=2.0)
    print(f"  {_kernels.BACKEND} dispatch: {t * 1e3:.1f} ms per step")
    print("  (set FLOWSCALE_KERNELS=py or =ext before import to force one backend)")


if __name__ == "__main__":
    bench_kernels()
    bench_flow()
