"""Convolution kernel backend selection.

The hot loop of the whole library is 2-D cross-correlation: every coupling
conditioner and every critic layer funnels through ``conv2d_forward``.  Two
implementations exist:

* ``_convext`` - a compiled Cython kernel.  Fast at small problem sizes,
  where numpy's per-call overhead dominates (typical for gradient-check
  oracles and desk-scale flows).
* ``conv_py`` - a pure numpy fallback (window view + BLAS tensordot).
  Faster for large contractions.

By default the dispatcher picks per call by multiply-accumulate count
(crossover measured by ``benchmarks/bench_kernels.py``).  Set
``FLOWSCALE_KERNELS=py`` or ``=ext`` to force one backend (``ext`` raises if
the extension is missing).
"""

import os

from . import conv_py

# measured crossover: below this MAC count the compiled loop beats BLAS
MAC_CROSSOVER = 100_000

_requested = os.environ.get("FLOWSCALE_KERNELS", "auto")

_ext = None
if _requested != "py":
    try:
        from . import _convext as _ext
    except ImportError:
        if _requested == "ext":
            raise

if _ext is None:
    BACKEND = "python"
    conv2d_forward = conv_py.conv2d_forward
elif _requested == "ext":
    BACKEND = "compiled"
    conv2d_forward = _ext.conv2d_forward
else:
    BACKEND = "hybrid"

    def conv2d_forward(x, w, stride):
        n, c, h, width = x.shape
        o, _, kh, kw = w.shape
        oh = (h - kh) // stride + 1
        ow = (width - kw) // stride + 1
        macs = n * o * oh * ow * c * kh * kw
        if macs < MAC_CROSSOVER:
            return _ext.conv2d_forward(x, w, stride)
        return conv_py.conv2d_forward(x, w, stride)


__all__ = ["conv2d_forward", "BACKEND", "MAC_CROSSOVER", "conv_py"]
