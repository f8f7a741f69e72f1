import numpy as np
import pytest

from flowscale import autodiff as ad
from flowscale.flows import FlowStack, GaussianPrior


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def prior():
    return GaussianPrior()


def small_stack(in_shape=(2, 4, 4), levels=2, steps=2, hidden=4, seed=0, init_batch=16):
    """A tiny initialized flow stack for oracle tests."""
    stack = FlowStack(in_shape, levels, steps, hidden, name="t", rng=np.random.default_rng(seed))
    data = np.random.default_rng(seed + 1).normal(size=(init_batch,) + tuple(in_shape))
    with ad.no_grad():
        stack.forward(ad.Tensor(data))
    return stack


def conv_loop_oracle(x, w, stride):
    """Direct quadruple-loop cross-correlation definition."""
    n, c, h, width = x.shape
    o, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (width - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for bi in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for cc in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[bi, cc, i * stride + u, j * stride + v] * w[oc, cc, u, v]
                    out[bi, oc, i, j] = acc
    return out


def numeric_jacobian(fn, x0, h=1e-6):
    """Central-difference Jacobian of a flat->flat map."""
    d_in = x0.size
    probe = fn(x0)
    jac = np.zeros((probe.size, d_in))
    flat = x0.reshape(-1)
    for i in range(d_in):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))) / (2 * h)
    return jac


def param_fd_check(loss_fn, params, step=1e-5, max_coords=None, rng=None):
    """Max relative error of analytic parameter gradients vs central differences.

    ``loss_fn`` recomputes the scalar loss from current parameter values.
    Checks every coordinate unless ``max_coords`` caps the sample per tensor.
    Losses through relu-style kinks are piecewise smooth: when a coordinate
    disagrees, the step is shrunk (twice, x10) so a genuine gradient bug
    still fails but a kink inside the original stencil does not.  When both
    sides are below the FD noise floor (~|loss|*eps/step) the coordinate
    counts as matching: comparing roundoff noise against an exact zero is
    not a gradient discrepancy.
    """
    loss = loss_fn()
    for p in params:
        p.grad = None
    ad.backward(loss)
    worst = 0.0
    atol = 1e-7
    for p in params:
        analytic = p.grad.data.reshape(-1) if p.grad is not None else np.zeros(p.size)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            err = np.inf
            for h in (step, step / 10, step / 100):
                flat[i] = orig + h
                hi = loss_fn().item()
                flat[i] = orig - h
                lo = loss_fn().item()
                flat[i] = orig
                numeric = (hi - lo) / (2 * h)
                if abs(analytic[i]) < atol and abs(numeric) < atol:
                    err = 0.0
                    break
                denom = max(abs(analytic[i]), abs(numeric), 1e-8)
                err = min(err, abs(analytic[i] - numeric) / denom)
                if err < 1e-4:
                    break
            worst = max(worst, err)
    return worst
