"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array plus an optional tape record (parents and a
backward rule).  The tape is rebuilt on every forward pass (define-by-run).
Backward rules are themselves written in terms of tensor primitives, so
gradients are ordinary tape tensors and can be differentiated again - this is
what makes the critic gradient penalty trainable.

Values are checked for NaN/Inf after every primitive; non-finite results
raise ``NonFiniteError`` instead of propagating silently.
"""

import math
from contextlib import contextmanager

import numpy as np

from . import _kernels


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf from finite inputs."""


class DomainError(ArithmeticError):
    """An input left the mathematical domain of a primitive (log <= 0, x/0)."""


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(value, op):
    # summing is far cheaper than isfinite().all(); any NaN/Inf poisons the sum
    if not math.isfinite(float(value.sum())):
        raise NonFiniteError(f"non-finite result in '{op}'")


class Tensor:
    """Dense n-dimensional float64 array, optionally on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False):
        return Tensor(np.zeros(shape), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False):
        return Tensor(np.ones(shape), requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.item())

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{grad})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms of the primitives ---------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def slice(self, slices):
        return slice_view(self, slices)

    def pad(self, pads):
        return pad(self, pads)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    """A leaf tensor that participates in differentiation."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(value, parents, backward, op):
    """Wrap a raw result; record the tape entry when recording is on."""
    _check_finite(value, op)
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Reduce a gradient back to ``shape`` after numpy-style broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# -- elementwise binary -------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    val = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(val, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    val = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make(val, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    val = a.data * b.data

    def backward(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make(val, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero in 'div'")
    val = a.data / b.data

    def backward(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(val, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)

    def backward(g):
        return (neg(g),)

    return _make(-a.data, (a,), backward, "neg")


# -- elementwise unary --------------------------------------------------------


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        val = np.exp(a.data)

    def backward(g):
        return (mul(g, out),)

    out = _make(val, (a,), backward, "exp")
    return out


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    val = np.log(a.data)

    def backward(g):
        return (div(g, a),)

    return _make(val, (a,), backward, "log")


def tanh(a):
    a = as_tensor(a)
    val = np.tanh(a.data)

    def backward(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(val, (a,), backward, "tanh")
    return out


def _sigmoid_raw(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(a):
    a = as_tensor(a)
    val = _sigmoid_raw(a.data)

    def backward(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(val, (a,), backward, "sigmoid")
    return out


def log_sigmoid(a):
    """Numerically stable log(sigmoid(a)); never underflows to log(0)."""
    a = as_tensor(a)
    val = np.minimum(a.data, 0.0) - np.log1p(np.exp(-np.abs(a.data)))

    def backward(g):
        return (mul(g, sigmoid(neg(a))),)

    return _make(val, (a,), backward, "log_sigmoid")


def relu(a):
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))

    def backward(g):
        return (mul(g, mask),)

    return _make(np.maximum(a.data, 0.0), (a,), backward, "relu")


def power(a, p):
    """Elementwise a**p for a real constant exponent."""
    a = as_tensor(a)
    p = float(p)
    with np.errstate(over="ignore", invalid="ignore"):  # surfaced as NonFiniteError
        val = a.data**p

    def backward(g):
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _make(val, (a,), backward, "power")


# -- reductions ----------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    val = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gk = g if keepdims else reshape(g, _keepdims_shape(a.shape, axes))
        return (broadcast_to(gk, a.shape),)

    return _make(val, (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reduce_max(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    val = a.data.max(axis=axes, keepdims=keepdims)
    val_k = a.data.max(axis=axes, keepdims=True)
    mask = (a.data == val_k).astype(np.float64)
    mask /= mask.sum(axis=axes, keepdims=True)  # ties share the gradient
    mask_t = Tensor(mask)

    def backward(g):
        gk = g if keepdims else reshape(g, _keepdims_shape(a.shape, axes))
        return (mul(broadcast_to(gk, a.shape), mask_t),)

    return _make(val, (a,), backward, "max-reduce")


# -- linear algebra -------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape} do not conform")
    val = a.data @ b.data

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(val, (a, b), backward, "matmul")


def inv(a):
    """Matrix inverse of a square 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"inv expects a square matrix, got {a.shape}")
    try:
        val = np.linalg.inv(a.data)
    except np.linalg.LinAlgError as err:
        raise ValueError(f"singular matrix in 'inv': {err}") from None

    def backward(g):
        yt = transpose(out)
        return (neg(matmul(yt, matmul(g, yt))),)

    out = _make(val, (a,), backward, "inv")
    return out


def slogdet(a):
    """log|det A| of a square 2-D tensor (scalar)."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"slogdet expects a square matrix, got {a.shape}")
    sign, logabs = np.linalg.slogdet(a.data)
    if sign == 0 or not np.isfinite(logabs):
        raise ValueError("singular matrix in 'slogdet'")

    def backward(g):
        return (mul(g, transpose(inv(a))),)

    return _make(logabs, (a,), backward, "slogdet")


# -- structural ops --------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.shape
    val = a.data.reshape(shape)

    def backward(g):
        return (reshape(g, orig),)

    return _make(val, (a,), backward, "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (transpose(g, inverse),)

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def broadcast_to(a, shape):
    a = as_tensor(a)
    val = np.broadcast_to(a.data, shape)

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _make(val, (a,), backward, "broadcast")


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    axis = axis % parts[0].ndim
    val = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for part, start in zip(parts, offsets):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(start), int(start) + part.shape[axis])
            grads.append(slice_view(g, tuple(sl)))
        return tuple(grads)

    return _make(val, tuple(parts), backward, "concat")


def slice_view(a, slices):
    """Basic slicing with a tuple of ``slice`` objects (no steps)."""
    a = as_tensor(a)
    if not isinstance(slices, tuple):
        slices = (slices,)
    norm = []
    for dim, sl in zip(a.shape, slices):
        if not isinstance(sl, slice) or sl.step not in (None, 1):
            raise ShapeError("slice supports contiguous slices only")
        start, stop, _ = sl.indices(dim)
        norm.append((start, stop))
    norm.extend((0, dim) for dim in a.shape[len(slices) :])
    val = a.data[tuple(slice(s, e) for s, e in norm)]
    pads = tuple((s, dim - e) for (s, e), dim in zip(norm, a.shape))

    def backward(g):
        return (pad(g, pads),)

    return _make(val, (a,), backward, "slice")


def pad(a, pads):
    """Zero padding; ``pads`` is a (before, after) pair per axis."""
    a = as_tensor(a)
    pads = tuple((int(b), int(e)) for b, e in pads)
    if len(pads) != a.ndim:
        raise ShapeError(f"pad expects {a.ndim} pairs, got {len(pads)}")
    window = tuple(slice(b, b + n) for (b, _), n in zip(pads, a.shape))
    val = np.zeros(tuple(b + n + e for (b, e), n in zip(pads, a.shape)))
    val[window] = a.data

    def backward(g):
        return (slice_view(g, window),)

    return _make(val, (a,), backward, "pad")


def flip_hw(a):
    """Reverse the last two axes (used to rotate convolution kernels)."""
    a = as_tensor(a)
    val = a.data[..., ::-1, ::-1]

    def backward(g):
        return (flip_hw(g),)

    return _make(np.ascontiguousarray(val), (a,), backward, "flip_hw")


def _dilate_axis(a, axis, stride):
    """Insert stride-1 zeros between entries along one of the last two axes."""
    n = a.shape[axis]
    shape = list(a.shape)
    expand = shape[: axis % a.ndim + 1] + [1] + shape[axis % a.ndim + 1 :]
    out = reshape(a, tuple(expand))
    pads = [(0, 0)] * len(expand)
    pads[axis % a.ndim + 1] = (0, stride - 1)
    out = pad(out, tuple(pads))
    merged = shape[: axis % a.ndim] + [n * stride] + shape[axis % a.ndim + 1 :]
    out = reshape(out, tuple(merged))
    window = [slice(None)] * len(merged)
    window[axis % a.ndim] = slice(0, n * stride - (stride - 1))
    return slice_view(out, tuple(window))


def dilate_hw(a, stride):
    """Zero-stuff the two trailing spatial axes by ``stride``."""
    if stride == 1:
        return a
    return _dilate_axis(_dilate_axis(a, -1, stride), -2, stride)


# -- convolution ------------------------------------------------------------------


def _conv_valid(x, w, stride):
    """Valid cross-correlation; the backward rule is itself a conv composition."""
    val = _kernels.conv2d_forward(x.data, w.data, stride)
    n, c, hp, wp = x.shape
    o, _, kh, kw = w.shape
    oh, ow = val.shape[2], val.shape[3]

    def backward(g):
        gd = dilate_hw(g, stride)
        gx = gw = None
        if x.requires_grad:
            # input gradient: full correlation with the rotated, o/i-swapped kernel
            full = pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wr = transpose(flip_hw(w), (1, 0, 2, 3))
            gx = _conv_valid(full, wr, 1)
            lh = hp - ((oh - 1) * stride + kh)
            lw = wp - ((ow - 1) * stride + kw)
            if lh or lw:
                gx = pad(gx, ((0, 0), (0, 0), (0, lh), (0, lw)))
        if w.requires_grad:
            # kernel gradient: correlate input with the dilated output gradient
            xt = transpose(x, (1, 0, 2, 3))
            gt = transpose(gd, (1, 0, 2, 3))
            gwt = _conv_valid(xt, gt, 1)
            gwt = slice_view(gwt, (slice(None), slice(None), slice(0, kh), slice(0, kw)))
            gw = transpose(gwt, (1, 0, 2, 3))
        return gx, gw

    return _make(val, (x, w), backward, "conv2d")


def _same_pads(n, k, stride):
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def conv2d(x, w, stride=1, padding="valid"):
    """Cross-correlation of an NCHW input with an OIHW kernel.

    ``padding`` is ``"valid"`` (no padding) or ``"same"`` (output spatial
    extent ceil(n/stride), zeros split evenly with the extra zero trailing).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW kernel")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding == "same":
        ph = _same_pads(x.shape[2], w.shape[2], stride)
        pw = _same_pads(x.shape[3], w.shape[3], stride)
        x = pad(x, ((0, 0), (0, 0), ph, pw))
    elif padding != "valid":
        raise ValueError(f"unknown padding {padding!r}")
    if w.shape[2] > x.shape[2] or w.shape[3] > x.shape[3]:
        raise ShapeError(
            f"kernel {w.shape[2]}x{w.shape[3]} larger than padded input "
            f"{x.shape[2]}x{x.shape[3]}"
        )
    return _conv_valid(x, w, stride)


# -- generic dispatch ----------------------------------------------------------

_OP_TABLE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "power": power,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "max-reduce": reduce_max,
    "matmul": matmul,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast": broadcast_to,
    "concat": concat,
    "slice": slice_view,
    "pad": pad,
}


def forward_op(kind, *operands, **attrs):
    """Apply a primitive by name; unknown kinds are rejected."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ValueError(f"unknown primitive op {kind!r}") from None
    return fn(*operands, **attrs)


# -- backward pass ---------------------------------------------------------------


def _topo_order(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _accumulate(root, seed):
    """Yield (leaf, gradient) pairs; leaves are tape tensors with no parents."""
    grads = {id(root): seed}
    order = _topo_order(root)  # holds every node alive, so id() keys stay unambiguous
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                yield node, g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else add(prev, pg)


def backward(root, create_graph=False):
    """Accumulate gradients of a scalar root into every reachable leaf's .grad."""
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not require gradients")
    seed = Tensor(np.ones_like(root.data))
    if create_graph:
        for leaf, g in _accumulate(root, seed):
            leaf.grad = g if leaf.grad is None else add(leaf.grad, g)
    else:
        with no_grad():
            for leaf, g in _accumulate(root, seed):
                leaf.grad = g.detach() if leaf.grad is None else add(leaf.grad, g).detach()


def grad(output, inputs, create_graph=False):
    """Gradients of a scalar output w.r.t. ``inputs`` without touching .grad.

    Returns one tensor per input (zeros when unreachable).  With
    ``create_graph=True`` the results stay on the tape and can be
    differentiated again.
    """
    if output.size != 1:
        raise ShapeError(f"grad output must be scalar, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("output does not require gradients")
    wanted = {id(t): i for i, t in enumerate(inputs)}
    results = [None] * len(inputs)
    seed = Tensor(np.ones_like(output.data))

    def run():
        for leaf, g in _accumulate(output, seed):
            if id(leaf) in wanted:
                i = wanted[id(leaf)]
                results[i] = g if results[i] is None else add(results[i], g)

    if create_graph:
        run()
    else:
        with no_grad():
            run()
    return [r if r is not None else Tensor(np.zeros(t.shape)) for r, t in zip(results, inputs)]


# -- gradient checking -------------------------------------------------------------


def grad_check(f, point, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.  The error at each coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    out = f(x)
    backward(out)
    analytic = x.grad.data.reshape(-1)

    # f may build its own tape internally (e.g. a gradient penalty), so the
    # numeric evaluations run with recording enabled.
    base = np.array(point, dtype=np.float64)
    numeric = np.zeros(base.size)
    flat = base.reshape(-1)
    for i in range(base.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(base)).item()
        flat[i] = orig - step
        lo = f(Tensor(base)).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)
    if not np.isfinite(numeric).all():
        raise NonFiniteError("non-finite finite-difference evaluation")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
