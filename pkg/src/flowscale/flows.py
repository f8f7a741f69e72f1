"""Invertible layers with exact log-det Jacobians, composable into
multi-scale stacks.

Convention used everywhere: the *forward* direction maps data to latent
(x -> z), so  log p(x) = log p_Z(z) + logdet_forward(x).  The inverse logdet
is the exact negative of the forward logdet at the image point.
"""

import math
from collections import namedtuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LayerResult = namedtuple("LayerResult", ["output", "logdet"])

FORWARD = "forward"
INVERSE = "inverse"


def _check_direction(direction):
    if direction not in (FORWARD, INVERSE):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def _per_item(logdet_scalar, n):
    """Broadcast a scalar logdet to one value per batch item."""
    return ad.broadcast_to(ad.reshape(logdet_scalar, (1,)), (n,))


class GaussianPrior:
    """Standard isotropic Gaussian over flattened latents."""

    def log_prob(self, z):
        d = z.shape[1]
        sq = ad.reduce_sum(ad.mul(z, z), axis=1)
        return ad.sub(ad.mul(sq, -0.5), 0.5 * d * math.log(2.0 * math.pi))

    def sample(self, n, d, rng):
        return rng.standard_normal((n, d))


class ActNorm:
    """Per-channel affine y = (x + bias) * scale with data-dependent init.

    Scales are parameterized as exp(log_scale), so they are strictly
    positive; a zero scale cannot be represented and is rejected on direct
    construction.
    """

    def __init__(self, channels, store=None, name="actnorm"):
        self.channels = channels
        self.initialized = False
        if store is not None:
            self.log_scale = store.add(f"{name}/logscale", np.zeros(channels))
            self.bias = store.add(f"{name}/bias", np.zeros(channels))
        else:
            self.log_scale = ad.parameter(np.zeros(channels))
            self.bias = ad.parameter(np.zeros(channels))

    @classmethod
    def from_scale_bias(cls, scale, bias):
        scale = np.asarray(scale, dtype=np.float64)
        if np.any(scale <= 0):
            raise ValueError("actnorm scale must be positive")
        layer = cls(len(scale))
        layer.log_scale.data = np.log(scale)
        layer.bias.data = np.asarray(bias, dtype=np.float64)
        layer.initialized = True
        return layer

    def initialize_from(self, x_data):
        """Set bias/scale so the first batch comes out zero-mean unit-std.

        The std is floored at 1e-6: degenerate (near-constant) channels would
        otherwise get astronomically large scales and make the flow explode
        off the init batch.  Dequantization noise keeps real data away from
        the floor.
        """
        axes = (0, 2, 3)
        mean = x_data.mean(axis=axes)
        std = x_data.std(axis=axes)
        if np.any(std <= 0):
            raise ValueError("actnorm init requires per-channel variance > 0")
        self.bias.data = -mean
        self.log_scale.data = -np.log(np.maximum(std, 1e-6))
        self.initialized = True

    def apply(self, x, direction=FORWARD):
        _check_direction(direction)
        if x.shape[1] != self.channels:
            raise ad.ShapeError(f"actnorm expects {self.channels} channels, got {x.shape[1]}")
        if not self.initialized and direction == FORWARD:
            self.initialize_from(x.data)
        n, _, h, w = x.shape
        scale = ad.exp(ad.reshape(self.log_scale, (1, self.channels, 1, 1)))
        bias = ad.reshape(self.bias, (1, self.channels, 1, 1))
        ld = ad.mul(ad.reduce_sum(self.log_scale), float(h * w))
        if direction == FORWARD:
            out = ad.mul(ad.add(x, bias), scale)
            return LayerResult(out, _per_item(ld, n))
        out = ad.sub(ad.div(x, scale), bias)
        return LayerResult(out, _per_item(ad.neg(ld), n))


class InvConv1x1:
    """Channel mixing by a square matrix at every pixel.

    The matrix is stored directly; the inverse direction multiplies by its
    (differentiable) inverse.  A tiny diagonal jitter is applied if the
    matrix ever drifts towards singularity.
    """

    DET_FLOOR = 1e-12

    def __init__(self, channels, store=None, name="invconv", rng=None):
        self.channels = channels
        rng = rng or np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
        if store is not None:
            self.weight = store.add(f"{name}/weight", q)
        else:
            self.weight = ad.parameter(q)

    @classmethod
    def from_matrix(cls, w):
        w = np.asarray(w, dtype=np.float64)
        layer = cls(w.shape[0])
        layer.weight.data = w.copy()
        return layer

    def _guard(self):
        sign, logabs = np.linalg.slogdet(self.weight.data)
        if sign == 0 or logabs < math.log(self.DET_FLOOR):
            self.weight.data = self.weight.data + 1e-6 * np.eye(self.channels)

    def apply(self, x, direction=FORWARD):
        _check_direction(direction)
        c = self.channels
        if x.shape[1] != c:
            raise ad.ShapeError(f"invconv expects {c} channels, got {x.shape[1]}")
        self._guard()
        n, _, h, w = x.shape
        mat = self.weight if direction == FORWARD else ad.inv(self.weight)
        xr = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (n * h * w, c))
        yr = ad.matmul(xr, ad.transpose(mat))
        out = ad.transpose(ad.reshape(yr, (n, h, w, c)), (0, 3, 1, 2))
        ld = ad.mul(ad.slogdet(self.weight), float(h * w))
        if direction == INVERSE:
            ld = ad.neg(ld)
        return LayerResult(out, _per_item(ld, n))


class Conditioner:
    """Small conv net mapping half the channels to (log-scale, shift) maps.

    Two 3x3 convolutions with ReLU followed by a zero-initialized 3x3 output
    convolution, so a fresh coupling layer starts out (near) identity.
    """

    def __init__(self, in_channels, out_channels, hidden, store, name, rng):
        def he(shape, fan_in):
            return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)

        self.w1 = store.add(f"{name}/w1", he((hidden, in_channels, 3, 3), in_channels * 9))
        self.b1 = store.add(f"{name}/b1", np.zeros(hidden))
        self.w2 = store.add(f"{name}/w2", he((hidden, hidden, 3, 3), hidden * 9))
        self.b2 = store.add(f"{name}/b2", np.zeros(hidden))
        self.w3 = store.add(f"{name}/w3", np.zeros((out_channels, hidden, 3, 3)))
        self.b3 = store.add(f"{name}/b3", np.zeros(out_channels))

    def __call__(self, x):
        def bias(b):
            return ad.reshape(b, (1, b.shape[0], 1, 1))

        h = ad.relu(ad.add(ad.conv2d(x, self.w1, 1, "same"), bias(self.b1)))
        h = ad.relu(ad.add(ad.conv2d(h, self.w2, 1, "same"), bias(self.b2)))
        return ad.add(ad.conv2d(h, self.w3, 1, "same"), bias(self.b3))


class AffineCoupling:
    """Affine coupling with the stabilized scale sigmoid(s + 2).

    The first half of the channels passes through untouched and conditions
    the (scale, shift) applied to the second half.
    """

    def __init__(self, channels, hidden=64, store=None, name="coupling", rng=None):
        if channels < 2 or channels % 2:
            raise ValueError(f"coupling needs an even channel count, got {channels}")
        self.channels = channels
        self.half = channels // 2
        own_store = store
        if own_store is None:
            from .params import ParameterStore

            own_store = ParameterStore()
        self.conditioner = Conditioner(
            self.half, channels, hidden, own_store, name, rng or np.random.default_rng(0)
        )

    def _scale_shift(self, xa):
        st = self.conditioner(xa)
        s = ad.slice_view(st, (slice(None), slice(0, self.half)))
        t = ad.slice_view(st, (slice(None), slice(self.half, self.channels)))
        pre = ad.add(s, 2.0)
        return ad.sigmoid(pre), ad.log_sigmoid(pre), t

    def apply(self, x, direction=FORWARD):
        _check_direction(direction)
        if x.shape[1] != self.channels:
            raise ad.ShapeError(f"coupling expects {self.channels} channels, got {x.shape[1]}")
        xa = ad.slice_view(x, (slice(None), slice(0, self.half)))
        xb = ad.slice_view(x, (slice(None), slice(self.half, self.channels)))
        scale, log_scale, shift = self._scale_shift(xa)
        ld = ad.reduce_sum(log_scale, axis=(1, 2, 3))
        if direction == FORWARD:
            yb = ad.add(ad.mul(xb, scale), shift)
            return LayerResult(ad.concat([xa, yb], axis=1), ld)
        xb_rec = ad.div(ad.sub(xb, shift), scale)
        return LayerResult(ad.concat([xa, xb_rec], axis=1), ad.neg(ld))


def squeeze(x, direction=FORWARD):
    """2x2 space-to-channel rearrangement; volume preserving, logdet 0."""
    _check_direction(direction)
    if direction == FORWARD:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ad.ShapeError(f"squeeze requires even spatial extents, got {h}x{w}")
        out = ad.reshape(x, (n, c, h // 2, 2, w // 2, 2))
        out = ad.transpose(out, (0, 1, 3, 5, 2, 4))
        return ad.reshape(out, (n, c * 4, h // 2, w // 2))
    n, c, h, w = x.shape
    if c % 4:
        raise ad.ShapeError(f"unsqueeze requires channels divisible by 4, got {c}")
    out = ad.reshape(x, (n, c // 4, 2, 2, h, w))
    out = ad.transpose(out, (0, 1, 4, 2, 5, 3))
    return ad.reshape(out, (n, c // 4, h * 2, w * 2))


class FlowStack:
    """Glow-style multi-scale flow: per level an optional squeeze, K steps of
    (actnorm, 1x1 conv, coupling), and a channel split that factors half the
    channels straight out to the prior.

    The latent is exposed flattened: all factored-out parts plus the final
    pipe state, concatenated in emission order.  Both stacks of an aligned
    pair must therefore be built from the same geometry.
    """

    def __init__(self, in_shape, levels=2, steps=4, hidden=64, store=None, name="flow", rng=None):
        from .params import ParameterStore

        self.in_shape = tuple(in_shape)
        self.levels = levels
        self.steps = steps
        self.hidden = hidden
        self.store = store if store is not None else ParameterStore()
        rng = rng or np.random.default_rng(0)

        self.plan = []
        self.latent_shapes = []
        c, h, w = self.in_shape
        for lv in range(levels):
            if h % 2 == 0 and w % 2 == 0 and h >= 2 and w >= 2:
                self.plan.append(("squeeze", None))
                c, h, w = c * 4, h // 2, w // 2
            if c < 2 or c % 2:
                raise ValueError(
                    f"flow level {lv} reaches {c} channels; couplings need an even count >= 2"
                )
            for st in range(steps):
                base = f"{name}/lv{lv}/st{st}"
                self.plan.append(("layer", ActNorm(c, self.store, f"{base}/actnorm")))
                self.plan.append(
                    ("layer", InvConv1x1(c, self.store, f"{base}/invconv", rng=rng))
                )
                self.plan.append(
                    ("layer", AffineCoupling(c, hidden, self.store, f"{base}/coupling", rng=rng))
                )
            if lv < levels - 1 and c >= 4:
                self.plan.append(("split", (c // 2, h, w)))
                self.latent_shapes.append((c // 2, h, w))
                c = c // 2
        self.latent_shapes.append((c, h, w))
        self.latent_dim = int(np.prod(self.in_shape))

    @property
    def initialized(self):
        return all(
            layer.initialized
            for kind, layer in self.plan
            if kind == "layer" and isinstance(layer, ActNorm)
        )

    def mark_initialized(self):
        for kind, layer in self.plan:
            if kind == "layer" and isinstance(layer, ActNorm):
                layer.initialized = True

    def config(self):
        return {
            "in_shape": list(self.in_shape),
            "levels": self.levels,
            "steps": self.steps,
            "hidden": self.hidden,
        }

    def _flatten_parts(self, parts):
        n = parts[0].shape[0]
        flat = [ad.reshape(p, (n, int(np.prod(p.shape[1:])))) for p in parts]
        return flat[0] if len(flat) == 1 else ad.concat(flat, axis=1)

    def forward(self, x):
        """Data to latent.  Returns (z flat (N, D), logdet (N,))."""
        x = ad.as_tensor(x)
        if tuple(x.shape[1:]) != self.in_shape:
            raise ad.ShapeError(f"expected input shape {self.in_shape}, got {tuple(x.shape[1:])}")
        n = x.shape[0]
        logdet = Tensor(np.zeros(n))
        parts = []
        for kind, payload in self.plan:
            if kind == "squeeze":
                x = squeeze(x, FORWARD)
            elif kind == "layer":
                x, ld = payload.apply(x, FORWARD)
                logdet = ad.add(logdet, ld)
            else:  # split
                c_half = payload[0]
                keep = ad.slice_view(x, (slice(None), slice(0, c_half)))
                emit = ad.slice_view(x, (slice(None), slice(c_half, 2 * c_half)))
                parts.append(emit)
                x = keep
        parts.append(x)
        return self._flatten_parts(parts), logdet

    def inverse(self, z):
        """Latent (flat) back to data."""
        z = ad.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ad.ShapeError(f"expected latent shape (N, {self.latent_dim}), got {tuple(z.shape)}")
        n = z.shape[0]
        parts = []
        offset = 0
        for shape in self.latent_shapes:
            size = int(np.prod(shape))
            seg = ad.slice_view(z, (slice(None), slice(offset, offset + size)))
            parts.append(ad.reshape(seg, (n,) + shape))
            offset += size
        x = parts.pop()
        for kind, payload in reversed(self.plan):
            if kind == "squeeze":
                x = squeeze(x, INVERSE)
            elif kind == "layer":
                x, _ = payload.apply(x, INVERSE)
            else:  # split: reattach the emitted half
                x = ad.concat([x, parts.pop()], axis=1)
        return x

    def forward_logdet(self, x):
        return self.forward(x)[1]


def flow_log_prob(stack, prior, x):
    """Exact per-item log density under the change of variables."""
    z, logdet = stack.forward(x)
    return ad.add(prior.log_prob(z), logdet)
