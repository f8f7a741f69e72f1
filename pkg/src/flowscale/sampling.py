"""Joint sampling, temperature-controlled conditional sampling, and latent
spherical interpolation.

All routines operate on a read-only model snapshot and return plain arrays;
randomness comes exclusively from the seeded spec, so fixed seeds reproduce
sample sets exactly.  Temperature zero short-circuits to the deterministic
cross-map (bit-identical, no perturbation stream consumed).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class SamplingSpec:
    count: int = 1
    temperature: float = 0.0  # std-dev of each latent coordinate
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")


@dataclass
class InterpolationSpec:
    fractions: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])

    def __post_init__(self):
        fr = list(self.fractions)
        if any(not 0.0 <= f <= 1.0 for f in fr):
            raise ValueError("interpolation fractions must lie in [0, 1]")
        if fr != sorted(fr):
            raise ValueError("interpolation fractions must be sorted")
        self.fractions = fr


def sample_unconditional(model, spec):
    """Draw joint (x, y) pairs decoding the same latent through both flows."""
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    d = model.fx.latent_dim
    with ad.no_grad():
        z = ad.Tensor(model.prior.sample(spec.count, d, rng))
        xs = model.fx.inverse(z).data
        ys = model.fy.inverse(z).data
    return [(xs[i], ys[i]) for i in range(spec.count)]


def sample_conditional(model, x, spec):
    """Decode perturbed latents of ``x`` through the Y flow.

    Perturbations are Gaussian with per-coordinate standard deviation equal
    to the temperature; at temperature zero every sample equals the
    deterministic cross-map exactly.
    """
    x = ad.as_tensor(x)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    rng = np.random.default_rng([spec.seed, 0xC04D])
    with ad.no_grad():
        z, _ = model.fx.forward(x)
        if spec.temperature == 0.0:
            y = model.fy.inverse(z).data[0]
            return [y.copy() for _ in range(spec.count)]
        out = []
        for _ in range(spec.count):
            eps = spec.temperature * rng.standard_normal(z.shape)
            out.append(model.fy.inverse(ad.add(z, ad.Tensor(eps))).data[0])
    return out


def slerp(z1, z2, mu):
    """Spherical interpolation between two latent vectors.

    Follows the great circle between the (flattened) endpoints; collinear
    endpoints fall back to linear interpolation.
    """
    a = np.asarray(z1, dtype=np.float64)
    b = np.asarray(z2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"endpoint shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    fa, fb = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("slerp endpoints must be nonzero")
    cos = float(np.clip(fa @ fb / (na * nb), -1.0, 1.0))
    theta = math.acos(cos)
    if theta < 1e-6:
        return ((1.0 - mu) * a + mu * b).reshape(a.shape)
    s = math.sin(theta)
    return (math.sin((1.0 - mu) * theta) / s) * a + (math.sin(mu * theta) / s) * b


def interpolate(model, y1, y2, spec):
    """Encode two Y-domain fields, Slerp their latents, decode both domains.

    Returns one (x, y) array pair per fraction; fractions 0 and 1 reproduce
    the encoded endpoints.
    """
    y1 = ad.as_tensor(y1)
    y2 = ad.as_tensor(y2)
    if y1.ndim == 3:
        y1 = ad.reshape(y1, (1,) + y1.shape)
    if y2.ndim == 3:
        y2 = ad.reshape(y2, (1,) + y2.shape)
    with ad.no_grad():
        z1 = model.fy.forward(y1)[0].data[0]
        z2 = model.fy.forward(y2)[0].data[0]
        out = []
        for mu in spec.fractions:
            zk = ad.Tensor(slerp(z1, z2, mu).reshape(1, -1))
            out.append((model.fx.inverse(zk).data[0], model.fy.inverse(zk).data[0]))
    return out
