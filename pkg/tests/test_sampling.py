import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowscale import autodiff as ad
from flowscale import sampling as sp
from flowscale.align import AlignFlowModel, cross_map
from flowscale.autodiff import Tensor
from flowscale.flows import GaussianPrior

from test_align import ScaleFlow


def toy_model(sx=1.0, sy=1.0, shape=(1, 2, 2)):
    return SimpleNamespace(
        fx=ScaleFlow(shape, sx), fy=ScaleFlow(shape, sy), prior=GaussianPrior()
    )


def real_model(seed=0):
    model = AlignFlowModel((1, 8, 8), 2, 2, 6, (4, 8), seed=seed)
    rng = np.random.default_rng([seed, 77])
    model.initialize(rng.normal(size=(32, 1, 8, 8)), rng.normal(size=(32, 1, 8, 8)))
    return model


class TestSpecs:
    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError, match="temperature"):
            sp.SamplingSpec(count=1, temperature=-0.1)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError, match="count"):
            sp.SamplingSpec(count=0)

    def test_unsorted_fractions_rejected(self):
        with pytest.raises(ValueError, match="sorted"):
            sp.InterpolationSpec([0.5, 0.2])

    def test_out_of_range_fraction_rejected(self):
        with pytest.raises(ValueError, match="0, 1"):
            sp.InterpolationSpec([0.0, 1.5])


class TestUnconditional:
    def test_identity_flows_x_equals_y_equals_z(self):
        model = toy_model(1.0, 1.0)
        pairs = sp.sample_unconditional(model, sp.SamplingSpec(count=3, seed=5))
        rng = np.random.default_rng([5, 0xDA7A])
        z = model.prior.sample(3, 4, rng)
        for i, (x, y) in enumerate(pairs):
            assert np.array_equal(x, y)
            assert np.allclose(x.ravel(), z[i])

    def test_fixed_seed_reproducible(self):
        model = real_model()
        a = sp.sample_unconditional(model, sp.SamplingSpec(count=2, seed=9))
        b = sp.sample_unconditional(model, sp.SamplingSpec(count=2, seed=9))
        for (xa, ya), (xb, yb) in zip(a, b):
            assert np.array_equal(xa, xb) and np.array_equal(ya, yb)

    def test_scale_flows_share_one_latent(self):
        # fx scales by 2, fy by 3 toward the latent: decoded y = 1.5 * x... no,
        # decoding divides: x = z/2, y = z/3, so y = (2/3) x elementwise
        model = toy_model(2.0, 3.0)
        pairs = sp.sample_unconditional(model, sp.SamplingSpec(count=4, seed=1))
        for x, y in pairs:
            assert np.allclose(y, x * 2.0 / 3.0)

    def test_pair_coupling_reencodes_to_same_latent(self):
        model = real_model(seed=3)
        pairs = sp.sample_unconditional(model, sp.SamplingSpec(count=2, seed=2))
        with ad.no_grad():
            for x, y in pairs:
                zx, _ = model.fx.forward(Tensor(x[None]))
                zy, _ = model.fy.forward(Tensor(y[None]))
                assert np.abs(zx.data - zy.data).max() < 1e-5


class TestConditional:
    def test_zero_temperature_equals_cross_map_bitwise(self, rng):
        model = real_model(seed=4)
        x = rng.normal(size=(1, 8, 8))
        samples = sp.sample_conditional(model, x, sp.SamplingSpec(count=3, temperature=0.0, seed=0))
        with ad.no_grad():
            expect = cross_map(model, Tensor(x[None]), "x-to-y").data[0]
        for s in samples:
            assert np.array_equal(s, expect)

    def test_identity_flows_unit_temperature_variance(self):
        # samples are x + eps with eps ~ N(0, 1): per-coordinate variance -> 1
        model = toy_model(1.0, 1.0, shape=(1, 2, 2))
        x = np.zeros((1, 2, 2))
        samples = sp.sample_conditional(
            model, x, sp.SamplingSpec(count=1000, temperature=1.0, seed=11)
        )
        arr = np.stack(samples)
        var = arr.reshape(1000, -1).var(axis=0)
        assert np.all(np.abs(var - 1.0) < 0.1)

    def test_spread_monotone_in_temperature(self):
        model = real_model(seed=6)
        x = np.random.default_rng(0).normal(size=(1, 8, 8))
        for seed in range(20):
            spreads = []
            for sigma in (0.1, 0.4, 0.7):
                samples = sp.sample_conditional(
                    model, x, sp.SamplingSpec(count=6, temperature=sigma, seed=seed)
                )
                arr = np.stack(samples).reshape(6, -1)
                d = [np.linalg.norm(arr[i] - arr[j]) for i in range(6) for j in range(i + 1, 6)]
                spreads.append(np.mean(d))
            assert spreads[0] < spreads[1] < spreads[2], (seed, spreads)


class TestSlerp:
    def test_endpoint_identities(self, rng):
        z1 = rng.normal(size=8)
        z2 = rng.normal(size=8)
        assert np.array_equal(sp.slerp(z1, z2, 0.0), z1)
        assert np.array_equal(sp.slerp(z1, z2, 1.0), z2)

    def test_orthogonal_unit_midpoint(self):
        out = sp.slerp(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.5)
        assert np.allclose(out, [math.sqrt(2) / 2, math.sqrt(2) / 2], atol=1e-12)

    def test_unit_norm_preserved_along_path(self, rng):
        z1 = rng.normal(size=16)
        z1 /= np.linalg.norm(z1)
        z2 = rng.normal(size=16)
        z2 /= np.linalg.norm(z2)
        for mu in np.linspace(0, 1, 11):
            assert abs(np.linalg.norm(sp.slerp(z1, z2, mu)) - 1.0) < 1e-9

    def test_zero_endpoint_rejected(self):
        with pytest.raises(ValueError, match="nonzero"):
            sp.slerp(np.zeros(4), np.ones(4), 0.5)

    def test_collinear_falls_back_to_lerp(self):
        z = np.array([1.0, 2.0])
        out = sp.slerp(z, 3.0 * z, 0.5)
        assert np.allclose(out, 2.0 * z)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def test_symmetry_property(self, seed, mu):
        rng = np.random.default_rng(seed)
        z1 = rng.normal(size=6)
        z2 = rng.normal(size=6)
        a = sp.slerp(z1, z2, mu)
        b = sp.slerp(z2, z1, 1.0 - mu)
        assert np.abs(a - b).max() < 1e-12


class TestInterpolate:
    def test_endpoints_reconstruct(self, rng):
        model = real_model(seed=8)
        y1 = rng.normal(size=(1, 8, 8))
        y2 = rng.normal(size=(1, 8, 8))
        seq = sp.interpolate(model, y1, y2, sp.InterpolationSpec([0.0, 1.0]))
        assert np.abs(seq[0][1] - y1).max() < 1e-5
        assert np.abs(seq[-1][1] - y2).max() < 1e-5

    def test_identity_flows_slerp_of_fields(self, rng):
        model = toy_model(1.0, 1.0, shape=(1, 2, 2))
        y1 = rng.normal(size=(1, 2, 2))
        y2 = rng.normal(size=(1, 2, 2))
        seq = sp.interpolate(model, y1, y2, sp.InterpolationSpec([0.0, 0.5, 1.0]))
        expect = sp.slerp(y1.ravel(), y2.ravel(), 0.5).reshape(1, 2, 2)
        assert np.allclose(seq[1][1], expect, atol=1e-12)

    def test_latent_norms_bounded_by_endpoints(self, rng):
        model = real_model(seed=9)
        y1 = rng.normal(size=(1, 8, 8))
        y2 = rng.normal(size=(1, 8, 8))
        with ad.no_grad():
            z1 = model.fy.forward(Tensor(y1[None]))[0].data[0]
            z2 = model.fy.forward(Tensor(y2[None]))[0].data[0]
        lo = min(np.linalg.norm(z1), np.linalg.norm(z2)) - 1e-6
        hi = max(np.linalg.norm(z1), np.linalg.norm(z2)) + 1e-6
        for mu in np.linspace(0, 1, 9):
            n = np.linalg.norm(sp.slerp(z1, z2, mu))
            assert lo <= n <= hi

    def test_equal_norm_endpoints_constant_norm(self, rng):
        z1 = rng.normal(size=32)
        z2 = rng.normal(size=32)
        z2 *= np.linalg.norm(z1) / np.linalg.norm(z2)
        r = np.linalg.norm(z1)
        for mu in np.linspace(0, 1, 11):
            assert abs(np.linalg.norm(sp.slerp(z1, z2, mu)) - r) < 1e-9
