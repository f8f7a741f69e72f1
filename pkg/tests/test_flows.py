import math

import numpy as np
import pytest

from flowscale import autodiff as ad
from flowscale.autodiff import Tensor
from flowscale.flows import (
    ActNorm,
    AffineCoupling,
    InvConv1x1,
    flow_log_prob,
    squeeze,
)
from flowscale.params import ParameterStore, adam_step

from conftest import numeric_jacobian, small_stack

SIG2 = 1.0 / (1.0 + math.exp(-2.0))


def stack_logdet_vs_numeric(stack, x0):
    """Relative error between analytic logdet and the assembled Jacobian."""

    def fwd(v):
        with ad.no_grad():
            z, _ = stack.forward(Tensor(v.reshape((1,) + x0.shape)))
        return z.data.ravel()

    jac = numeric_jacobian(fwd, x0)
    numeric = np.linalg.slogdet(jac)[1]
    with ad.no_grad():
        analytic = stack.forward(Tensor(x0[None]))[1].item()
    return abs(numeric - analytic) / max(abs(numeric), 1e-12)


class TestActNorm:
    def test_identity_when_unit_scale_zero_bias(self, rng):
        layer = ActNorm.from_scale_bias([1.0, 1.0], [0.0, 0.0])
        x = Tensor(rng.normal(size=(2, 2, 3, 3)))
        out, logdet = layer.apply(x)
        assert np.array_equal(out.data, x.data)
        assert np.allclose(logdet.data, 0.0)

    def test_logdet_matches_full_jacobian_value(self, rng):
        # scales (2, 4) on a 2x2 field: logdet = 4 (ln 2 + ln 4)
        layer = ActNorm.from_scale_bias([2.0, 4.0], [0.1, -0.3])
        x = Tensor(rng.normal(size=(1, 2, 2, 2)))
        _, logdet = layer.apply(x)
        assert logdet.data[0] == pytest.approx(4 * (math.log(2) + math.log(4)), rel=1e-12)

    def test_data_dependent_init_normalizes_first_batch(self, rng):
        layer = ActNorm(3)
        x = Tensor(rng.normal(loc=5.0, scale=2.5, size=(32, 3, 4, 4)))
        out, _ = layer.apply(x)
        mean = out.data.mean(axis=(0, 2, 3))
        std = out.data.std(axis=(0, 2, 3))
        assert np.all(np.abs(mean) < 1e-6)
        assert np.all(np.abs(std - 1.0) < 1e-4)
        assert layer.initialized

    def test_inverse_exact_and_antisymmetric(self, rng):
        layer = ActNorm.from_scale_bias([0.5, 3.0], [1.0, -2.0])
        x = Tensor(rng.normal(size=(4, 2, 3, 5)))
        fwd = layer.apply(x)
        rec = layer.apply(fwd.output, "inverse")
        assert np.abs(rec.output.data - x.data).max() < 1e-12
        assert np.abs(fwd.logdet.data + rec.logdet.data).max() < 1e-8

    def test_zero_scale_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            ActNorm.from_scale_bias([1.0, 0.0], [0.0, 0.0])


class TestInvConv:
    def test_identity_matrix(self, rng):
        layer = InvConv1x1.from_matrix(np.eye(3))
        x = Tensor(rng.normal(size=(2, 3, 2, 2)))
        out, logdet = layer.apply(x)
        assert np.abs(out.data - x.data).max() < 1e-12
        assert np.allclose(logdet.data, 0.0)

    def test_permutation_swaps_channels_logdet_zero(self, rng):
        layer = InvConv1x1.from_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        x = Tensor(rng.normal(size=(1, 2, 2, 2)))
        out, logdet = layer.apply(x)
        assert np.allclose(out.data[:, 0], x.data[:, 1])
        assert np.allclose(out.data[:, 1], x.data[:, 0])
        assert np.allclose(logdet.data, 0.0)

    def test_diagonal_logdet_value(self, rng):
        # diag(2, 3) on 2x2 spatial: logdet = 4 ln 6
        layer = InvConv1x1.from_matrix(np.diag([2.0, 3.0]))
        x = Tensor(rng.normal(size=(1, 2, 2, 2)))
        _, logdet = layer.apply(x)
        assert logdet.data[0] == pytest.approx(4 * math.log(6), rel=1e-12)

    def test_inverse_roundtrip(self, rng):
        layer = InvConv1x1(4, rng=rng)
        x = Tensor(rng.normal(size=(3, 4, 2, 2)))
        fwd = layer.apply(x)
        rec = layer.apply(fwd.output, "inverse")
        assert np.abs(rec.output.data - x.data).max() < 1e-10
        assert np.abs(fwd.logdet.data + rec.logdet.data).max() < 1e-8

    def test_singular_matrix_guarded(self, rng):
        layer = InvConv1x1.from_matrix(np.zeros((2, 2)))
        x = Tensor(rng.normal(size=(1, 2, 2, 2)))
        out, _ = layer.apply(x)  # jitter keeps it invertible
        assert np.isfinite(out.data).all()


class TestCoupling:
    def test_zero_init_scales_by_sigmoid_two(self, rng):
        store = ParameterStore()
        layer = AffineCoupling(2, hidden=4, store=store, name="c", rng=rng)
        x = Tensor(rng.normal(size=(3, 2, 4, 4)))
        out, logdet = layer.apply(x)
        assert np.array_equal(out.data[:, 0], x.data[:, 0])
        assert np.allclose(out.data[:, 1], x.data[:, 1] * SIG2, atol=1e-12)
        assert np.allclose(logdet.data, 16 * math.log(SIG2), atol=1e-10)

    def test_roundtrip_random_conditioner(self, rng):
        store = ParameterStore()
        layer = AffineCoupling(4, hidden=6, store=store, name="c", rng=rng)
        for name, t in store.items():
            if name.endswith("w3"):
                t.data = rng.normal(size=t.shape) * 0.3
        x = Tensor(rng.normal(size=(2, 4, 3, 3)))
        fwd = layer.apply(x)
        rec = layer.apply(fwd.output, "inverse")
        assert np.abs(rec.output.data - x.data).max() < 1e-6
        assert np.abs(fwd.logdet.data + rec.logdet.data).max() < 1e-8

    def test_logdet_matches_assembled_jacobian(self, rng):
        store = ParameterStore()
        layer = AffineCoupling(2, hidden=4, store=store, name="c", rng=rng)
        for name, t in store.items():
            if name.endswith(("w3", "b3")):
                t.data = rng.normal(size=t.shape) * 0.4
        x0 = rng.normal(size=(2, 2, 2))

        def fwd(v):
            with ad.no_grad():
                out, _ = layer.apply(Tensor(v.reshape(1, 2, 2, 2)))
            return out.data.ravel()

        jac = numeric_jacobian(fwd, x0)
        numeric = np.linalg.slogdet(jac)[1]
        with ad.no_grad():
            analytic = layer.apply(Tensor(x0[None]))[1].item()
        assert abs(numeric - analytic) / max(abs(numeric), 1e-12) < 1e-4

    def test_odd_channel_count_rejected(self):
        with pytest.raises(ValueError, match="even"):
            AffineCoupling(3, hidden=4)


class TestSqueeze:
    def test_2x2_block_layout(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = squeeze(x)
        assert out.shape == (1, 4, 1, 1)
        assert out.data.ravel().tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_roundtrip_bit_exact(self, rng):
        x = rng.normal(size=(2, 3, 6, 4))
        out = squeeze(squeeze(Tensor(x)), "inverse")
        assert np.array_equal(out.data, x)

    def test_element_multiset_preserved(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        out = squeeze(Tensor(x))
        assert np.array_equal(np.sort(out.data.ravel()), np.sort(x.ravel()))

    def test_odd_extent_rejected(self):
        with pytest.raises(ad.ShapeError):
            squeeze(Tensor(np.zeros((1, 1, 3, 4))))


class TestFlowStack:
    def test_empty_stack_is_identity(self, rng):
        stack = small_stack(in_shape=(4, 1, 1), levels=1, steps=0, hidden=2)
        x = rng.normal(size=(3, 4, 1, 1))
        z, logdet = stack.forward(Tensor(x))
        assert np.array_equal(z.data, x.reshape(3, 4))
        assert np.array_equal(logdet.data, np.zeros(3))

    def test_two_diagonal_scalings_logdet_adds(self, rng):
        # diag(2) then diag(3) on d=4: logdet = 4 ln 2 + 4 ln 3
        stack = small_stack(in_shape=(4, 1, 1), levels=1, steps=0, hidden=2)
        stack.plan.append(("layer", ActNorm.from_scale_bias([2.0] * 4, [0.0] * 4)))
        stack.plan.append(("layer", ActNorm.from_scale_bias([3.0] * 4, [0.0] * 4)))
        x = rng.normal(size=(2, 4, 1, 1))
        _, logdet = stack.forward(Tensor(x))
        assert np.allclose(logdet.data, 4 * math.log(2) + 4 * math.log(3))

    def test_roundtrip_small_stack(self, rng):
        stack = small_stack()
        x = rng.normal(size=(4, 2, 4, 4))
        z, _ = stack.forward(Tensor(x))
        rec = stack.inverse(z)
        assert np.abs(rec.data - x).max() < 1e-5

    def test_roundtrip_50_seeds(self):
        stack = small_stack(in_shape=(1, 8, 8), levels=2, steps=4, hidden=4)
        worst = 0.0
        for seed in range(50):
            x = np.random.default_rng(seed).normal(size=(2, 1, 8, 8))
            with ad.no_grad():
                z, _ = stack.forward(Tensor(x))
                rec = stack.inverse(z)
            worst = max(worst, np.abs(rec.data - x).max())
        assert worst < 1e-5

    def test_latent_dimension_preserved(self):
        stack = small_stack(in_shape=(1, 8, 8), levels=3, steps=1, hidden=4)
        assert stack.latent_dim == 64
        assert sum(int(np.prod(s)) for s in stack.latent_shapes) == 64

    def test_logdet_matches_assembled_jacobian(self):
        stack = small_stack(in_shape=(2, 2, 2), levels=2, steps=2, hidden=4, seed=3)
        x0 = np.random.default_rng(9).normal(size=(2, 2, 2))
        assert stack_logdet_vs_numeric(stack, x0) < 1e-4

    def test_antisymmetry_forward_vs_inverse_logdet(self, rng):
        stack = small_stack()
        x = Tensor(rng.normal(size=(3, 2, 4, 4)))
        with ad.no_grad():
            z, ld_fwd = stack.forward(x)
        # walk the plan backwards collecting inverse logdets
        total = np.zeros(3)
        cur = z
        parts = []
        offset = 0
        from flowscale import flows as fl

        for shape in stack.latent_shapes:
            size = int(np.prod(shape))
            seg = ad.slice_view(cur, (slice(None), slice(offset, offset + size)))
            parts.append(ad.reshape(seg, (3,) + shape))
            offset += size
        state = parts.pop()
        with ad.no_grad():
            for kind, payload in reversed(stack.plan):
                if kind == "squeeze":
                    state = fl.squeeze(state, "inverse")
                elif kind == "layer":
                    state, ld = payload.apply(state, "inverse")
                    total += ld.data
                else:
                    state = ad.concat([state, parts.pop()], axis=1)
        assert np.abs(ld_fwd.data + total).max() < 1e-8

    def test_shape_mismatch_rejected(self, rng):
        stack = small_stack()
        with pytest.raises(ad.ShapeError):
            stack.forward(Tensor(rng.normal(size=(1, 2, 3, 3))))

    def test_vector_data_stack(self, rng):
        # 2-D data as (2, 1, 1): no squeeze, no split, couplings still work
        stack = small_stack(in_shape=(2, 1, 1), levels=2, steps=3, hidden=4, init_batch=64)
        x = rng.normal(size=(8, 2, 1, 1))
        with ad.no_grad():
            z, _ = stack.forward(Tensor(x))
            rec = stack.inverse(z)
        assert z.shape == (8, 2)
        assert np.abs(rec.data - x).max() < 1e-6


class TestLogProb:
    def test_gaussian_at_mode_identity_flow(self, prior):
        z = Tensor(np.zeros((1, 16)))
        assert prior.log_prob(z).data[0] == pytest.approx(-8 * math.log(2 * math.pi))

    def test_halving_flow_closed_form(self, prior, rng):
        # f(x) = x/2 toward the latent: log p(0) = -(d/2) ln 2pi - d ln 2,
        # the N(0, 4I) density at the mode
        stack = small_stack(in_shape=(4, 1, 1), levels=1, steps=0, hidden=2)
        layer = ActNorm.from_scale_bias([0.5] * 4, [0.0] * 4)
        stack.plan.append(("layer", layer))
        lp = flow_log_prob(stack, prior, Tensor(np.zeros((1, 4, 1, 1)))).data[0]
        assert lp == pytest.approx(-2 * math.log(2 * math.pi) - 4 * math.log(2), rel=1e-12)

    def test_random_2d_flow_density_integrates_to_one(self, prior):
        stack = small_stack(in_shape=(2, 1, 1), levels=2, steps=2, hidden=4, init_batch=128, seed=5)
        grid = np.linspace(-6.0, 6.0, 101)
        xx, yy = np.meshgrid(grid, grid)
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        dens = np.empty(len(pts))
        with ad.no_grad():
            for i in range(0, len(pts), 4096):
                chunk = pts[i : i + 4096].reshape(-1, 2, 1, 1)
                dens[i : i + len(chunk)] = np.exp(flow_log_prob(stack, prior, Tensor(chunk)).data)
        integral = np.trapezoid(np.trapezoid(dens.reshape(101, 101), grid, axis=1), grid)
        assert integral == pytest.approx(1.0, abs=0.02)

    def test_nll_gradient_passes_fd(self, prior):
        from conftest import param_fd_check

        stack = small_stack(in_shape=(2, 4, 4), levels=2, steps=1, hidden=3, seed=7)
        x = Tensor(np.random.default_rng(8).normal(size=(2, 2, 4, 4)))

        def loss():
            return ad.neg(ad.reduce_mean(flow_log_prob(stack, prior, x)))

        err = param_fd_check(
            loss, stack.store.tensors(), 1e-5, max_coords=6, rng=np.random.default_rng(0)
        )
        assert err < 1e-3

    def test_mle_training_reduces_loss(self, prior):
        # smoothed over 50 steps, the NLL on a fixed 2-D mixture decreases
        data_rng = np.random.default_rng(0)
        comp = data_rng.integers(0, 2, 512)
        data = np.array([[-1.5, 0.0], [1.5, 0.0]])[comp] + 0.5 * data_rng.standard_normal((512, 2))
        stack = small_stack(in_shape=(2, 1, 1), levels=2, steps=2, hidden=8, init_batch=64, seed=2)
        losses = []
        for step in range(150):
            idx = np.random.default_rng([3, step]).choice(512, 64, replace=False)
            batch = Tensor(data[idx].reshape(-1, 2, 1, 1))
            loss = ad.neg(ad.reduce_mean(flow_log_prob(stack, prior, batch)))
            stack.store.zero_grads()
            ad.backward(loss)
            adam_step(stack.store, stack.store.gather_grads(), lr=1e-3)
            losses.append(loss.item())
        first = np.mean(losses[:50])
        last = np.mean(losses[-50:])
        assert last < first
