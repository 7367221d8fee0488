"""Analytic gradients of every differentiable op vs central differences."""

import numpy as np
import pytest

from vosmem import autodiff as ad
from vosmem.tensor import ContractError

import oracles

TOL = 1e-5
N_CASES = 20


def check_grad(build, x, seed_note=""):
    """Compare d(sum of build(x))/dx against finite differences."""
    with ad.Tape():
        xv = ad.parameter(x)
        loss = ad.sum_all(build(xv))
        ad.backward(loss)
    analytic = xv.grad_or_zeros()

    def f(arr):
        return ad.sum_all(build(ad.as_var(arr))).item()

    fd = ad.finite_diff_grad(f, x)
    err = oracles.rel_err(analytic, fd)
    assert err < TOL, f"rel err {err:.2e} {seed_note}"


class TestBackwardBasics:
    def test_grad_of_sum_is_ones(self):
        x = np.arange(6.0).reshape(2, 3)
        with ad.Tape():
            xv = ad.parameter(x)
            loss = ad.sum_all(xv)
            ad.backward(loss)
        np.testing.assert_array_equal(xv.grad, np.ones((2, 3)))
        assert loss.grad.item() == 1.0

    def test_quadratic(self):
        x = np.array([1.0, -2.0, 3.0])
        with ad.Tape():
            xv = ad.parameter(x)
            loss = ad.scale(ad.sum_all(ad.mul(xv, xv)), 0.5)
            ad.backward(loss)
        np.testing.assert_allclose(xv.grad, x, atol=1e-15)

    def test_fanout_accumulates(self):
        x = np.array([2.0])
        with ad.Tape():
            xv = ad.parameter(x)
            loss = ad.sum_all(ad.add(xv, xv))
            ad.backward(loss)
        np.testing.assert_array_equal(xv.grad, [2.0])

    def test_non_scalar_loss_rejected(self):
        with ad.Tape():
            xv = ad.parameter(np.zeros(3))
            y = ad.relu(xv)
        with pytest.raises(ContractError):
            ad.backward(y)

    def test_no_tape_builds_no_graph(self):
        xv = ad.parameter(np.zeros(3))
        y = ad.relu(xv)
        assert y.tape is None and not y.requires_grad

    def test_nested_tape_rejected(self):
        with ad.Tape():
            with pytest.raises(ContractError):
                with ad.Tape():
                    pass

    def test_detach_blocks_gradient(self):
        x = np.array([1.0, 2.0])
        with ad.Tape():
            xv = ad.parameter(x)
            loss = ad.sum_all(ad.mul(ad.detach(xv), xv))
            ad.backward(loss)
        np.testing.assert_array_equal(xv.grad, x)  # only the live branch


class TestFiniteDifferenceOracle:
    def test_sum_gives_ones(self):
        g = ad.finite_diff_grad(lambda a: float(a.sum()), np.zeros((2, 2)))
        np.testing.assert_allclose(g, np.ones((2, 2)), atol=1e-9)

    def test_half_norm_gives_x(self):
        x = np.array([0.5, -1.5, 2.0])
        g = ad.finite_diff_grad(lambda a: float((a * a).sum() / 2), x)
        np.testing.assert_allclose(g, x, atol=1e-9)


@pytest.mark.parametrize("seed", range(N_CASES))
class TestOpGradients:
    """Each differentiable op over seeded random inputs in [-2, 2]."""

    def test_add_sub_mul_neg(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.uniform(-2, 2, (3, 4))
        other = rng.uniform(-2, 2, (3, 4))
        check_grad(lambda t: ad.mul(ad.add(t, other), ad.sub(t, ad.neg(t))), x)

    def test_relu(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = rng.uniform(-2, 2, (4, 4))
        x[np.abs(x) < 1e-3] += 0.01  # keep fd away from the kink
        check_grad(ad.relu, x)

    def test_log(self, seed):
        rng = np.random.default_rng(300 + seed)
        x = rng.uniform(0.1, 2, (3, 3))
        check_grad(ad.log, x)

    def test_matmul(self, seed):
        rng = np.random.default_rng(400 + seed)
        x = rng.uniform(-2, 2, (3, 4))
        b = rng.uniform(-2, 2, (4, 2))
        check_grad(lambda t: ad.matmul(t, b), x)
        check_grad(lambda t: ad.matmul(b.T, ad.transpose(t)), x.copy())

    def test_softmax(self, seed):
        rng = np.random.default_rng(500 + seed)
        x = rng.uniform(-2, 2, (3, 5))
        w = rng.uniform(-1, 1, (3, 5))
        check_grad(lambda t: ad.mul(ad.softmax(t, 1), w), x)

    def test_log_softmax(self, seed):
        rng = np.random.default_rng(600 + seed)
        x = rng.uniform(-2, 2, (4, 3))
        w = rng.uniform(-1, 1, (4, 3))
        check_grad(lambda t: ad.mul(ad.log_softmax(t, 0), w), x)

    def test_kl_both_sides(self, seed):
        rng = np.random.default_rng(700 + seed)
        x = rng.uniform(-2, 2, 5)
        q = ad.softmax(rng.uniform(-2, 2, 5), 0).value
        check_grad(lambda t: ad.kl_divergence(ad.softmax(t, 0), q, 0), x)
        p = ad.softmax(rng.uniform(-2, 2, 5), 0).value
        check_grad(lambda t: ad.kl_divergence(p, ad.softmax(t, 0), 0), x.copy())

    def test_conv_wrt_input_and_weight(self, seed):
        rng = np.random.default_rng(800 + seed)
        x = rng.uniform(-2, 2, (2, 2, 4, 4))
        w = rng.uniform(-2, 2, (2, 2, 2, 3, 3))
        check_grad(lambda t: ad.conv(t, w), x)
        check_grad(lambda t: ad.conv(ad.as_var(x), t), w)

    def test_conv_strided_dilated(self, seed):
        rng = np.random.default_rng(900 + seed)
        x = rng.uniform(-2, 2, (2, 6, 6))
        w = rng.uniform(-2, 2, (3, 2, 3, 3))
        check_grad(lambda t: ad.conv(t, w, stride=2), x)
        check_grad(lambda t: ad.conv(t, w, dilation=2), x.copy())

    def test_maxpool(self, seed):
        rng = np.random.default_rng(1000 + seed)
        x = rng.uniform(-2, 2, (2, 1, 4, 4))
        check_grad(lambda t: ad.maxpool2d(t, 2, 2), x)

    def test_concat_slice_reshape(self, seed):
        rng = np.random.default_rng(1100 + seed)
        x = rng.uniform(-2, 2, (2, 3))
        other = rng.uniform(-2, 2, (2, 3))

        def build(t):
            cat = ad.concat(t, other, axis=0)
            part = ad.slice_axis(cat, 0, 1, 4)
            return ad.mul(ad.reshape(part, (9,)), ad.reshape(part, (9,)))

        check_grad(build, x)

    def test_upsample(self, seed):
        rng = np.random.default_rng(1200 + seed)
        x = rng.uniform(-2, 2, (1, 2, 2))
        w = rng.uniform(-1, 1, (1, 4, 4))
        check_grad(lambda t: ad.mul(ad.upsample_nearest(t, 2), w), x)

    def test_where_mask(self, seed):
        rng = np.random.default_rng(1300 + seed)
        x = rng.uniform(-2, 2, (3, 4))
        mask = rng.uniform(size=(3, 4)) > 0.4
        mask[0, 0] = True
        check_grad(lambda t: ad.where_mask(t, mask, 0.0), x)

    def test_composite_pipeline(self, seed):
        """kl(softmax(conv/pool features)) vs fixed target: the op kit
        composed the way the engine composes it."""
        rng = np.random.default_rng(1400 + seed)
        x = rng.uniform(-2, 2, (2, 4, 4))
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        q = ad.softmax(rng.uniform(-1, 1, (3, 4)), 0).value

        def build(t):
            feat = ad.relu(ad.conv(t, w))
            pooled = ad.maxpool2d(feat, 2, 2)
            flat = ad.reshape(pooled, (3, 4))
            return ad.kl_divergence(ad.softmax(flat, 0), q, 0)

        check_grad(build, x)


class TestConcatGradientLinearity:
    def test_grad_of_sum_concat_is_ones(self):
        a = np.zeros((2, 1, 2, 2))
        b = np.zeros((2, 1, 2, 2))
        with ad.Tape():
            av = ad.parameter(a)
            loss = ad.sum_all(ad.concat(av, ad.as_var(b), axis=1))
            ad.backward(loss)
        np.testing.assert_array_equal(av.grad, np.ones_like(a))

    def test_add_gradient_is_ones(self):
        a = np.zeros((3,))
        with ad.Tape():
            av = ad.parameter(a)
            loss = ad.sum_all(ad.add(av, ad.as_var(np.ones(3))))
            ad.backward(loss)
        np.testing.assert_array_equal(av.grad, np.ones(3))
