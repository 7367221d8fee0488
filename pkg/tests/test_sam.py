"""Aggregation module vs naive attention / conv oracles, plus gradients."""

import numpy as np
import pytest

from vosmem import autodiff as ad
from vosmem.sam import SamParams, enhance, extract, sam_forward, squeeze
from vosmem.tensor import ContractError

import oracles


def identity_1x1(c):
    return np.eye(c).reshape(c, c, 1, 1, 1)


def make_params(seed=13, channels=3):
    return SamParams.create(seed=seed, channels=channels)


def rand_pair(seed, c=3, h=4, w=4, lo=-2, hi=2):
    rng = np.random.default_rng(seed)
    return (rng.uniform(lo, hi, (c, 1, h, w)),
            rng.uniform(lo, hi, (c, 1, h, w)))


class TestExtract:
    def test_output_shape(self):
        prev, latest = rand_pair(0)
        out = extract(prev, latest, make_params(), pool=2)
        assert out.shape == (3, 2, 4, 4)

    def test_constant_field_closed_form(self):
        """Identity projections on a constant field c give C*c^3 everywhere:
        the 1/N normalization cancels the position count."""
        c_val, channels = 0.7, 4
        params = make_params(channels=channels)
        params.w_omega = ad.as_var(identity_1x1(channels))
        params.w_phi = ad.as_var(identity_1x1(channels))
        params.w_g = ad.as_var(identity_1x1(channels))
        prev = np.full((channels, 1, 4, 4), c_val)
        out = extract(prev, prev.copy(), params, pool=2)
        expected = channels * c_val ** 3
        np.testing.assert_allclose(out.value, expected, atol=1e-12)

    def test_pool_one_matches_naive_attention(self):
        for seed in range(5):
            prev, latest = rand_pair(seed, c=3, h=6, w=6)
            params = make_params(seed=20 + seed)
            got = extract(prev, latest, params, pool=1).value

            x = np.concatenate([prev, latest], axis=1)
            om = np.einsum("oc,cthw->othw", params.w_omega.value[:, :, 0, 0, 0], x)
            ph = np.einsum("oc,cthw->othw", params.w_phi.value[:, :, 0, 0, 0], x)
            g = np.einsum("oc,cthw->othw", params.w_g.value[:, :, 0, 0, 0], x)
            want = oracles.attention_loops(om.reshape(3, -1), ph.reshape(3, -1),
                                           g.reshape(3, -1)).reshape(3, 2, 6, 6)
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_pooled_vs_manual_composition(self):
        prev, latest = rand_pair(42)
        params = make_params(seed=7)
        got = extract(prev, latest, params, pool=2).value

        x = np.concatenate([prev, latest], axis=1)
        xd = ad.maxpool2d(x, 2, 2).value
        om = np.einsum("oc,cthw->othw", params.w_omega.value[:, :, 0, 0, 0], x)
        ph = np.einsum("oc,cthw->othw", params.w_phi.value[:, :, 0, 0, 0], xd)
        g = np.einsum("oc,cthw->othw", params.w_g.value[:, :, 0, 0, 0], xd)
        want = oracles.attention_loops(om.reshape(3, -1), ph.reshape(3, -1),
                                       g.reshape(3, -1)).reshape(3, 2, 4, 4)
        np.testing.assert_allclose(got, want, atol=1e-10)


class TestEnhance:
    def test_zeroed_pyramid_is_identity(self):
        params = make_params()
        for w in params.aspp:
            w.value[:] = 0.0
        params.aspp_merge.value[:] = 0.0
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 2, 4, 4))
        assert (enhance(x, params).value == x).all()

    def test_shape_preserved(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 2, 5, 5))
        assert enhance(x, make_params()).shape == (3, 2, 5, 5)

    def test_matches_conv_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-2, 2, (2, 2, 4, 4))
        params = make_params(seed=5, channels=2)
        got = enhance(x, params).value
        branches = [oracles.conv_loops(x, w.value, dilation=r)
                    for r, w in zip(params.rates, params.aspp)]
        merged = oracles.conv_loops(np.concatenate(branches, axis=0),
                                    params.aspp_merge.value)
        np.testing.assert_allclose(got, x + merged, atol=1e-12)


class TestSqueeze:
    def test_shape_law(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 2, 4, 4))
        assert squeeze(x, make_params()).shape == (3, 1, 4, 4)

    def test_wrong_time_dim_rejected(self):
        with pytest.raises(ContractError):
            squeeze(np.zeros((3, 1, 4, 4)), make_params())

    def test_averaging_kernel_on_equal_slices(self):
        rng = np.random.default_rng(5)
        c = 2
        spatial = rng.normal(size=(c, c, 1, 3, 3))
        params = make_params(channels=c)
        params.w_squeeze = ad.as_var(
            np.concatenate([0.5 * spatial, 0.5 * spatial], axis=2))
        slice0 = rng.normal(size=(c, 1, 4, 4))
        x = np.concatenate([slice0, slice0], axis=1)
        got = squeeze(x, params).value
        want = ad.conv(slice0, spatial).value
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_matches_conv_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-2, 2, (2, 2, 4, 4))
        params = make_params(seed=9, channels=2)
        np.testing.assert_allclose(squeeze(x, params).value,
                                   oracles.conv_loops(x, params.w_squeeze.value),
                                   atol=1e-12)


class TestSamForward:
    def test_output_shape_matches_input(self):
        prev, latest = rand_pair(7)
        assert sam_forward(prev, latest, make_params(), pool=2).shape == prev.shape

    def test_deterministic(self):
        prev, latest = rand_pair(8)
        params = make_params(seed=3)
        a = sam_forward(prev, latest, params, pool=2).value
        b = sam_forward(prev, latest, params, pool=2).value
        assert (a == b).all()

    def test_no_nan_inf_on_bounded_inputs(self):
        prev, latest = rand_pair(9, lo=-10, hi=10)
        out = sam_forward(prev, latest, make_params(), pool=2).value
        assert np.isfinite(out).all()

    @pytest.mark.parametrize("wrt", ["prev", "latest"])
    def test_gradient_wrt_inputs(self, wrt):
        prev, latest = rand_pair(10)
        params = make_params(seed=11)
        rng = np.random.default_rng(12)
        probe = rng.normal(size=(3, 1, 4, 4))

        def run(p, l):
            out = sam_forward(p, l, params, pool=2)
            return ad.sum_all(ad.mul(out, ad.as_var(probe)))

        with ad.Tape():
            pv, lv = ad.parameter(prev), ad.parameter(latest)
            ad.backward(run(pv, lv))
        target, analytic = ((prev, pv.grad) if wrt == "prev"
                            else (latest, lv.grad))

        def f(arr):
            if wrt == "prev":
                return run(ad.as_var(arr), ad.as_var(latest)).item()
            return run(ad.as_var(prev), ad.as_var(arr)).item()

        fd = ad.finite_diff_grad(f, target)
        assert oracles.rel_err(analytic, fd) < 1e-5

    def test_gradient_wrt_all_parameter_groups(self):
        prev, latest = rand_pair(13, c=2)
        params = make_params(seed=14, channels=2)
        rng = np.random.default_rng(15)
        probe = rng.normal(size=(2, 1, 4, 4))

        def loss_val():
            out = sam_forward(prev, latest, params, pool=2)
            return ad.sum_all(ad.mul(out, ad.as_var(probe)))

        with ad.Tape():
            ad.backward(loss_val())
        for name, w in params.tensors().items():
            analytic = w.grad_or_zeros()

            def f(arr, w=w):
                saved = w.value
                w.value = arr
                try:
                    return loss_val().item()
                finally:
                    w.value = saved

            fd = ad.finite_diff_grad(f, w.value)
            err = oracles.rel_err(analytic, fd)
            assert err < 1e-5, f"{name}: rel err {err:.2e}"

    def test_serialization_round_trip(self, tmp_path):
        params = make_params(seed=16)
        p = tmp_path / "sam.npz"
        params.save(p)
        back = SamParams.load(p, rates=params.rates)
        prev, latest = rand_pair(17)
        a = sam_forward(prev, latest, params, pool=2).value
        b = sam_forward(prev, latest, back, pool=2).value
        assert (a == b).all()
