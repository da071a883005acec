"""Layer kernel tests: shape laws, a direct-loop convolution oracle,
finite-difference gradients, and normalization semantics."""

import numpy as np
import pytest
from hypothesis import given, settings, assume, strategies as st

from volcnn import gradcheck, ops
from volcnn.tensor import Rng, Tensor, ShapeError


def naive_conv3d(x, w, b, spec):
    """Direct six-loop cross-correlation. Oracle for the tap-loop kernel."""
    n, c, dd, hh, ww = x.shape
    o = w.shape[0]
    k, p, s, d = spec.k, spec.p, spec.s, spec.d
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    outs = tuple(ops.conv_out_extent(e, k, p, s, d) for e in (dd, hh, ww))
    out = np.zeros((n, o) + outs, dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for zi in range(outs[0]):
                for yi in range(outs[1]):
                    for xi in range(outs[2]):
                        acc = b[oi]
                        for ci in range(c):
                            for i in range(k):
                                for j in range(k):
                                    for l in range(k):
                                        acc += (
                                            xp[ni, ci,
                                               zi * s + i * d,
                                               yi * s + j * d,
                                               xi * s + l * d]
                                            * w[oi, ci, i, j, l]
                                        )
                        out[ni, oi, zi, yi, xi] = acc
    return out


class TestShapeLaws:
    def test_dilated_k3_extent(self):
        assert ops.conv_out_extent(47, 3, 0, 1, 2) == 43

    def test_dilated_k5_p2_extent(self):
        assert ops.conv_out_extent(21, 5, 2, 1, 2) == 17

    def test_pool_k3_s2_extents(self):
        assert ops.pool_out_extent(96, 3, 2) == 47
        assert ops.pool_out_extent(43, 3, 2) == 21

    def test_forward_matches_extent_law_at_full_size(self):
        x = Tensor(np.zeros((1, 1, 47, 47, 47), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 3, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = ops.conv3d_forward(x, w, b, ops.ConvSpec(k=3, c_out=1, d=2))
        assert out.shape == (1, 1, 43, 43, 43)

    def test_pool_forward_full_size(self):
        x = Tensor(np.arange(96 ** 3, dtype=np.float32).reshape(1, 1, 96, 96, 96))
        out, _ = ops.maxpool3d_forward(x, 3, 2)
        assert out.shape == (1, 1, 47, 47, 47)

    @given(
        e=st.integers(1, 12), k=st.integers(1, 5), p=st.integers(0, 3),
        s=st.integers(1, 3), d=st.integers(1, 3),
    )
    @settings(max_examples=60, deadline=None)
    def test_conv_extent_law_matches_kernel(self, e, k, p, s, d):
        eff = d * (k - 1) + 1
        assume(eff <= e + 2 * p)
        spec = ops.ConvSpec(k=k, c_out=1, p=p, s=s, d=d)
        x = Tensor(np.ones((1, 1, e, e, e), dtype=np.float32))
        w = Tensor(np.ones((1, 1, k, k, k), dtype=np.float32))
        out = ops.conv3d_forward(x, w, Tensor(np.zeros(1, dtype=np.float32)), spec)
        expect = ops.conv_out_extent(e, k, p, s, d)
        assert out.shape == (1, 1, expect, expect, expect)

    @given(e=st.integers(1, 12), k=st.integers(1, 5), s=st.integers(1, 3))
    @settings(max_examples=40, deadline=None)
    def test_pool_extent_law_matches_kernel(self, e, k, s):
        assume(k <= e)
        x = Tensor(np.ones((1, 1, e, e, e), dtype=np.float32))
        out, _ = ops.maxpool3d_forward(x, k, s)
        expect = ops.pool_out_extent(e, k, s)
        assert out.shape == (1, 1, expect, expect, expect)


class TestConv:
    @pytest.mark.parametrize("n,c,e,spec", [
        (2, 2, 6, ops.ConvSpec(k=3, c_out=3, p=1, s=2)),
        (1, 2, 7, ops.ConvSpec(k=3, c_out=2, p=2, s=2, d=2)),
        (2, 1, 5, ops.ConvSpec(k=1, c_out=2)),
    ])
    def test_matches_direct_loop(self, n, c, e, spec):
        rng = Rng(42).stream("conv-oracle", spec.k, spec.p, spec.s, spec.d)
        x = rng.stream("x").normal((n, c, e, e, e))
        w = rng.stream("w").normal((spec.c_out, c, spec.k, spec.k, spec.k))
        b = rng.stream("b").normal((spec.c_out,))
        got = ops.conv3d_forward(Tensor(x), Tensor(w), Tensor(b), spec)
        want = naive_conv3d(x, w, b, spec)
        np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 2, 5, 5, 5), dtype=np.float32))
        w = Tensor(np.zeros((4, 3, 3, 3, 3), dtype=np.float32))
        with pytest.raises(ShapeError):
            ops.conv3d_forward(x, w, Tensor(np.zeros(4, dtype=np.float32)),
                               ops.ConvSpec(k=3, c_out=4))

    def test_kernel_exceeding_padded_input_rejected(self):
        x = Tensor(np.zeros((1, 1, 3, 3, 3), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 3, 3, 3), dtype=np.float32))
        with pytest.raises(ShapeError, match="effective kernel"):
            ops.conv3d_forward(x, w, Tensor(np.zeros(1, dtype=np.float32)),
                               ops.ConvSpec(k=3, c_out=1, d=2))

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            ops.ConvSpec(k=0, c_out=1)
        with pytest.raises(ValueError):
            ops.ConvSpec(k=3, c_out=1, s=0)
        with pytest.raises(ValueError):
            ops.ConvSpec(k=3, c_out=1, p=-1)

    def test_gradients(self):
        for res in gradcheck.check_conv():
            assert res.passed, f"{res.name}: rel err {res.rel_err:.3e}"


class TestMaxPool:
    def test_values_and_indices(self):
        x = np.zeros((1, 1, 4, 4, 4), dtype=np.float32)
        x[0, 0, 1, 2, 2] = 5.0   # inside the first 3x3x3 window
        x[0, 0, 3, 3, 3] = 7.0   # outside it
        out, idx = ops.maxpool3d_forward(Tensor(x), 3, 1)
        assert out.shape == (1, 1, 2, 2, 2)
        assert out.data[0, 0, 0, 0, 0] == 5.0
        assert idx[0, 0, 0, 0, 0] == (1 * 4 + 2) * 4 + 2
        assert out.data[0, 0, 1, 1, 1] == 7.0
        assert idx[0, 0, 1, 1, 1] == (3 * 4 + 3) * 4 + 3

    def test_tie_goes_to_first_in_window_order(self):
        x = Tensor(np.ones((1, 1, 3, 3, 3), dtype=np.float32))
        out, idx = ops.maxpool3d_forward(x, 3, 1)
        assert out.data[0, 0, 0, 0, 0] == 1.0
        assert idx[0, 0, 0, 0, 0] == 0

    def test_window_larger_than_input_rejected(self):
        x = Tensor(np.ones((1, 1, 2, 2, 2), dtype=np.float32))
        with pytest.raises(ShapeError, match="window"):
            ops.maxpool3d_forward(x, 3, 2)

    def test_backward_conserves_gradient_mass(self):
        rng = Rng(3).stream("pool-mass")
        x = Tensor(rng.permutation(2 * 216).astype(np.float64).reshape(2, 1, 6, 6, 6))
        out, idx = ops.maxpool3d_forward(x, 2, 2)  # disjoint windows
        g = Tensor(rng.stream("g").normal(out.shape))
        gx = ops.maxpool3d_backward(g, idx, x.shape)
        assert gx.shape == x.shape
        np.testing.assert_allclose(gx.data.sum(), g.data.sum(), rtol=1e-12)

    def test_backward_accumulates_on_overlap(self):
        x = Tensor(np.zeros((1, 1, 3, 3, 3), dtype=np.float64))
        x.data[0, 0, 1, 1, 1] = 1.0  # shared max of all four stride-1 windows
        out, idx = ops.maxpool3d_forward(x, 2, 1)
        g = Tensor(np.ones(out.shape, dtype=np.float64))
        gx = ops.maxpool3d_backward(g, idx, x.shape)
        assert gx.data[0, 0, 1, 1, 1] == 8.0
        assert gx.data.sum() == 8.0

    def test_gradients(self):
        for res in gradcheck.check_pool():
            assert res.passed, f"{res.name}: rel err {res.rel_err:.3e}"


class TestNorms:
    def test_instance_norm_statistics(self):
        rng = Rng(9).stream("in-stats")
        x = Tensor(rng.normal((2, 3, 5, 5, 5)) * 4.0 + 2.0)
        ones = Tensor(np.ones(3))
        zeros = Tensor(np.zeros(3))
        y, _ = ops.instance_norm_forward(x, ones, zeros)
        m = y.data.mean(axis=(2, 3, 4))
        v = y.data.var(axis=(2, 3, 4))
        np.testing.assert_allclose(m, 0.0, atol=1e-12)
        np.testing.assert_allclose(v, 1.0, atol=1e-4)

    @given(a=st.floats(0.5, 4.0), b=st.floats(-3.0, 3.0), seed=st.integers(0, 500))
    @settings(max_examples=40, deadline=None)
    def test_instance_norm_shift_scale_invariance(self, a, b, seed):
        x = Rng(seed).stream("in-inv").normal((1, 2, 4, 4, 4))
        ones = Tensor(np.ones(2))
        zeros = Tensor(np.zeros(2))
        y0, _ = ops.instance_norm_forward(Tensor(x), ones, zeros)
        y1, _ = ops.instance_norm_forward(Tensor(a * x + b), ones, zeros)
        np.testing.assert_allclose(y1.data, y0.data, atol=1e-4)

    def test_instance_norm_independent_of_batch_composition(self):
        rng = Rng(4).stream("in-batch")
        x = rng.normal((3, 2, 4, 4, 4))
        ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
        y_all, _ = ops.instance_norm_forward(Tensor(x), ones, zeros)
        y_one, _ = ops.instance_norm_forward(Tensor(x[:1]), ones, zeros)
        np.testing.assert_allclose(y_all.data[:1], y_one.data, atol=1e-12)

    def test_batch_norm_depends_on_batch_composition(self):
        rng = Rng(4).stream("bn-batch")
        x = rng.normal((3, 2, 4, 4, 4))
        ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
        rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
        y_all, _, _, _ = ops.batch_norm_forward(Tensor(x), ones, zeros, rm, rv, "train")
        y_sub, _, _, _ = ops.batch_norm_forward(Tensor(x[:2]), ones, zeros, rm, rv, "train")
        assert not np.allclose(y_all.data[:2], y_sub.data, atol=1e-6)

    def test_batch_norm_running_stat_update(self):
        rng = Rng(5).stream("bn-run")
        x = rng.normal((4, 2, 3, 3, 3)) + 1.5
        ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
        rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
        _, _, nm, nv = ops.batch_norm_forward(Tensor(x), ones, zeros, rm, rv,
                                              "train", momentum=0.1)
        m = x.size // 2
        mean = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4)) * m / (m - 1)
        np.testing.assert_allclose(nm.data, 0.1 * mean, rtol=1e-12)
        np.testing.assert_allclose(nv.data, 0.9 + 0.1 * var, rtol=1e-12)
        # eval mode leaves the stats alone
        _, _, em, ev = ops.batch_norm_forward(Tensor(x), ones, zeros, nm, nv, "eval")
        assert em is nm and ev is nv

    def test_batch_norm_train_vs_eval_differ(self):
        rng = Rng(6).stream("bn-mode")
        x = Tensor(rng.normal((3, 2, 4, 4, 4)) + 2.0)
        ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
        rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
        y_tr, _, _, _ = ops.batch_norm_forward(x, ones, zeros, rm, rv, "train")
        y_ev, _, _, _ = ops.batch_norm_forward(x, ones, zeros, rm, rv, "eval")
        assert not np.allclose(y_tr.data, y_ev.data, atol=1e-3)

    def test_batch_norm_needs_two_samples(self):
        x = Tensor(np.ones((1, 2, 3, 3, 3), dtype=np.float32))
        ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
        with pytest.raises(ValueError, match="batch of >= 2"):
            ops.batch_norm_forward(x, ones, zeros, zeros.copy(), ones.copy(), "train")

    def test_layer_norm_rows(self):
        rng = Rng(7).stream("ln")
        x = Tensor(rng.normal((4, 8)) * 3.0 - 1.0)
        y, _ = ops.layer_norm_forward(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_allclose(y.data.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.data.var(axis=1), 1.0, atol=1e-4)

    def test_backward_rejects_mismatched_grad(self):
        x = Tensor(np.ones((2, 2, 3, 3, 3), dtype=np.float32))
        ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
        _, cache = ops.instance_norm_forward(x, ones, zeros)
        bad = Tensor(np.ones((2, 2, 3, 3, 2), dtype=np.float32))
        with pytest.raises(ShapeError, match="saved forward state"):
            ops.norm_backward(bad, cache)

    def test_gradients(self):
        for res in gradcheck.check_norm():
            assert res.passed, f"{res.name}: rel err {res.rel_err:.3e}"


class TestReluLinear:
    def test_relu_zero_subgradient(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]))
        g = ops.relu_backward(Tensor(np.ones(3)), x)
        np.testing.assert_array_equal(g.data, [0.0, 0.0, 1.0])

    def test_linear_known_values(self):
        x = Tensor(np.array([[1.0, 2.0]]))
        w = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]))
        b = Tensor(np.array([0.5, -0.5]))
        y = ops.linear_forward(x, w, b)
        np.testing.assert_allclose(y.data, [[11.5, 16.5]])

    def test_linear_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ops.linear_forward(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))),
                               Tensor(np.ones(4)))

    def test_gradients(self):
        for res in gradcheck.check_relu() + gradcheck.check_linear():
            assert res.passed, f"{res.name}: rel err {res.rel_err:.3e}"


class TestSoftmaxXent:
    def test_uniform_scores(self):
        loss, _, probs = ops.softmax_xent(Tensor(np.ones((1, 3))), [0])
        np.testing.assert_allclose(probs.data, [[1 / 3, 1 / 3, 1 / 3]])
        assert loss == pytest.approx(np.log(3.0))

    def test_rows_sum_to_one_and_grad_rows_to_zero(self):
        rng = Rng(12).stream("sm")
        scores = Tensor(rng.normal((6, 3)) * 3.0)
        labels = rng.stream("y").integers(3, (6,))
        _, grad, probs = ops.softmax_xent(scores, labels)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, rtol=1e-12)
        np.testing.assert_allclose(grad.data.sum(axis=1), 0.0, atol=1e-12)

    def test_stable_under_large_scores(self):
        scores = Tensor(np.array([[1e4, -1e4, 0.0]]))
        loss, grad, probs = ops.softmax_xent(scores, [2])
        assert np.isfinite(loss)
        assert np.isfinite(grad.data).all()
        assert probs.data[0, 0] == pytest.approx(1.0)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label out of range"):
            ops.softmax_xent(Tensor(np.ones((2, 3))), [0, 3])

    def test_gradients(self):
        for res in gradcheck.check_softmax():
            assert res.passed, f"{res.name}: rel err {res.rel_err:.3e}"


class TestAgeEncode:
    def test_first_pair_is_sin_cos_of_age(self):
        v = ops.age_encode(76.5, d_model=8)
        assert v.data[0] == pytest.approx(np.sin(76.5), rel=1e-6)
        assert v.data[1] == pytest.approx(np.cos(76.5), rel=1e-6)

    def test_pairs_have_unit_norm(self):
        v = ops.age_encode(63.0, d_model=128)
        sq = v.data[0::2] ** 2 + v.data[1::2] ** 2
        np.testing.assert_allclose(sq, 1.0, rtol=1e-5)

    def test_frequency_ladder(self):
        d = 16
        v = ops.age_encode(80.0, d_model=d)
        for i in range(d // 2):
            angle = 80.0 / 10000.0 ** (2.0 * i / d)
            assert v.data[2 * i] == pytest.approx(np.sin(angle), abs=1e-6)
            assert v.data[2 * i + 1] == pytest.approx(np.cos(angle), abs=1e-6)

    @pytest.mark.parametrize("raw,rounded", [
        (76.2, 76.0), (76.24, 76.0), (76.26, 76.5), (76.3, 76.5),
        (76.25, 76.5), (76.75, 77.0), (0.0, 0.0), (120.0, 120.0),
    ])
    def test_rounding_to_half_years(self, raw, rounded):
        assert ops.round_age(raw) == rounded
        v = ops.age_encode(raw, d_model=4)
        w = ops.age_encode(rounded, d_model=4)
        np.testing.assert_array_equal(v.data, w.data)

    def test_age_out_of_range(self):
        with pytest.raises(ValueError):
            ops.age_encode(-0.5)
        with pytest.raises(ValueError):
            ops.age_encode(120.5)

    def test_odd_d_model_rejected(self):
        with pytest.raises(ValueError):
            ops.age_encode(70.0, d_model=7)
