import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acam import diffcore as dc
from acam.contrast import (
    ContrastParams,
    GrayImage,
    RangeSpec,
    acam_forward,
    apply_contrast,
    generate_views,
    image_mean,
    init_predictor,
    map_to_range,
    multiview_stack,
    predict_raw,
    zero_predictor,
)
from acam.diffcore import Tensor, finite_diff_check

from conftest import t64


def loop_mean(px):
    total = 0.0
    for row in px:
        for v in row:
            total += float(v)
    return total / px.size


def loop_contrast(px, alpha):
    mu = loop_mean(px)
    return np.array([[alpha * (float(v) - mu) + mu for v in row] for row in px])


def test_gray_image_validation():
    with pytest.raises(ValueError):
        GrayImage(np.full((8, 8), 1.5))
    with pytest.raises(ValueError):
        GrayImage(np.zeros((4, 8)))
    assert GrayImage(np.zeros((8, 9)), id="a").width == 9


class TestImageMean:
    def test_constant(self):
        assert image_mean(GrayImage(np.full((8, 8), 0.7))) == pytest.approx(0.7, abs=1e-7)

    def test_half(self):
        assert image_mean(np.array([[0.0, 0.0], [1.0, 1.0]])) == 0.5

    def test_against_loop(self, rng):
        px = rng.random((16, 16))
        assert abs(image_mean(GrayImage(px)) - loop_mean(px)) < 1e-12


class TestApplyContrast:
    def test_identity_gain(self, rng):
        px = rng.random((12, 10))
        assert np.array_equal(apply_contrast(GrayImage(px), 1.0).data, px)

    def test_direct_value(self):
        px = np.tile([[0.4, 0.6], [0.6, 0.4]], (4, 4))
        out = apply_contrast(GrayImage(px), 2.0).data
        assert out[0, 0] == pytest.approx(0.3, abs=1e-15)
        assert out[0, 1] == pytest.approx(0.7, abs=1e-15)

    def test_constant_image_unchanged(self):
        px = np.full((8, 8), 0.35)
        for a in (0.2, 1.7, 3.0):
            np.testing.assert_allclose(apply_contrast(GrayImage(px), a).data, px, atol=1e-15)

    def test_not_clamped(self):
        px = np.tile([[0.0, 1.0]], (8, 4))
        out = apply_contrast(GrayImage(px), 3.0).data
        assert out.min() < 0 and out.max() > 1

    @pytest.mark.parametrize("alpha", [0.0, -1.0])
    def test_domain_error(self, alpha):
        with pytest.raises(ValueError):
            apply_contrast(GrayImage(np.zeros((8, 8))), alpha)

    def test_gain_derivative(self, rng):
        px = rng.random((8, 8))
        mu = px.mean()
        a = Tensor(np.array([1.7]), requires_grad=True)
        probe = rng.standard_normal((8, 8))
        dc.backward(dc.tensor_sum(dc.mul(apply_contrast(GrayImage(px), a), Tensor(probe))))
        assert a.grad[0] == pytest.approx(np.sum(probe * (px - mu)), rel=1e-12)

    def test_pixel_gradient_includes_mean_coupling(self, rng):
        px = rng.random((8, 8))
        probe = rng.standard_normal((8, 8))

        def f(t):
            return dc.tensor_sum(dc.mul(apply_contrast(t, 2.3), t64(probe)))

        assert finite_diff_check(f, t64(px), 1e-6) < 1e-6


class TestMapToRange:
    def test_midpoint(self):
        assert map_to_range(t64([[0.0]])).data[0, 0] == 2.0

    def test_ln3(self):
        assert map_to_range(t64([[math.log(3)]])).data[0, 0] == pytest.approx(2.5, abs=1e-15)

    def test_asymptote(self):
        a = map_to_range(t64([[20.0, 40.0, 800.0, -800.0]])).data[0]
        assert np.all(a < 3.0) and np.all(a > 1.0)
        assert 3.0 - a[2] < 1e-12

    def test_custom_range(self):
        assert map_to_range(t64([[0.0]]), RangeSpec(0.5, 1.5)).data[0, 0] == 1.0

    @pytest.mark.parametrize("lo,hi", [(0.0, 3.0), (2.0, 1.0), (-1.0, 1.0), (1.0, 1.0)])
    def test_invalid_range(self, lo, hi):
        with pytest.raises(ValueError):
            RangeSpec(lo, hi)

    def test_float32_strict(self):
        a = map_to_range(Tensor(np.array([[1e4, -1e4]], dtype=np.float32))).data
        assert 1.0 < a[0, 1] and a[0, 0] < 3.0


class TestGenerateViews:
    def test_all_ones(self, rng):
        px = rng.random((1, 9, 9))
        v = generate_views(t64(px), t64(np.ones(4))).data
        assert v.shape == (4, 9, 9)
        for k in range(4):
            assert np.array_equal(v[k], px[0])

    def test_k1_is_apply_contrast(self, rng):
        px = rng.random((9, 9))
        v = generate_views(t64(px[None]), t64([1.8])).data
        assert np.array_equal(v[0], apply_contrast(GrayImage(px), 1.8).data)

    def test_k10_against_loop_float32(self, rng):
        px = rng.random((16, 16)).astype(np.float32)
        alphas = rng.uniform(1, 3, 10).astype(np.float32)
        v = generate_views(Tensor(px[None]), Tensor(alphas)).data
        assert v.dtype == np.float32
        for k, a in enumerate(alphas):
            np.testing.assert_allclose(v[k], loop_contrast(px, float(a)), atol=1e-6, rtol=0)


class TestPredictor:
    def test_zero_weights(self, rng):
        z = predict_raw(t64(rng.random((3, 1, 16, 16))), zero_predictor(5, np.float64))
        assert np.all(z.data == 0) and z.shape == (3, 5)

    def test_bias_passthrough(self, rng):
        w = zero_predictor(3, np.float64)
        w.params["fc.bias"].data = np.array([0.5, -1.0, 2.0])
        z = predict_raw(t64(rng.random((2, 1, 12, 12))), w).data
        assert z.tolist() == [[0.5, -1.0, 2.0]] * 2

    def test_golden_regression(self):
        w = init_predictor(4, np.random.Generator(np.random.PCG64(7)), dtype=np.float64)
        for n in ("conv1.bias", "conv2.bias", "fc.bias"):
            w.params[n].data[:] = 0.05
        yy, xx = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        img = 0.5 + 0.4 * np.sin(xx / 2.0) * np.cos(yy / 3.0)
        z = predict_raw(t64(img[None, None]), w).data[0]
        expected = [0.13761652594992296, -0.03665411293794482, 0.18680259997617493, 0.07830120165026792]
        np.testing.assert_allclose(z, expected, rtol=1e-12)

    def test_init_scheme(self):
        w = init_predictor(10, np.random.default_rng(0))
        assert w.k == 10
        assert np.all(w.params["conv1.bias"].data == 0) and np.all(w.params["fc.bias"].data == 0)
        assert np.abs(w.params["conv2.weight"].data).max() <= math.sqrt(1 / 72)
        assert np.abs(w.params["fc.weight"].data).max() <= math.sqrt(1 / 16)

    def test_small_image_rejected(self):
        with pytest.raises(dc.DimensionError):
            predict_raw(t64(np.zeros((1, 1, 4, 4))), zero_predictor(2, np.float64))


class TestAcamForward:
    def test_zero_predictor_midpoint(self, rng):
        px = rng.random((2, 1, 16, 16))
        out = acam_forward(t64(px), zero_predictor(10, np.float64)).data
        assert out.shape == (2, 10, 16, 16)
        for b in range(2):
            ref = apply_contrast(GrayImage(px[b, 0]), 2.0).data
            for k in range(10):
                assert np.array_equal(out[b, k], ref)

    def test_batch_independence(self, rng):
        w = init_predictor(6, rng, dtype=np.float64)
        px = rng.random((2, 1, 16, 16))
        both = acam_forward(t64(px), w).data
        for b in range(2):
            assert np.array_equal(both[b], acam_forward(t64(px[b : b + 1]), w).data[0])

    def test_end_to_end_gradient(self, rng):
        w = init_predictor(4, rng, dtype=np.float64)
        probe = rng.standard_normal((2, 4, 16, 16))

        def f(t):
            return dc.tensor_sum(dc.mul(acam_forward(t, w), t64(probe)))

        assert finite_diff_check(f, t64(rng.random((2, 1, 16, 16))), 1e-6) < 1e-3

    def test_gradient_reaches_predictor(self, rng):
        w = init_predictor(3, rng, dtype=np.float64)
        probe = rng.standard_normal((1, 3, 12, 12))
        x = t64(rng.random((1, 1, 12, 12)))
        fc = w.params["fc.weight"]

        def f(t):
            w.params["fc.weight"] = t
            return dc.tensor_sum(dc.mul(acam_forward(x, w), t64(probe)))

        assert finite_diff_check(f, t64(fc.data.copy()), 1e-6) < 1e-4

    def test_multiview_stack(self, rng):
        img = GrayImage(rng.random((16, 16)).astype(np.float32), id="x")
        stack = multiview_stack(img, zero_predictor(4))
        assert isinstance(stack.alphas, ContrastParams)
        assert stack.alphas.alphas.tolist() == [2.0] * 4
        assert stack.views.shape == (4, 16, 16) and stack.source_id == "x"


images = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).random((10, 12)))


@settings(max_examples=60, deadline=None)
@given(images, st.floats(0.05, 5.0))
def test_mean_and_variance_properties(px, alpha):
    v = apply_contrast(GrayImage(px), alpha).data
    assert abs(v.mean() - px.mean()) < 1e-12
    assert v.var() == pytest.approx(alpha**2 * px.var(), rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(images, st.floats(0.05, 5.0))
def test_order_preservation(px, alpha):
    v = apply_contrast(GrayImage(px), alpha).data.ravel()
    order = np.argsort(px.ravel(), kind="stable")
    assert np.all(np.diff(v[order]) > 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
def test_range_for_arbitrary_weights(seed, weight_scale):
    r = np.random.default_rng(seed)
    w = init_predictor(5, r, dtype=np.float64)
    for t in w.params.values():
        t.data = t.data * weight_scale + r.standard_normal(t.shape) * weight_scale
    x = t64(r.random((2, 1, 10, 10)))
    alphas = map_to_range(predict_raw(x, w)).data
    assert np.all(alphas > 1.0) and np.all(alphas < 3.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_float32_mean_preservation(seed):
    r = np.random.default_rng(seed)
    px = r.random((1, 1, 16, 16)).astype(np.float32)
    out = acam_forward(Tensor(px), init_predictor(10, r)).data
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.astype(np.float64).mean(axis=(2, 3)), px.astype(np.float64).mean(), atol=1e-5)
