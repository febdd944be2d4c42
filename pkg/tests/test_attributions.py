import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradalign.attributions import (
    AttributionMap,
    attribute,
    attribution_tensor,
    export_heatmap,
    grad_attr,
    guided_backprop_attr,
    input_x_grad_attr,
    lrp_attr,
    normalize_map,
    normalize_scores,
    read_pgm,
    read_raw_map,
    smoothgrad_attr,
    write_pgm,
)
from gradalign.autodiff import Tensor, grad, ops
from gradalign.netzoo import LayerSpec, alpha_transform, init_parameters, linear_net, mini_lenet, mlp
from oracles import central_difference, rel_err


def dense_net(weights, biases, activation="relu"):
    specs = [LayerSpec("dense", w.shape[1], w.shape[0]) for w in weights]
    net = init_parameters(specs, weights[-1].shape[0], (weights[0].shape[1],), activation)
    arrays = []
    for w, b in zip(weights, biases):
        arrays += [np.asarray(w, float), np.asarray(b, float)]
    return net.with_parameters(arrays)


class TestGradientMethods:
    def test_linear_net_maps(self, rng):
        w = rng.standard_normal((3, 4))
        net = linear_net(4, 3, weight=w, bias=np.zeros(3))
        x = rng.standard_normal((2, 4))
        np.testing.assert_array_equal(grad_attr(net, x, [2, 0]).scores, w[[2, 0]])
        np.testing.assert_allclose(input_x_grad_attr(net, x, [2, 0]).scores, x * w[[2, 0]])

    def test_grad_matches_finite_differences(self, small_mlp, rng):
        x = rng.standard_normal((1, 5))
        got = grad_attr(small_mlp, x, [1]).scores[0]
        fd = central_difference(lambda v: small_mlp.forward(v[None]).data[0, 1], x[0])
        assert rel_err(got, fd) < 1e-5

    def test_xgrad_is_x_times_grad(self, small_mlp, rng):
        x = rng.standard_normal((3, 5))
        y = [0, 1, 2]
        np.testing.assert_array_equal(input_x_grad_attr(small_mlp, x, y).scores, x * grad_attr(small_mlp, x, y).scores)
        np.testing.assert_array_equal(input_x_grad_attr(small_mlp, np.zeros((1, 5)), [0]).scores, 0.0)

    def test_last_layer_scaling_leaves_minmax_map(self, small_mlp, rng):
        x = rng.standard_normal((4, 5))
        y = [0, 1, 2, 0]
        a = grad_attr(small_mlp, x, y)
        b = grad_attr(alpha_transform(small_mlp, -1, 4.0), x, y)
        np.testing.assert_allclose(b.scores, 4.0 * a.scores, rtol=1e-12)
        np.testing.assert_allclose(normalize_map(a, "minmax_255").scores, normalize_map(b, "minmax_255").scores,
                                   atol=1e-9)

    def test_attack_loss_gradient_through_maps(self, small_mlp, rng):
        x = rng.standard_normal((1, 5))
        target = rng.standard_normal((1, 5))
        for method in ("grad", "xgrad", "gbp"):
            def loss(v):
                h = attribution_tensor(small_mlp, v, [1], method, create_graph=True)
                return ops.sum(ops.mul(ops.sub(h, target), ops.sub(h, target)))

            xt = Tensor(x, requires_grad=True)
            (g,) = grad(loss(xt), [xt])
            fd = central_difference(lambda v: loss(Tensor(v)).item(), x, h=1e-5)
            assert rel_err(g.data, fd) < 1e-4, method

    @pytest.mark.parametrize("pool", ["max", "avg"])
    def test_attack_loss_gradient_through_cnn_maps(self, pool, rng):
        net = mini_lenet(side=4, width=2, hidden=4, class_count=3, seed=5, pool=pool)
        x = rng.uniform(0, 1, (1, 1, 4, 4))
        target = rng.standard_normal(x.shape)
        for method in ("grad", "gbp"):
            def loss(v):
                h = attribution_tensor(net, v, [2], method, create_graph=True)
                return ops.sum(ops.mul(ops.sub(h, target), ops.sub(h, target)))

            xt = Tensor(x, requires_grad=True)
            (g,) = grad(loss(xt), [xt])
            fd = central_difference(lambda v: loss(Tensor(v)).item(), x, h=1e-6)
            assert rel_err(g.data, fd) < 1e-4, method


class TestGuidedBackprop:
    def test_hand_computed_toy(self):
        w1 = np.array([[1.0, -1.0], [2.0, 1.0]])
        w2 = np.array([[1.0, -1.0]])
        net = dense_net([w1, w2], [np.zeros(2), np.zeros(1)])
        x = np.array([[1.0, 0.5]])  # hidden pre-activations 0.5, 2.5
        # upstream [1, -1]: the negative unit is gated off
        np.testing.assert_allclose(guided_backprop_attr(net, x, [0]).scores, [[1.0, -1.0]])
        np.testing.assert_allclose(grad_attr(net, x, [0]).scores, [[-1.0, -2.0]])

    def test_closed_gate_gives_zero(self):
        net = dense_net([np.array([[1.0]]), np.array([[1.0]])], [np.array([-5.0]), np.zeros(1)])
        np.testing.assert_array_equal(guided_backprop_attr(net, np.array([[1.0]]), [0]).scores, 0.0)

    def test_equals_gradient_when_all_gates_open(self, rng):
        w1 = rng.uniform(0.1, 1.0, (4, 3))
        w2 = rng.uniform(0.1, 1.0, (2, 4))
        net = dense_net([w1, w2], [np.ones(4), np.zeros(2)])
        x = rng.uniform(0.1, 1.0, (3, 3))
        np.testing.assert_allclose(guided_backprop_attr(net, x, [0, 1, 0]).scores, grad_attr(net, x, [0, 1, 0]).scores)


class TestLRP:
    def test_single_layer_box_rule_by_hand(self):
        net = dense_net([np.array([[1.0, 1.0]])], [np.zeros(1)], activation="identity")
        amap = lrp_attr(net, np.array([[2.0, 3.0]]), [0], bounds=(0.0, 1.0))
        # z = w.x - w+.l - w-.h = 5, R_i = (x_i w_i - l_i w+_i - h_i w-_i) / z
        np.testing.assert_allclose(amap.scores, [[0.4, 0.6]])

    @pytest.mark.parametrize("pool", ["max", "avg"])
    def test_conservation_through_cnn(self, pool, rng):
        net = mini_lenet(side=8, width=4, hidden=8, activation="relu", seed=3, pool=pool)
        x = rng.uniform(0, 1, (3, 1, 8, 8))
        amap, layers = lrp_attr(net, x, [1, 4, 7], return_layers=True)
        for r in layers:
            np.testing.assert_allclose(r.reshape(3, -1).sum(axis=1), 1.0, rtol=1e-9)
        assert amap.scores.shape == x.shape

    def test_conservation_softplus_mlp(self, rng):
        net = mlp(6, [10, 8], 3, seed=2)
        amap = lrp_attr(net, rng.uniform(0, 1, (5, 6)), [0, 1, 2, 0, 1])
        np.testing.assert_allclose(amap.scores.sum(axis=1), 1.0, rtol=1e-9)

    def test_all_negative_last_layer_gives_zero_map(self, rng):
        w1 = rng.standard_normal((4, 3))
        w2 = -np.abs(rng.standard_normal((2, 4)))
        net = dense_net([w1, w2], [np.zeros(4), np.zeros(2)])
        amap = lrp_attr(net, rng.uniform(0, 1, (2, 3)), [0, 1])
        assert np.all(np.isfinite(amap.scores))
        np.testing.assert_allclose(amap.scores, 0.0, atol=1e-6)

    def test_per_channel_bounds(self, rng):
        net = mini_lenet(in_channels=3, side=8, width=3, hidden=4, activation="relu", seed=1)
        x = rng.uniform(-1, 1, (1, 3, 8, 8))
        per_channel = lrp_attr(net, x, [0], bounds=(np.full(3, -1.0), np.full(3, 1.0))).scores
        np.testing.assert_array_equal(per_channel, lrp_attr(net, x, [0], bounds=(-1.0, 1.0)).scores)
        with pytest.raises(ValueError):
            lrp_attr(net, x, [0], bounds=(np.zeros(2), np.ones(2)))


class TestSmoothGrad:
    def test_sigma_zero_equals_gradient(self, small_mlp, rng):
        x = rng.standard_normal((2, 5))
        np.testing.assert_allclose(smoothgrad_attr(small_mlp, x, [0, 1], sigma=0.0, n_samples=3).scores,
                                   grad_attr(small_mlp, x, [0, 1]).scores, rtol=1e-15)

    def test_linear_net_and_reproducibility(self, small_mlp, rng):
        w = rng.standard_normal((2, 3))
        net = linear_net(3, 2, weight=w, bias=np.zeros(2))
        np.testing.assert_allclose(smoothgrad_attr(net, np.ones((1, 3)), [1], sigma=0.5).scores, w[[1]])
        x = rng.standard_normal((2, 5))
        a = smoothgrad_attr(small_mlp, x, [0, 1], sigma=0.2, seed=4).scores
        np.testing.assert_array_equal(a, smoothgrad_attr(small_mlp, x, [0, 1], sigma=0.2, seed=4).scores)

    def test_invalid(self, small_mlp):
        with pytest.raises(ValueError):
            smoothgrad_attr(small_mlp, np.zeros((1, 5)), [0], sigma=-1.0)

    def test_dispatch(self, small_mlp):
        with pytest.raises(ValueError):
            attribute(small_mlp, np.zeros((1, 5)), [0], "ig")
        assert attribute(small_mlp, np.zeros((1, 5)), [0], "smoothgrad", n_samples=2).method == "smoothgrad"


class TestNormalization:
    def test_examples(self):
        np.testing.assert_allclose(normalize_scores(np.full((1, 4), 3.0), "abs_sum_1"), 0.25)
        s = normalize_scores(np.array([[3.0, 4.0]]), "l2_unit")
        np.testing.assert_allclose(s, [[0.6, 0.8]])
        m = normalize_scores(np.array([[-1.0, 0.0, 3.0]]), "minmax_255")
        np.testing.assert_allclose(m, [[0.0, 63.75, 255.0]])

    def test_degenerate_l2(self):
        with pytest.raises(ValueError):
            normalize_scores(np.zeros((1, 3)), "l2_unit")
        with pytest.raises(ValueError):
            normalize_scores(np.ones((1, 3)), "zscore")

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 6), elements=st.floats(-10, 10, allow_nan=False)), st.floats(0.01, 100))
    def test_idempotent_and_scale_invariant(self, s, alpha):
        if np.any(np.abs(s).sum(axis=1) < 1e-3):
            return
        for scheme in ("l2_unit", "abs_sum_1", "minmax_255"):
            once = normalize_scores(s, scheme)
            np.testing.assert_allclose(normalize_scores(alpha * s, scheme), once, atol=1e-9)
            if scheme != "minmax_255":
                np.testing.assert_allclose(normalize_scores(once, scheme), once, atol=1e-12)


class TestExport:
    def test_pgm_round_trip(self, tmp_path):
        img = np.arange(12).reshape(3, 4) * 20.0
        np.testing.assert_array_equal(read_pgm(write_pgm(tmp_path / "a.pgm", img)), img.astype(np.uint8))

    def test_heatmap_files(self, tmp_path, rng):
        scores = rng.standard_normal((2, 1, 4, 5))
        paths = export_heatmap(AttributionMap(scores, "grad", [3, 1]), 1, tmp_path / "map")
        np.testing.assert_array_equal(read_raw_map(tmp_path / "map"), scores[1])
        gray = read_pgm(paths["pgm"])
        assert gray.shape == (4, 5) and gray.min() == 0 and gray.max() == 255
        assert "class 1" in paths["sidecar"].read_text()
