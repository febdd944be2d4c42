import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradalign.autodiff import (
    HigherOrderError,
    NotOnTapeError,
    ShapeError,
    Tensor,
    backward,
    forward_op,
    grad,
    grad_of_grad,
    hessian_vector_product,
    is_grad_enabled,
    no_grad,
    ops,
)
from oracles import central_difference, conv2d_naive, rel_err, softplus


def check_gradient(fn, *arrays, tol=1e-5):
    """Compare grad of sum(fn(...) * w) against central differences for every input."""
    rng = np.random.default_rng(0)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    w = rng.standard_normal(out.shape)
    got = grad(ops.sum(ops.mul(out, w)), leaves)
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [Tensor(v) if j == k else Tensor(arrays[j]) for j in range(len(arrays))]
            return float((fn(*args).data * w).sum())
        expect = central_difference(f, a)
        assert rel_err(got[k].data, expect) < tol, f"input {k}"


class TestFirstOrder:
    @pytest.mark.parametrize("name,fn", [
        ("exp", ops.exp),
        ("sigmoid", ops.sigmoid),
        ("softplus", lambda a: ops.softplus(a, 3.0)),
        ("neg", ops.neg),
        ("power3", lambda a: ops.power(a, 3.0)),
        ("tanh-like", lambda a: ops.sub(ops.mul(2.0, ops.sigmoid(ops.mul(2.0, a))), 1.0)),
        ("logsumexp", lambda a: ops.logsumexp(a, axis=-1)),
        ("log_softmax", lambda a: ops.log_softmax(a, axis=-1)),
        ("softmax", lambda a: ops.softmax(a, axis=-1)),
        ("l2norm", lambda a: ops.l2norm(a, axis=1)),
        ("mean", lambda a: ops.mean(a, axis=0)),
        ("transpose", lambda a: ops.transpose(a)),
        ("getitem", lambda a: ops.getitem(a, (slice(1, 3), 0))),
        ("getitem-repeated", lambda a: ops.getitem(a, (slice(None), [2, 0, 2]))),
        ("reshape", lambda a: ops.reshape(a, (-1,))),
    ])
    def test_unary(self, name, fn):
        x = np.random.default_rng(1).standard_normal((4, 3))
        check_gradient(fn, x)

    def test_positive_domain_ops(self):
        x = np.random.default_rng(2).uniform(0.5, 2.0, (3, 4))
        check_gradient(ops.log, x)
        check_gradient(ops.sqrt, x)

    @pytest.mark.parametrize("fn", [ops.add, ops.sub, ops.mul, ops.div])
    def test_binary_broadcast(self, fn):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 3))
        b = rng.uniform(0.5, 1.5, (1, 3))
        check_gradient(fn, a, b)

    def test_matmul_and_dense(self):
        rng = np.random.default_rng(4)
        check_gradient(ops.matmul, rng.standard_normal((3, 4)), rng.standard_normal((4, 2)))
        check_gradient(ops.dense, rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5))

    def test_concat(self):
        rng = np.random.default_rng(5)
        check_gradient(lambda a, b: ops.concat([a, b], axis=1), rng.standard_normal((2, 3)), rng.standard_normal((2, 1)))

    @pytest.mark.parametrize("pad", [0, 1])
    def test_conv2d(self, pad):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        check_gradient(lambda x_, w_, b_: ops.conv2d(x_, w_, b_, pad=pad), x, w, b)

    def test_conv2d_matches_direct_loops(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        np.testing.assert_allclose(ops.conv2d(x, w, b, pad=1).data, conv2d_naive(x, w, b, 1), atol=1e-12)

    def test_im2col_col2im_adjoint(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 2, 4, 5))
        cols = ops.im2col(x, 3, 1)
        c = rng.standard_normal(cols.shape)
        lhs = float((cols.data * c).sum())
        rhs = float((x * ops.col2im(c, x.shape, 3, 1).data).sum())
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_pools(self):
        x = np.random.default_rng(9).standard_normal((2, 2, 4, 6))  # continuous draws: no max ties
        check_gradient(lambda a: ops.maxpool2d(a, 2), x)
        check_gradient(lambda a: ops.avgpool2d(a, 2), x)

    def test_maxpool_tie_goes_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        (g,) = grad(ops.sum(ops.maxpool2d(x, 2)), [x])
        np.testing.assert_array_equal(g.data.reshape(-1), [1, 0, 0, 0])

    def test_relu_away_from_kink(self):
        x = np.array([[-1.3, 0.4, 2.0, -0.2]])
        check_gradient(ops.relu, x)

    def test_softplus_extreme_inputs_are_finite(self):
        x = Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]), requires_grad=True)
        y = ops.softplus(x, 3.0)
        (g,) = grad(ops.sum(y), [x])
        assert np.all(np.isfinite(y.data)) and np.all(np.isfinite(g.data))
        np.testing.assert_allclose(y.data, softplus(x.data, 3.0))

    def test_l2norm_gradient_at_zero_is_zero(self):
        x = Tensor(np.zeros((2, 3)), requires_grad=True)
        (g,) = grad(ops.sum(ops.l2norm(x, axis=1)), [x])
        np.testing.assert_array_equal(g.data, 0.0)

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        (g,) = grad(ops.sum(ops.mul(x, x) + x), [x])
        np.testing.assert_allclose(g.data, 2 * x.data + 1)

    def test_random_networks_against_finite_differences(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            shapes = [(4, 3), (2, 4)]
            ws = [rng.standard_normal(s) for s in shapes]
            bs = [rng.standard_normal(s[0]) for s in shapes]
            x = rng.standard_normal((3, 3))

            def net(x_, w0, b0, w1, b1):
                return ops.dense(ops.softplus(ops.dense(x_, w0, b0), 3.0), w1, b1)

            check_gradient(net, x, ws[0], bs[0], ws[1], bs[1])


class TestHigherOrder:
    def test_second_derivative_of_cubic(self):
        x = Tensor(np.array([0.5, -1.2, 2.0]), requires_grad=True)
        (g,) = grad(ops.sum(ops.power(x, 3.0)), [x], create_graph=True)
        (h,) = grad(ops.sum(g), [x])
        np.testing.assert_allclose(h.data, 6 * x.data)

    def test_third_derivative(self):
        x = Tensor(np.array([0.3, 1.1]), requires_grad=True)
        (g,) = grad(ops.sum(ops.exp(ops.mul(2.0, x))), [x], create_graph=True)
        (h,) = grad(ops.sum(g), [x], create_graph=True)
        (t,) = grad(ops.sum(h), [x])
        np.testing.assert_allclose(t.data, 8 * np.exp(2 * x.data))

    def test_hvp_matches_finite_difference_of_gradient(self):
        rng = np.random.default_rng(11)
        w0, w1 = rng.standard_normal((6, 4)), rng.standard_normal((1, 6))

        def f(t):
            return ops.sum(ops.dense(ops.softplus(ops.dense(t, w0), 3.0), w1))

        x = rng.standard_normal((1, 4))
        v = rng.standard_normal((1, 4))
        hv = hessian_vector_product(f, Tensor(x), v).data

        def gfun(z):
            zt = Tensor(z, requires_grad=True)
            return grad(f(zt), [zt])[0].data

        h = 1e-5
        fd = (gfun(x + h * v) - gfun(x - h * v)) / (2 * h)
        assert rel_err(hv, fd) < 1e-6

    def test_hvp_of_linear_function_is_zero(self):
        w = np.array([[1.0, -2.0, 0.5]])
        hv = hessian_vector_product(lambda t: ops.sum(ops.dense(t, w)), Tensor(np.ones((1, 3))), np.ones((1, 3)))
        np.testing.assert_array_equal(hv.data, 0.0)

    def test_relu_second_input_derivative_is_zero_but_mixed_is_not(self):
        rng = np.random.default_rng(12)
        w = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        v = Tensor(rng.standard_normal((1, 5)), requires_grad=True)
        x = Tensor(rng.standard_normal((1, 3)), requires_grad=True)
        out = ops.sum(ops.dense(ops.relu(ops.dense(x, w)), v))
        (gx,) = grad(out, [x], create_graph=True)
        hxx, hxw = grad(ops.sum(ops.mul(gx, gx)), [x, w], allow_unused=True)
        np.testing.assert_array_equal(hxx.data, 0.0)
        assert np.abs(hxw.data).max() > 0

    def test_differentiating_plain_gradient_raises(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (g,) = grad(ops.sum(ops.power(x, 3.0)), [x])
        with pytest.raises(HigherOrderError):
            grad(ops.sum(g), [x])
        with pytest.raises(HigherOrderError):
            grad_of_grad(ops.sum(g), [x])

    def test_parameter_gradient_of_input_gradient_norm(self):
        rng = np.random.default_rng(13)
        w = rng.standard_normal((4, 3))
        x = rng.standard_normal((2, 3))

        def penalty(w_arr):
            wt = Tensor(w_arr, requires_grad=True)
            xt = Tensor(x, requires_grad=True)
            (gx,) = grad(ops.sum(ops.softplus(ops.dense(xt, wt), 2.0)), [xt], create_graph=True)
            return wt, ops.sum(ops.mul(gx, gx))

        wt, p = penalty(w)
        (gw,) = grad(p, [wt])
        fd = central_difference(lambda v: penalty(v)[1].item(), w)
        assert rel_err(gw.data, fd) < 1e-6


class TestTapeSemantics:
    def test_unrelated_input_raises_unless_allowed(self):
        x = Tensor(np.ones(2), requires_grad=True)
        z = Tensor(np.ones(2), requires_grad=True)
        out = ops.sum(ops.mul(x, 2.0))
        with pytest.raises(NotOnTapeError):
            grad(out, [z])
        (gz,) = grad(out, [z], allow_unused=True)
        np.testing.assert_array_equal(gz.data, 0.0)

    def test_output_without_history_raises(self):
        with pytest.raises(NotOnTapeError):
            grad(Tensor(np.array(1.0)), [Tensor(np.array(1.0), requires_grad=True)])

    def test_non_scalar_output_needs_seed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = ops.mul(x, 3.0)
        with pytest.raises(ShapeError):
            grad(y, [x])
        (g,) = grad(y, [x], grad_output=np.array([1.0, 0.0, 2.0]))
        np.testing.assert_allclose(g.data, [3.0, 0.0, 6.0])

    def test_intermediate_target(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        h = ops.mul(x, 3.0)
        out = ops.sum(ops.mul(h, h))
        gh, gx = grad(out, [h, x])
        np.testing.assert_allclose(gh.data, 2 * h.data)
        np.testing.assert_allclose(gx.data, 18 * x.data)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            assert not is_grad_enabled()
            y = ops.mul(x, 2.0)
        assert y.node is None and is_grad_enabled()

    def test_backward_keys_by_name(self):
        a = Tensor(np.array(2.0), requires_grad=True, name="a")
        b = Tensor(np.array(3.0), requires_grad=True, name="b")
        res = backward(ops.mul(a, b), [a, b])
        assert res.grads["a"].item() == 3.0 and res.grads["b"].item() == 2.0

    def test_forward_op_dispatch(self):
        x = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_allclose(forward_op("softplus", x, beta=3.0).data, softplus(x, 3.0))
        with pytest.raises(ValueError):
            forward_op("nope", x)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_sum_of_squares_gradient_property(a):
    x = Tensor(a, requires_grad=True)
    (g,) = grad(ops.sum(ops.mul(x, x)), [x])
    np.testing.assert_allclose(g.data, 2 * a)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_rows_sum_to_one_and_gradient_sums_to_zero(a):
    x = Tensor(a[None], requires_grad=True)
    p = ops.softmax(x, axis=-1)
    assert p.data.sum() == pytest.approx(1.0)
    (g,) = grad(ops.sum(p), [x])
    assert abs(g.data.sum()) < 1e-9


class TestWorkedExamples:
    def test_matmul_and_softplus_values(self):
        np.testing.assert_array_equal(ops.matmul(np.array([[1.0, 2], [3, 4]]), np.ones((2, 1))).data, [[3], [7]])
        assert ops.softplus(Tensor(np.array(0.0)), 3.0).item() == pytest.approx(np.log(2) / 3, abs=1e-12)
        assert ops.softplus(Tensor(np.array(50.0)), 3.0).item() == pytest.approx(50.0, abs=1e-12)

    def test_simple_gradients(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        np.testing.assert_array_equal(grad(ops.sum(ops.mul(x, x)), [x])[0].data, [2, 4, 6])
        z = Tensor(np.array(0.0), requires_grad=True)
        assert grad(ops.softplus(z, 3.0), [z])[0].item() == pytest.approx(0.5)

    def test_quadratic_hvp_and_symmetry(self):
        a = np.array([[2.0, 1.0], [1.0, 3.0]])

        def f(t):
            return ops.mul(0.5, ops.sum(ops.mul(t, ops.matmul(t, a))))

        x = Tensor(np.array([[0.3, -0.7]]))
        np.testing.assert_allclose(hessian_vector_product(f, x, np.array([[1.0, 0.0]])).data, [[2.0, 1.0]])

    def test_hvp_symmetry_on_softplus_net(self, small_mlp):
        rng = np.random.default_rng(14)
        x = Tensor(rng.standard_normal((1, 5)))
        u, v = rng.standard_normal((2, 1, 5))

        def f(t):
            return ops.sum(ops.mul(small_mlp.forward(t), np.array([[1.0, -0.5, 2.0]])))

        uhv = float((u * hessian_vector_product(f, x, v).data).sum())
        vhu = float((v * hessian_vector_product(f, x, u).data).sum())
        assert abs(uhv - vhu) < 1e-8 * (1 + abs(uhv))

    def test_linear_parameter_gradient_of_input_gradient_norm(self):
        w = Tensor(np.array([[0.5, -1.5, 2.0]]), requires_grad=True, name="w")
        x = Tensor(np.ones((1, 3)), requires_grad=True)
        (gx,) = grad(ops.sum(ops.matmul(x, ops.transpose(w))), [x], create_graph=True)
        res = grad_of_grad(ops.sum(ops.mul(gx, gx)), [w])
        np.testing.assert_allclose(res.grads[w.name].data, 2 * w.data)
