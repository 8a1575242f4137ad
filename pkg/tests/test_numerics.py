import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsguard import numerics as nx
from gradcheck import check, rel_error

T = nx.Tensor


# ----------------------------------------------------------------- forward values

class TestPrimitiveValues:
    def test_sigmoid_at_zero(self):
        assert nx.primitive_forward("sigmoid", T([0.0])).data.tolist() == [0.5]

    def test_relu(self):
        assert nx.primitive_forward("relu", T([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_conv1d_identity_kernel(self):
        out = nx.primitive_forward("conv1d", T([[[1.0, 2.0, 3.0]]]), T([[[1.0]]]), padding=0)
        assert out.data.ravel().tolist() == [1, 2, 3]

    def test_conv1d_box_kernel_zero_padding(self):
        # hand-unrolled: [0+1+2, 1+2+3, 2+3+0]
        out = nx.conv1d(T([[[1.0, 2.0, 3.0]]]), T([[[1.0, 1.0, 1.0]]]), padding=1)
        assert out.data.ravel().tolist() == [3, 6, 5]

    def test_conv1d_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(2, 3, 5)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
        got = nx.conv1d(T(x), T(w), T(b), padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        want = np.zeros((2, 4, 5))
        for m in range(2):
            for o in range(4):
                for t in range(5):
                    want[m, o, t] = np.sum(xp[m, :, t:t + 3] * w[o]) + b[o]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_layer_norm_normalises_last_axis(self):
        x = np.array([[1.0, 2.0, 3.0, 4.0]])
        out = nx.layer_norm(T(x), T(np.ones(4)), T(np.zeros(4))).data
        want = (x - 2.5) / math.sqrt(1.25 + 1e-5)
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_batch_norm_train_then_eval(self):
        st_ = nx.BatchNormState(2, momentum=0.1)
        x = np.array([[1.0, 10.0], [3.0, 14.0]])
        out = nx.batch_norm(T(x), T(np.ones(2)), T(np.zeros(2)), st_, training=True).data
        np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(st_.running_mean, [0.2, 1.2])
        # unbiased batch variance: [2, 8]
        np.testing.assert_allclose(st_.running_var, [0.9 + 0.2, 0.9 + 0.8])
        ev = nx.batch_norm(T(x), T(np.ones(2)), T(np.zeros(2)), st_, training=False).data
        np.testing.assert_allclose(ev, (x - st_.running_mean) / np.sqrt(st_.running_var + 1e-5))

    def test_dropout_eval_is_identity_and_train_is_seeded(self):
        x = T(np.ones((4, 5)))
        assert nx.dropout(x, 0.5, 0, training=False) is x
        a = nx.dropout(x, 0.5, 7, training=True).data
        b = nx.dropout(x, 0.5, 7, training=True).data
        assert np.array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 2.0}

    def test_global_avg_pool_concat_slice_reshape(self):
        x = np.arange(12.0).reshape(2, 2, 3)
        np.testing.assert_array_equal(nx.global_avg_pool(T(x)).data, x.mean(axis=2))
        c = nx.concat([T(x), T(x)], axis=1)
        assert c.shape == (2, 4, 3)
        assert nx.slice_(T(x), (slice(None), 1)).data.tolist() == x[:, 1].tolist()
        assert nx.reshape(T(x), (4, 3)).shape == (4, 3)

    def test_unknown_primitive(self):
        with pytest.raises(nx.NumericsError):
            nx.primitive_forward("softmax", T([1.0]))

    def test_shape_mismatch(self):
        with pytest.raises(nx.NumericsError):
            nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))
        with pytest.raises(nx.NumericsError):
            nx.add(T(np.ones(3)), T(np.ones(4)))

    def test_non_finite_values_rejected(self):
        with pytest.raises(nx.NumericsError):
            T([1.0, float("nan")])
        with np.errstate(over="ignore"), pytest.raises(nx.NumericsError):
            nx.mul(T([1e200]), T([1e200]))


# ----------------------------------------------------------------- losses

class TestLosses:
    def test_mse_examples(self):
        assert nx.mse_loss(T([1.0, 2.0]), [1.0, 2.0]).data == 0
        assert nx.mse_loss(T([1.0, 1.0]), [0.0, 2.0]).data == 1
        assert abs(float(nx.mse_loss(T([0.5]), [0.2]).data) - 0.09) < 1e-12

    def test_mse_empty(self):
        with pytest.raises(nx.NumericsError):
            nx.mse_loss(T(np.zeros(0)), np.zeros(0))

    def test_cross_entropy_uniform(self):
        assert abs(float(nx.cross_entropy_loss(T([[0.0, 0.0]]), [1]).data) - math.log(2)) < 1e-9

    def test_cross_entropy_saturated_no_overflow(self):
        assert float(nx.cross_entropy_loss(T([[-50.0, 50.0]]), [1]).data) < 1e-10
        assert math.isfinite(float(nx.cross_entropy_loss(T([[-800.0, 800.0]]), [0]).data))

    def test_cross_entropy_hand_value(self):
        # row 1: -log softmax_0 = log(1 + e^1); row 2: -log softmax_1 = log(1 + e^3)
        want = (math.log1p(math.e) + math.log1p(math.e ** 3)) / 2
        got = float(nx.cross_entropy_loss(T([[1.0, 2.0], [3.0, 0.0]]), [0, 1]).data)
        assert abs(got - want) < 1e-12
        assert abs(got - 2.1809) < 1e-4

    def test_cross_entropy_bad_label(self):
        with pytest.raises(nx.NumericsError):
            nx.cross_entropy_loss(T([[0.0, 0.0]]), [2])


# ----------------------------------------------------------------- differentiation

class TestBackward:
    def test_hand_chain_rule(self):
        w, x = T([2.0], requires_grad=True), T([3.0], requires_grad=True)
        g = nx.backward(nx.mse_loss(nx.mul(w, x), [5.0]))
        assert g[w].tolist() == [6.0]
        assert g[x].tolist() == [4.0]

    def test_unreached_leaf_gets_zero(self):
        a, b = T(np.ones(3), requires_grad=True), T(np.ones((2, 2)), requires_grad=True)
        ga, gb = nx.grad(nx.mse_loss(a, np.zeros(3)), [a, b])
        assert gb.shape == (2, 2) and not gb.any()
        assert ga.shape == (3,)

    def test_non_scalar_loss(self):
        with pytest.raises(nx.NumericsError):
            nx.backward(T(np.ones(2), requires_grad=True))

    def test_reused_leaf_accumulates(self):
        x = T(np.array([0.3, -1.2]), requires_grad=True)
        (twice,) = nx.grad(nx.mse_loss(nx.add(x, x), [1.0, 1.0]), [x])
        y = T(np.array([0.3, -1.2]), requires_grad=True)
        (scaled,) = nx.grad(nx.mse_loss(nx.mul(y, 2.0), [1.0, 1.0]), [y])
        np.testing.assert_allclose(twice, scaled, rtol=1e-14)

    def test_deep_graph_does_not_recurse(self):
        x = T(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = nx.add(y, 0.0)
        (g,) = nx.grad(nx.mse_loss(y, [0.0]), [x])
        assert g.tolist() == [2.0]

    def test_lstm_like_recurrence_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x0, w_ih, w_hh = rng.normal(size=(4, 3)), rng.normal(size=(1, 8)), rng.normal(size=(2, 8))
        y = rng.normal(size=(4, 2))

        def build(x, wi, wh):
            h = T(np.zeros((4, 2)))
            c = T(np.zeros((4, 2)))
            for t in range(3):
                z = nx.add(nx.matmul(nx.slice_(x, (slice(None), slice(t, t + 1))), wi), nx.matmul(h, wh))
                i = nx.sigmoid(nx.slice_(z, (slice(None), slice(0, 2))))
                f = nx.sigmoid(nx.slice_(z, (slice(None), slice(2, 4))))
                g = nx.tanh(nx.slice_(z, (slice(None), slice(4, 6))))
                o = nx.sigmoid(nx.slice_(z, (slice(None), slice(6, 8))))
                c = nx.add(nx.mul(f, c), nx.mul(i, g))
                h = nx.mul(o, nx.tanh(c))
            return nx.mse_loss(h, y)

        assert check(build, [x0, w_ih, w_hh]) < 1e-4


class TestFiniteDifference:
    def test_square(self):
        assert abs(nx.finite_difference_gradient(lambda v: float(v[0] ** 2), [3.0])[0] - 6) < 1e-6

    def test_constant(self):
        assert not nx.finite_difference_gradient(lambda v: 4.0, np.ones(3)).any()

    def test_sigmoid_sum(self):
        g = nx.finite_difference_gradient(lambda v: float(np.sum(nx.sigmoid(T(v)).data)), [0.0, 0.0])
        np.testing.assert_allclose(g, [0.25, 0.25], atol=1e-6)

    def test_rejects_bad_step_and_non_finite(self):
        with pytest.raises(nx.NumericsError):
            nx.finite_difference_gradient(lambda v: 0.0, [1.0], h=0)
        with pytest.raises(nx.NumericsError):
            nx.finite_difference_gradient(lambda v: float("inf"), [1.0])


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


# Each entry builds (inputs, scalar-loss builder) from a random generator.
def _cases():
    def unary(op):
        def make(rng):
            x, y = _away_from_zero(rng, (3, 4)), rng.normal(size=(3, 4))
            return [x], lambda a: nx.mse_loss(op(a), y)
        return make

    def binary(op, sa, sb, so):
        def make(rng):
            y = rng.normal(size=so)
            return [rng.normal(size=sa), rng.normal(size=sb)], lambda a, b: nx.mse_loss(op(a, b), y)
        return make

    def conv(rng):
        y = rng.normal(size=(2, 3, 5))
        return ([rng.normal(size=(2, 2, 5)), rng.normal(size=(3, 2, 3)), rng.normal(size=3)],
                lambda x, w, b: nx.mse_loss(nx.conv1d(x, w, b, padding=1), y))

    def ln(rng):
        y = rng.normal(size=(3, 4))
        return ([rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4)],
                lambda x, g, b: nx.mse_loss(nx.layer_norm(x, g, b), y))

    def bn(training):
        def make(rng):
            y = rng.normal(size=(5, 2, 3))
            state = nx.BatchNormState(2)
            state.running_var = rng.uniform(0.5, 2, size=2)
            return ([rng.normal(size=(5, 2, 3)), rng.normal(size=2), rng.normal(size=2)],
                    lambda x, g, b: nx.mse_loss(nx.batch_norm(x, g, b, state, training), y))
        return make

    def drop(rng):
        y, seed = rng.normal(size=(3, 4)), int(rng.integers(1000))
        return [rng.normal(size=(3, 4))], lambda x: nx.mse_loss(nx.dropout(x, 0.3, seed, True), y)

    def pool(rng):
        y = rng.normal(size=(2, 3))
        return [rng.normal(size=(2, 3, 4))], lambda x: nx.mse_loss(nx.global_avg_pool(x), y)

    def cat(rng):
        y = rng.normal(size=(2, 5))
        return ([rng.normal(size=(2, 2)), rng.normal(size=(2, 3))],
                lambda a, b: nx.mse_loss(nx.concat([a, b], axis=1), y))

    def sl(rng):
        y = rng.normal(size=(3, 2))
        return [rng.normal(size=(3, 4))], lambda x: nx.mse_loss(nx.slice_(x, (slice(None), slice(1, 3))), y)

    def xent(rng):
        labels = rng.integers(0, 2, size=4)
        return [rng.normal(size=(4, 2)) * 3], lambda z: nx.cross_entropy_loss(z, labels)

    return {
        "matmul": binary(nx.matmul, (3, 4), (4, 2), (3, 2)),
        "add": binary(nx.add, (3, 4), (4,), (3, 4)),
        "mul": binary(nx.mul, (3, 1), (3, 4), (3, 4)),
        "sigmoid": unary(nx.sigmoid),
        "tanh": unary(nx.tanh),
        "relu": unary(nx.relu),
        "conv1d": conv,
        "layer_norm": ln,
        "batch_norm_train": bn(True),
        "batch_norm_eval": bn(False),
        "dropout": drop,
        "global_avg_pool": pool,
        "concat": cat,
        "slice": sl,
        "cross_entropy": xent,
    }


@pytest.mark.parametrize("name", sorted(_cases()))
def test_primitive_gradients_on_100_random_points(name):
    make = _cases()[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    worst = 0.0
    for _ in range(100):
        inputs, build = make(rng)
        worst = max(worst, check(build, inputs))
    assert worst < 1e-4


# ----------------------------------------------------------------- clamp

class TestClamp:
    def test_examples(self):
        assert nx.clamp([0.5, 1.2, -0.1], 0, 1).tolist() == [0.5, 1.0, 0.0]
        v = np.array([0.2, 0.7])
        assert np.array_equal(nx.clamp(v, 0, 1), v)
        x, eps = np.array([0.1, 0.4, 0.9]), 0.3
        assert np.array_equal(nx.clamp(x + 2 * eps, x - eps, x + eps), x + eps)

    def test_inverted_bounds(self):
        with pytest.raises(nx.NumericsError):
            nx.clamp([0.0], 1.0, 0.0)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)),
           st.floats(-10, 10), st.floats(0, 10))
    def test_idempotent_and_bounded(self, v, lo, width):
        hi = lo + width
        once = nx.clamp(v, lo, hi)
        assert np.array_equal(nx.clamp(once, lo, hi), once)
        assert np.all((once >= lo) & (once <= hi))


def test_rel_error_helper_is_scale_free():
    assert rel_error([1.0, 2.0], [1.0, 2.0]) == 0
    assert rel_error([1e3, 2e3], [1.001e3, 2e3]) == pytest.approx(rel_error([1, 2], [1.001, 2]))
