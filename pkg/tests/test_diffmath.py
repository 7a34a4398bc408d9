import math

import numpy as np
import pytest

from umod import diffmath as dm


def scalar_sum_loss(tensors):
    total = None
    for t in tensors:
        s = dm.sum_all(t)
        total = s if total is None else dm.add(total, s)
    return total


class TestLinear:
    def test_identity_weight(self):
        out = dm.linear(dm.Tensor([[1.0, 2.0]]), np.eye(2), np.zeros(2))
        assert np.allclose(out.data, [[1.0, 2.0]])

    def test_identity_plus_bias(self):
        out = dm.linear(dm.Tensor([[1.0, 2.0]]), np.eye(2), np.array([3.0, 4.0]))
        assert np.allclose(out.data, [[4.0, 6.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(dm.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            dm.linear(dm.Tensor(np.zeros((2, 3))), np.zeros((4, 2)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        x = dm.Parameter("x", rng.normal(size=(2, 3)))
        W = dm.Parameter("W", rng.normal(size=(3, 4)))
        b = dm.Parameter("b", rng.normal(size=4))

        def loss_fn(params):
            return dm.sum_all(dm.linear(params[0].value, params[1], params[2]))

        err = dm.finite_diff_check(loss_fn, [x, W, b], eps=1e-6)
        assert err < 1e-6


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = dm.softmax_last(dm.Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_closed_form_exponentials(self):
        out = dm.softmax_last(dm.Tensor([0.0, math.log(2.0)]))
        assert np.allclose(out.data, [1 / 3, 2 / 3], atol=1e-15)

    def test_no_overflow_on_huge_logits(self):
        out = dm.softmax_last(dm.Tensor([1000.0, 1000.0]))
        assert np.allclose(out.data, [0.5, 0.5])
        assert np.isfinite(out.data).all()

    def test_rows_sum_to_one_and_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            x = rng.normal(size=(4, 6)) * 10
            s = dm.softmax_last(dm.Tensor(x))
            assert np.abs(s.data.sum(-1) - 1.0).max() < 1e-12
            shifted = dm.softmax_last(dm.Tensor(x + 17.5))
            assert np.abs(s.data - shifted.data).max() < 1e-9


class TestAttention:
    def test_single_key_returns_value_exactly(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(2, 1, 3))
        v = rng.normal(size=(2, 1, 3))
        o, a = dm.scaled_dot_attention(dm.Tensor(q), dm.Tensor(q), dm.Tensor(v))
        assert np.array_equal(o.data, v)
        assert np.array_equal(a.data, np.ones((2, 1, 1)))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        q = dm.Tensor(rng.normal(size=(3, 5, 4)))
        k = dm.Tensor(rng.normal(size=(3, 5, 4)))
        _, a = dm.scaled_dot_attention(q, k, k)
        assert np.abs(a.data.sum(-1) - 1.0).max() < 1e-12

    def test_matches_scalar_loop_oracle(self):
        # brute-force reference with explicit loops
        rng = np.random.default_rng(2)
        q = rng.normal(size=(1, 2, 1))
        k = rng.normal(size=(1, 2, 1))
        v = rng.normal(size=(1, 2, 1))
        o, a = dm.scaled_dot_attention(dm.Tensor(q), dm.Tensor(k), dm.Tensor(v))
        for t in range(2):
            scores = [q[0, t, 0] * k[0, u, 0] / math.sqrt(1) for u in range(2)]
            mx = max(scores)
            es = [math.exp(s - mx) for s in scores]
            z = sum(es)
            weights = [e / z for e in es]
            expect = sum(weights[u] * v[0, u, 0] for u in range(2))
            assert abs(o.data[0, t, 0] - expect) < 1e-12
            for u in range(2):
                assert abs(a.data[0, t, u] - weights[u]) < 1e-12

    def test_shape_mismatch(self):
        q = dm.Tensor(np.zeros((1, 2, 3)))
        with pytest.raises(dm.DimensionError):
            dm.scaled_dot_attention(q, q, dm.Tensor(np.zeros((1, 2, 4))))


class TestElementwise:
    def test_relu_sign_cases(self):
        out = dm.elementwise("relu", dm.Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_add(self):
        out = dm.elementwise("add", dm.Tensor([1.0, 2.0]), dm.Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_relu_subgradient_zero_at_zero(self):
        x = dm.Tensor([-1.0, 2.0])
        dm.sum_all(dm.relu(x)).backward()
        assert np.array_equal(x.grad, [0.0, 1.0])
        z = dm.Tensor([0.0])
        dm.sum_all(dm.relu(z)).backward()
        assert np.array_equal(z.grad, [0.0])

    def test_incompatible_shapes(self):
        with pytest.raises(dm.DimensionError):
            dm.add(dm.Tensor(np.zeros(3)), dm.Tensor(np.zeros(4)))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            dm.elementwise("exp", dm.Tensor([1.0]))


class TestReshapeOps:
    def test_concat_last_extents(self):
        a = dm.Tensor(np.zeros((2, 3, 4)))
        b = dm.Tensor(np.zeros((2, 3, 5)))
        assert dm.reshape_ops("concat_last", a, b).shape == (2, 3, 9)

    def test_reshape_roundtrip(self):
        x = np.arange(12.0).reshape(2, 6)
        back = dm.reshape(dm.reshape(dm.Tensor(x), (3, 4)), (2, 6))
        assert np.array_equal(back.data, x)

    def test_transpose_involution(self):
        x = np.random.default_rng(4).normal(size=(3, 5))
        twice = dm.transpose(dm.transpose(dm.Tensor(x)))
        assert np.array_equal(twice.data, x)

    def test_layout_ops_preserve_elements(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 4))
        for out in (dm.reshape(dm.Tensor(x), (6, 4)),
                    dm.transpose(dm.Tensor(x), (2, 0, 1)),
                    dm.concat_last(dm.Tensor(x[..., :2]), dm.Tensor(x[..., 2:]))):
            assert abs(out.data.sum() - x.sum()) < 1e-12
            assert abs((out.data ** 2).sum() - (x ** 2).sum()) < 1e-12

    def test_slice_time_gradient_routes_back(self):
        x = dm.Tensor(np.arange(8.0).reshape(4, 2))
        dm.sum_all(dm.slice_time(x, 1, 3)).backward()
        assert np.array_equal(x.grad, [[0, 0], [1, 1], [1, 1], [0, 0]])

    def test_reshape_bad_extent(self):
        with pytest.raises(dm.DimensionError):
            dm.reshape(dm.Tensor(np.zeros((2, 3))), (4, 2))


class TestFiniteDiffCheck:
    def test_quadratic_closed_form(self):
        p = dm.Parameter("p", np.array([3.0, 4.0]))

        def loss_fn(params):
            v = params[0].value
            return dm.scale(dm.sum_all(dm.mul(v, v)), 0.5)

        err = dm.finite_diff_check(loss_fn, [p], eps=1e-5)
        assert err < 1e-8
        assert np.allclose(p.value.grad, [3.0, 4.0])

    def test_constant_loss_zero_error(self):
        p = dm.Parameter("p", np.array([1.0, -2.0]))

        def loss_fn(params):
            return dm.sum_all(dm.scale(params[0].value, 0.0))

        assert dm.finite_diff_check(loss_fn, [p], eps=1e-5) == 0.0

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            dm.finite_diff_check(lambda ps: dm.Tensor(0.0), [], eps=0.0)

    def test_nonfinite_loss(self):
        p = dm.Parameter("p", np.array([1.0]))
        with pytest.raises(dm.NumericError):
            dm.finite_diff_check(lambda ps: dm.Tensor(float("nan")), [p])


@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_gradient_check(seed):
    rng = np.random.default_rng(seed)
    a = dm.Parameter("a", rng.normal(size=(2, 3)))
    b = dm.Parameter("b", rng.normal(size=(2, 3)))
    w = dm.Parameter("w", rng.normal(size=(3, 3)))

    def loss_fn(params):
        a_, b_, w_ = (p.value for p in params)
        y = dm.linear(a_, w_)
        y = dm.add(y, b_)
        y = dm.relu(y)
        y = dm.softmax_last(y)
        y = dm.mul(y, b_)
        y = dm.sub(y, dm.scale(a_, 0.3))
        y = dm.concat_last(y, dm.transpose(dm.reshape(a_, (3, 2))))
        o, _ = dm.scaled_dot_attention(
            dm.reshape(y, (1, 2, 6)), dm.reshape(y, (1, 2, 6)),
            dm.reshape(y, (1, 2, 6)))
        return dm.mean_all(dm.absolute(dm.slice_time(o, 0, 1, axis=1)))

    err = dm.finite_diff_check(loss_fn, [a, b, w], eps=1e-6)
    assert err < 1e-4


def test_grad_accumulates_on_reuse():
    x = dm.Tensor(np.array([2.0]))
    y = dm.mul(x, x)  # x used twice
    dm.sum_all(y).backward()
    assert np.allclose(x.grad, [4.0])


def test_expand_leading_gradient_sums():
    x = dm.Tensor(np.array([1.0, 2.0]))
    dm.sum_all(dm.expand_leading(x, 3)).backward()
    assert np.array_equal(x.grad, [3.0, 3.0])


def test_backward_requires_scalar():
    with pytest.raises(dm.DimensionError):
        dm.Tensor(np.zeros(3)).backward()
