"""Autodiff core: forward oracles, finite-difference gradients, contracts."""
import numpy as np
import pytest

import smoe.tensor as tt
from smoe.errors import ContractError, DimensionError
from smoe.tensor import Tensor, grad_check


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestForward:
    def test_add_mul_neg_sub(self):
        a = Tensor([1.0, 2.0, 3.0])
        b = Tensor([10.0, 20.0, 30.0])
        np.testing.assert_allclose((a + b).data, [11, 22, 33])
        np.testing.assert_allclose((a * b).data, [10, 40, 90])
        np.testing.assert_allclose((-a).data, [-1, -2, -3])
        np.testing.assert_allclose((b - a).data, [9, 18, 27])
        np.testing.assert_allclose((2.0 * a).data, [2, 4, 6])
        np.testing.assert_allclose((1.0 - a).data, [0, -1, -2])

    def test_matmul_matches_numpy(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(3, 5))
        out = Tensor(a) @ Tensor(b)
        np.testing.assert_allclose(out.data, a @ b)

    def test_relu_log_square(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        np.testing.assert_allclose(tt.relu(Tensor(x)).data,
                                   np.maximum(x, 0.0))
        np.testing.assert_allclose(tt.square(Tensor(x)).data, x * x)
        pos = np.array([0.5, 1.0, 3.0])
        np.testing.assert_allclose(tt.log(Tensor(pos)).data, np.log(pos))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(6, 5)) * 3)
        p = tt.softmax(x, axis=1).data
        np.testing.assert_allclose(p.sum(axis=1), np.ones(6), atol=1e-12)
        assert (p > 0).all()

    def test_softmax_shift_invariant(self):
        # the max-subtraction trick keeps huge logits finite
        x = np.array([[1000.0, 1001.0, 999.0]])
        p = tt.softmax(Tensor(x)).data
        q = tt.softmax(Tensor(x - 1000.0)).data
        np.testing.assert_allclose(p, q, atol=1e-12)
        assert np.isfinite(p).all()

    def test_log_softmax_consistent(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(4, 7)))
        np.testing.assert_allclose(tt.log_softmax(x, axis=1).data,
                                   np.log(tt.softmax(x, axis=1).data),
                                   atol=1e-12)

    def test_reduce_sum_mean(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 4))
        assert tt.reduce_sum(Tensor(x)).data == pytest.approx(x.sum())
        np.testing.assert_allclose(tt.reduce_sum(Tensor(x), axis=0).data,
                                   x.sum(axis=0))
        assert tt.reduce_mean(Tensor(x)).data == pytest.approx(x.mean())
        np.testing.assert_allclose(tt.reduce_mean(Tensor(x), axis=1).data,
                                   x.mean(axis=1))

    def test_l2_normalize_rows(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 3))
        out = tt.l2_normalize(Tensor(x), axis=1).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.ones(5))

    def test_l2_normalize_zero_row_is_safe(self):
        out = tt.l2_normalize(Tensor(np.zeros((2, 3))), axis=1).data
        assert np.isfinite(out).all()

    def test_concat_transpose(self):
        a = np.ones((2, 3))
        b = np.zeros((1, 3))
        out = tt.concat([Tensor(a), Tensor(b)], axis=0)
        assert out.shape == (3, 3)
        np.testing.assert_allclose(tt.transpose(Tensor(a)).data, a.T)

    def test_gather_take_scale_slice(self):
        x = np.arange(12.0).reshape(4, 3)
        idx = np.array([2, 0, 2])
        np.testing.assert_allclose(tt.gather_rows(Tensor(x), idx).data,
                                   x[idx])
        cols = np.array([0, 2, 1, 0])
        np.testing.assert_allclose(tt.take_per_row(Tensor(x), cols).data,
                                   x[np.arange(4), cols])
        s = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(tt.scale_rows(Tensor(x), Tensor(s)).data,
                                   x * s[:, None])
        np.testing.assert_allclose(tt.slice_cols(Tensor(x), 1, 3).data,
                                   x[:, 1:3])

    def test_shift_rows_pads_with_zeros(self):
        x = np.arange(8.0).reshape(4, 2)
        down = tt.shift_rows(Tensor(x), 1).data  # row t holds x[t-1]
        np.testing.assert_allclose(down[0], [0, 0])
        np.testing.assert_allclose(down[1:], x[:-1])
        up = tt.shift_rows(Tensor(x), -2).data  # row t holds x[t+2]
        np.testing.assert_allclose(up[-2:], np.zeros((2, 2)))
        np.testing.assert_allclose(up[:-2], x[2:])

    def test_shift_rows_beyond_length_is_all_zero(self):
        x = np.ones((3, 2))
        np.testing.assert_allclose(tt.shift_rows(Tensor(x), 5).data,
                                   np.zeros((3, 2)))


class TestBroadcasting:
    def test_scalar_and_trailing_vector_allowed(self):
        m = Tensor(np.ones((3, 4)))
        assert (m + Tensor(2.0)).shape == (3, 4)
        assert (m * Tensor(np.ones(4))).shape == (3, 4)

    def test_mismatched_shapes_rejected(self):
        m = Tensor(np.ones((3, 4)))
        with pytest.raises(DimensionError):
            m + Tensor(np.ones((4, 3)))
        with pytest.raises(DimensionError):
            m * Tensor(np.ones(3))  # length must match the trailing axis
        with pytest.raises(DimensionError):
            m + Tensor(np.ones((3, 1)))

    def test_matmul_inner_dim_checked(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_broadcast_gradient_reduces_to_leaf_shape(self):
        v = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        m = Tensor(np.ones((3, 2)), requires_grad=True)
        loss = tt.reduce_sum(m * v)
        loss.backward()
        assert v.grad.shape == (2,)
        np.testing.assert_allclose(v.grad, [3.0, 3.0])
        np.testing.assert_allclose(m.grad, np.tile([1.0, 2.0], (3, 1)))


class TestBackwardContract:
    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_double_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = tt.reduce_sum(x)
        loss.backward()
        with pytest.raises(ContractError):
            loss.backward()

    def test_shared_subexpression_accumulates(self):
        # y = x*x + x*x must see d/dx = 4x, not 2x
        x = Tensor(np.array(3.0), requires_grad=True)
        sq = x * x
        (sq + sq).backward()
        assert x.grad == pytest.approx(12.0)

    def test_no_grad_leaves_stay_clean(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3))
        tt.reduce_sum(a * b).backward()
        assert b.grad is None
        assert a.grad is not None

    def test_grad_matches_data_shape(self):
        rng = np.random.default_rng(5)
        w = leaf(rng, 3, 4)
        tt.reduce_sum(tt.relu(Tensor(rng.normal(size=(2, 3))) @ w)).backward()
        assert w.grad.shape == w.data.shape


class TestGradients:
    """Every op's backward rule against central finite differences."""

    def check(self, f, x, tol=1e-6):
        report = grad_check(f, x, tolerance=tol)
        assert report.passed, f"max rel err {report.max_rel_error:.3e}"

    def test_add(self):
        rng = np.random.default_rng(10)
        self.check(lambda t: tt.reduce_sum((t[0] + t[1]) * t[1]),
                   [leaf(rng, 3, 4), leaf(rng, 3, 4)])

    def test_mul_broadcast(self):
        rng = np.random.default_rng(11)
        self.check(lambda t: tt.reduce_sum(tt.square(t[0] * t[1])),
                   [leaf(rng, 3, 4), leaf(rng, 4)])

    def test_matmul(self):
        rng = np.random.default_rng(12)
        self.check(lambda t: tt.reduce_sum(tt.square(t[0] @ t[1])),
                   [leaf(rng, 2, 3), leaf(rng, 3, 4)])

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(4, 3)) + np.sign(rng.normal(size=(4, 3))),
                   requires_grad=True)
        # keep all entries at least 0.5 from zero so the subgradient
        # cannot disagree with the finite difference
        x.data[np.abs(x.data) < 0.5] += 1.0
        self.check(lambda t: tt.reduce_sum(tt.relu(t)), x)

    def test_log(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
        self.check(lambda t: tt.reduce_sum(tt.log(t)), x)

    def test_softmax(self):
        rng = np.random.default_rng(15)
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        self.check(lambda t: tt.reduce_sum(tt.square(tt.softmax(t, axis=1))),
                   w)

    def test_log_softmax(self):
        rng = np.random.default_rng(16)
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        idx = np.array([0, 3, 1, 4])
        self.check(lambda t: -tt.reduce_sum(
            tt.take_per_row(tt.log_softmax(t, axis=1), idx)), w)

    def test_l2_normalize(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.normal(size=(3, 4)) + 2.0, requires_grad=True)
        self.check(lambda t: tt.reduce_sum(
            tt.square(tt.l2_normalize(t, axis=1) + 0.3)), x)

    def test_concat(self):
        rng = np.random.default_rng(18)
        self.check(lambda t: tt.reduce_sum(
            tt.square(tt.concat([t[0], t[1]], axis=0))),
            [leaf(rng, 2, 3), leaf(rng, 4, 3)])

    def test_reduce_mean_axis(self):
        rng = np.random.default_rng(19)
        self.check(lambda t: tt.reduce_sum(
            tt.square(tt.reduce_mean(t, axis=0))), leaf(rng, 5, 3))

    def test_gather_rows_repeated_index(self):
        rng = np.random.default_rng(20)
        idx = np.array([1, 1, 0, 2])
        self.check(lambda t: tt.reduce_sum(tt.square(tt.gather_rows(t, idx))),
                   leaf(rng, 3, 4))

    def test_take_per_row(self):
        rng = np.random.default_rng(21)
        idx = np.array([2, 0, 1, 2])
        self.check(lambda t: tt.reduce_sum(tt.square(tt.take_per_row(t, idx))),
                   leaf(rng, 4, 3))

    def test_scale_rows_both_inputs(self):
        rng = np.random.default_rng(22)
        self.check(lambda t: tt.reduce_sum(tt.square(tt.scale_rows(t[0], t[1]))),
                   [leaf(rng, 4, 3), leaf(rng, 4)])

    def test_shift_rows(self):
        rng = np.random.default_rng(23)
        self.check(lambda t: tt.reduce_sum(tt.square(
            tt.shift_rows(t, 2) + tt.shift_rows(t, -1))), leaf(rng, 5, 3))

    def test_slice_cols(self):
        rng = np.random.default_rng(24)
        self.check(lambda t: tt.reduce_sum(tt.square(tt.slice_cols(t, 1, 4))),
                   leaf(rng, 3, 6))

    def test_transpose(self):
        rng = np.random.default_rng(25)
        const = Tensor(rng.normal(size=(3, 2)))
        self.check(lambda t: tt.reduce_sum(tt.square(tt.transpose(t) @ const)),
                   leaf(rng, 3, 4))


class TestGradCheckHarness:
    def test_detects_wrong_gradient(self):
        # a rule that doubles the true gradient must be flagged
        def broken(t):
            out = Tensor(t.data.sum(), _parents=(t,))

            def rule(g):
                t._accumulate(2.0 * g * np.ones_like(t.data))

            out._rule = rule
            return out

        x = Tensor(np.ones(4), requires_grad=True)
        report = grad_check(broken, x, tolerance=1e-4)
        assert not report.passed

    def test_max_checks_limits_probes(self):
        rng = np.random.default_rng(26)
        x = leaf(rng, 10, 10)
        report = grad_check(lambda t: tt.reduce_sum(tt.square(t)), x,
                            max_checks=7, rng=np.random.default_rng(0))
        assert report.checked == 7
        assert report.passed
