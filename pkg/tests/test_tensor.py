import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lancer.errors import EmptyLossError, ShapeError
from lancer.tensor import (
    Tensor,
    add,
    concat,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mean_axis,
    mul,
    narrow,
    reshape,
    softmax,
    sum_all,
    tanh,
    transpose,
)

from conftest import fd_grad, rel_err


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, b).data, b.data)

    def test_row_sums(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        assert out.data.tolist() == [[3.0], [7.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_associativity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b, c = (Tensor(rng.normal(0, 1, (4, 4))) for _ in range(3))
            left = matmul(matmul(a, b), c).data
            right = matmul(a, matmul(b, c)).data
            assert np.max(np.abs(left - right)) < 1e-9

    def test_gradients(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(0, 1, (3, 4)), requires_grad=True)
        b = Tensor(rng.normal(0, 1, (4, 2)), requires_grad=True)

        def loss():
            return sum_all(mul(matmul(a, b), matmul(a, b)))

        loss().backward()
        for t in (a, b):
            i = int(rng.integers(0, t.size))
            assert rel_err(float(t.grad.reshape(-1)[i]), fd_grad(loss, t, i)) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        out = softmax(Tensor([0.0, 0.0, 0.0, 0.0]), axis=0)
        assert np.allclose(out.data, 0.25)

    def test_analytic(self):
        out = softmax(Tensor([0.0, math.log(3)]), axis=0)
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_sums_to_one_over_seeded_draws(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            x = Tensor(rng.normal(0, 10, 5))
            s = softmax(x, axis=0).data
            assert abs(s.sum() - 1.0) < 1e-6
            assert (s > 0).all()

    def test_axis_bound(self):
        with pytest.raises(IndexError):
            softmax(Tensor(np.zeros((2, 3))), axis=2)

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=16))
    @settings(max_examples=60, deadline=None)
    def test_distribution_property(self, xs):
        s = softmax(Tensor(np.asarray(xs)), axis=0).data
        assert abs(s.sum() - 1.0) < 1e-6
        assert (s > 0).all()
        assert np.isfinite(s).all()


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
        assert abs(loss.item() - math.log(4)) < 1e-12

    def test_confident_logits(self):
        loss = cross_entropy(Tensor([[10.0, -10.0]]), [0])
        expected = -math.log(1.0 / (1.0 + math.exp(-20.0)))
        assert abs(loss.item() - expected) < 1e-12
        assert loss.item() < 1e-8

    def test_ignored_position_mean(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(0, 2, (3, 5))
        # independent per-position NLL for the two live rows
        def nll(row, t):
            z = logits[row] - logits[row].max()
            return -(z[t] - math.log(np.exp(z).sum()))

        loss = cross_entropy(Tensor(logits), [2, -1, 4], ignore_id=-1)
        assert abs(loss.item() - (nll(0, 2) + nll(2, 4)) / 2) < 1e-12

    def test_all_ignored(self):
        with pytest.raises(EmptyLossError):
            cross_entropy(Tensor(np.zeros((2, 3))), [-1, -1], ignore_id=-1)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_gradient(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.normal(0, 1, (4, 6)), requires_grad=True)
        targets = [1, -1, 0, 5]

        def loss():
            return cross_entropy(logits, targets, ignore_id=-1)

        loss().backward()
        for i in rng.choice(logits.size, size=6, replace=False):
            fd = fd_grad(loss, logits, int(i))
            assert rel_err(float(logits.grad.reshape(-1)[int(i)]), fd) < 1e-6


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        mul(x, x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_untracked_constants_only(self):
        x = Tensor(3.0)
        y = mul(x, x)
        y.backward()  # no tracked inputs: a no-op
        assert x.grad is None and y.grad is None

    def test_non_scalar_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError):
            add(x, x).backward()

    def test_accumulation_and_zero_grad(self):
        x = Tensor(2.0, requires_grad=True)
        mul(x, x).backward()
        first = float(x.grad)
        mul(x, x).backward()
        assert float(x.grad) == pytest.approx(2 * first)
        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression_counted_per_use(self):
        x = Tensor(2.0, requires_grad=True)
        y = mul(x, x)  # used twice below
        add(y, y).backward()
        assert float(x.grad) == pytest.approx(8.0)  # d/dx 2x^2


class TestOpGradients:
    """Finite-difference checks for each primitive in a composite graph."""

    def test_composite(self):
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(0, 1, (5, 4)), requires_grad=True)
        g = Tensor(np.ones(4), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        table = Tensor(rng.normal(0, 1, (9, 5)), requires_grad=True)
        ids = np.array([1, 4, 4, 0])

        def loss():
            x = embedding(table, ids)
            x = layer_norm(matmul(x, w), g, b)
            x = concat([tanh(x), gelu(x)], axis=1)
            x = transpose(reshape(x, (4, 2, 4)), (1, 0, 2))
            x = narrow(x, 0, 1, 1)
            x = mean_axis(reshape(x, (4, 4)), 0)
            return cross_entropy(reshape(x, (1, 4)), [2])

        loss().backward()
        for t in (w, g, b, table):
            for i in rng.choice(t.size, size=4, replace=False):
                fd = fd_grad(loss, t, int(i))
                an = float(t.grad.reshape(-1)[int(i)])
                assert rel_err(an, fd) < 1e-5


class TestNumericalSafety:
    def test_no_nan_inf_within_magnitude_bounds(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(-50, 50, (6, 8))
        for out in (
            softmax(Tensor(x), axis=1).data,
            gelu(Tensor(x)).data,
            tanh(Tensor(x)).data,
            layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data,
        ):
            assert np.isfinite(out).all()

    def test_broadcast_add_bias_grad(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(0, 1, (3, 4)), requires_grad=True)
        b = Tensor(rng.normal(0, 1, 4), requires_grad=True)

        def loss():
            return sum_all(mul(add(x, b), add(x, b)))

        loss().backward()
        i = 2
        assert rel_err(float(b.grad[i]), fd_grad(loss, b, i)) < 1e-6
