import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from baafseg import tensor as T
from baafseg.gradcheck import check_gradients
from baafseg.nn import BatchNorm
from baafseg.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def assert_grads_ok(fn, params, frac=1.0):
    res = check_gradients(fn, params)
    assert res.fraction >= frac, res


class TestLinear:
    def test_identity_weights(self):
        out = T.linear(Tensor([[1, 2]]), Tensor([[1, 0], [0, 1]]), Tensor([0, 0]))
        np.testing.assert_array_equal(out.data, [[1, 2]])

    def test_arithmetic(self):
        out = T.linear(Tensor([[1, 1]]), Tensor([[2], [3]]), Tensor([1]))
        np.testing.assert_array_equal(out.data, [[6]])

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        with T.precision(np.float64):
            x, w, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=2))
            res = check_gradients(lambda: T.sum_all(T.linear(x, w, b)), [w])
            assert res.fraction == 1.0 and res.worst_rel < 1e-3
            assert_grads_ok(lambda: T.sum_all(T.linear(x, w, b)), [x, b])

    def test_leading_dims(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 3))
        w = rng.normal(size=(3, 4))
        out = T.linear(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, x @ w, rtol=1e-5)


class TestBatchNorm:
    def test_zero_variance_column(self):
        bn = BatchNorm(2)
        x = Tensor([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]])
        out = bn(x, training=True)
        np.testing.assert_array_equal(out.data[:, 0], 0)

    def test_two_rows_normalize_to_pm_one(self):
        bn = BatchNorm(1)
        out = bn(Tensor([[1.0], [3.0]]), training=True)
        np.testing.assert_allclose(out.data, [[-1], [1]], atol=1e-5)

    def test_eval_identity_with_unit_stats(self):
        bn = BatchNorm(3)
        x = np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32)
        np.testing.assert_allclose(bn(Tensor(x), training=False).data, x, atol=1e-5)

    def test_running_stats_momentum(self):
        bn = BatchNorm(1)
        bn(Tensor([[1.0], [3.0]]), training=True)
        np.testing.assert_allclose(bn.running_mean, [0.02], rtol=1e-5)
        np.testing.assert_allclose(bn.running_var, [0.99 + 0.01 * 1.0], rtol=1e-5)

    def test_empty_input(self):
        with pytest.raises(T.EmptyInputError):
            BatchNorm(2)(Tensor(np.zeros((0, 2))), training=True)

    def test_gradients(self):
        rng = np.random.default_rng(2)
        with T.precision(np.float64):
            bn = BatchNorm(3)
            bn.gamma.data[:] = rng.normal(size=3)
            x = leaf(rng.normal(size=(6, 3)))
            target = rng.normal(size=(6, 3))
            fn = lambda: T.sum_all(T.mul(bn(x, training=True), Tensor(target)))
            assert_grads_ok(fn, [x, bn.gamma, bn.beta])
            fn_eval = lambda: T.sum_all(T.mul(bn(x, training=False), Tensor(target)))
            assert_grads_ok(fn_eval, [x, bn.gamma, bn.beta])


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1, 2])).data, [0, 2])

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([[0, 0]]), axis=1).data, [[0.5, 0.5]])

    def test_softmax_large_values(self):
        out = T.softmax(Tensor([[1000, 1000]]), axis=1).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_softmax_bad_axis(self):
        with pytest.raises(T.DimensionError):
            T.softmax(Tensor([[1, 2]]), axis=2)

    def test_concat_bad_axis(self):
        with pytest.raises(T.DimensionError):
            T.concat([Tensor([[1]]), Tensor([[2]])], axis=3)

    def test_dropout_scaling_and_eval(self):
        x = Tensor(np.ones((200, 10)))
        assert T.dropout(x, 0.5, training=False) is x
        out = T.dropout(x, 0.5, training=True, rng=np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_dropout_invalid_p(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), 1.0, training=True)

    @pytest.mark.parametrize("op", ["relu", "softmax", "concat", "dropout", "row_norm", "neighbor_mean"])
    def test_gradients(self, op):
        rng = np.random.default_rng(3)
        with T.precision(np.float64):
            x = leaf(rng.normal(size=(4, 3)))
            y = leaf(rng.normal(size=(4, 2)))
            w = Tensor(rng.normal(size=(4, 3)))
            fns = {
                "relu": lambda: T.sum_all(T.mul(T.relu(x), w)),
                "softmax": lambda: T.sum_all(T.mul(T.softmax(x, axis=1), w)),
                "concat": lambda: T.sum_all(T.relu(T.concat([x, y], axis=1))),
                "dropout": lambda: T.sum_all(T.mul(T.dropout(x, 0.3, True, np.random.default_rng(5)), w)),
                "row_norm": lambda: T.sum_all(T.row_norm(x)),
                "neighbor_mean": lambda: T.sum_all(T.row_norm(T.neighbor_mean(T.reshape(x, (2, 2, 3))))),
            }
            assert_grads_ok(fns[op], [x, y] if op == "concat" else [x])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=1).data
    assert out.min() >= 0
    np.testing.assert_allclose(out.sum(axis=1), 1, atol=1e-5)


class TestNeighborOps:
    def test_self_gather(self):
        x = np.arange(6.0).reshape(3, 2)
        idx = np.repeat(np.arange(3)[:, None], 4, axis=1)
        out = T.neighbor_gather(Tensor(x), idx).data
        for j in range(4):
            np.testing.assert_array_equal(out[:, j, :], x)

    def test_swap_rows(self):
        out = T.neighbor_gather(Tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([[1], [0]])).data
        np.testing.assert_array_equal(out[:, 0, :], [[3, 4], [1, 2]])

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            T.neighbor_gather(Tensor(np.zeros((2, 1))), np.array([[2]]))

    def test_gather_accumulates_shared_sources(self):
        rng = np.random.default_rng(4)
        with T.precision(np.float64):
            x = leaf(rng.normal(size=(3, 2)))
            idx = np.array([[0, 0], [0, 1], [2, 0]])
            w = Tensor(rng.normal(size=(3, 2, 2)))
            assert_grads_ok(lambda: T.sum_all(T.mul(T.neighbor_gather(x, idx), w)), [x])
            T.backward(T.sum_all(T.mul(T.neighbor_gather(x, idx), w)))

    def test_gather_conserves_gradient_mass(self):
        rng = np.random.default_rng(5)
        x = leaf(rng.normal(size=(10, 3)))
        idx = rng.integers(0, 10, size=(10, 4))
        out = T.neighbor_gather(x, idx)
        g = rng.normal(size=out.shape)
        T.backward(T.sum_all(T.mul(out, Tensor(g))))
        np.testing.assert_allclose(x.grad.sum(), g.astype(np.float32).sum(), rtol=1e-4)

    def test_max_k1_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 1, 3))
        np.testing.assert_array_equal(T.neighbor_max(Tensor(x)).data, x[:, 0, :].astype(np.float32))

    def test_max_routes_to_argmax(self):
        x = leaf(np.array([[[3.0], [1.0], [2.0]]]))
        out = T.neighbor_max(x)
        assert out.data[0, 0] == 3
        T.backward(T.sum_all(out))
        np.testing.assert_array_equal(x.grad[0, :, 0], [1, 0, 0])

    def test_max_ties_route_to_lowest(self):
        x = leaf(np.array([[[2.0], [2.0]]]))
        T.backward(T.sum_all(T.neighbor_max(x)))
        np.testing.assert_array_equal(x.grad[0, :, 0], [1, 0])

    def test_max_matches_brute_force(self):
        x = np.random.default_rng(6).normal(size=(5, 4, 3))
        expect = np.array([[max(x[i, j, c] for j in range(4)) for c in range(3)] for i in range(5)])
        np.testing.assert_allclose(T.neighbor_max(Tensor(x)).data, expect, rtol=1e-6)

    def test_weighted_mean_uniform_scores(self):
        x = np.random.default_rng(7).normal(size=(3, 4, 2))
        out = T.neighbor_weighted_mean(Tensor(x), Tensor(np.zeros_like(x))).data
        np.testing.assert_allclose(out, x.mean(axis=1), rtol=1e-5)

    def test_weighted_mean_dominant_score(self):
        x = np.random.default_rng(8).normal(size=(2, 3, 2))
        s = np.zeros_like(x)
        s[:, 1, :] = 1e4
        out = T.neighbor_weighted_mean(Tensor(x), Tensor(s)).data
        np.testing.assert_allclose(out, x[:, 1, :], rtol=1e-5)

    def test_weighted_mean_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.neighbor_weighted_mean(Tensor(np.zeros((2, 3, 2))), Tensor(np.zeros((2, 3, 1))))

    def test_weighted_mean_gradients(self):
        rng = np.random.default_rng(9)
        with T.precision(np.float64):
            x, s = leaf(rng.normal(size=(3, 4, 2))), leaf(rng.normal(size=(3, 4, 2)))
            w = Tensor(rng.normal(size=(3, 2)))
            assert_grads_ok(lambda: T.sum_all(T.mul(T.neighbor_weighted_mean(x, s), w)), [x, s])

    def test_max_gradients(self):
        rng = np.random.default_rng(10)
        with T.precision(np.float64):
            x = leaf(rng.normal(size=(5, 4, 3)))
            assert_grads_ok(lambda: T.sum_all(T.neighbor_max(x)), [x])

    def test_weighted_maps_gradients(self):
        rng = np.random.default_rng(11)
        with T.precision(np.float64):
            maps = [leaf(rng.normal(size=(4, 3))) for _ in range(3)]
            w = leaf(rng.normal(size=(4, 3)))
            target = Tensor(rng.normal(size=(4, 3)))
            assert_grads_ok(lambda: T.sum_all(T.mul(T.weighted_maps(maps, w), target)), maps + [w])


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.cross_entropy(Tensor(np.zeros((5, 4))), np.array([0, 1, 2, 3, 0]))
        assert loss.item() == pytest.approx(np.log(4), abs=1e-6)

    def test_confident_logits(self):
        logits = np.zeros((3, 3))
        labels = np.array([2, 0, 1])
        logits[np.arange(3), labels] = 1e4
        assert T.cross_entropy(Tensor(logits), labels).item() == pytest.approx(0, abs=1e-6)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(6, 3))
        labels = rng.integers(0, 3, 6)
        expect = 0.0
        for i in range(6):
            expect += -np.log(np.exp(logits[i, labels[i]]) / sum(np.exp(v) for v in logits[i]))
        with T.precision(np.float64):
            got = T.cross_entropy(Tensor(logits), labels).item()
        assert got == pytest.approx(expect / 6, abs=1e-6)

    def test_ignore_id(self):
        rng = np.random.default_rng(13)
        logits = rng.normal(size=(4, 3))
        labels = np.array([0, 1, -1, 2])
        full = T.cross_entropy(Tensor(logits[[0, 1, 3]]), labels[[0, 1, 3]]).item()
        assert T.cross_entropy(Tensor(logits), labels, ignore_id=-1).item() == pytest.approx(full)

    def test_all_ignored(self):
        with pytest.raises(T.UndefinedLossError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, -1]), ignore_id=-1)

    def test_gradients(self):
        rng = np.random.default_rng(14)
        with T.precision(np.float64):
            x = leaf(rng.normal(size=(6, 3)))
            labels = rng.integers(0, 3, 6)
            assert_grads_ok(lambda: T.cross_entropy(x, labels), [x])


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(4.0))
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, 1)

    def test_relu_sum(self):
        x = leaf([-1.0, 2.0])
        T.backward(T.sum_all(T.relu(x)))
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_accumulates(self):
        x = leaf([1.0, 2.0])
        T.backward(T.sum_all(x))
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, [2, 2])

    def test_non_scalar(self):
        with pytest.raises(T.DimensionError):
            T.backward(leaf([1.0, 2.0]))

    def test_shared_subexpression_visited_once(self):
        x = leaf([3.0])
        y = T.relu(x)
        T.backward(T.sum_all(T.add(y, y)))
        np.testing.assert_array_equal(x.grad, [2])

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = T.relu(x)
        assert not y.requires_grad
