import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bridgelm import tensor as T
from bridgelm.tensor import ContractError, ShapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def check(f, params, tol=1e-6, eps=1e-6):
    rep = T.finite_diff_check(f, params, eps=eps)
    assert rep.passed(tol), rep.max_rel_err


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2], [3, 4]])
        assert np.array_equal((Tensor(np.eye(2)) @ Tensor(b)).data, b)

    def test_hand_product(self):
        out = Tensor([[1.0, 2], [3, 4]]) @ Tensor([[5.0], [6]])
        assert out.data.tolist() == [[17.0], [39.0]]

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError) as exc:
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
        assert "(2, 3)" in str(exc.value)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=(3, 3)))
        check(lambda: T.tsum(a @ b), {"a": a, "b": b})

    def test_batched_gradient(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 4, 2)))
        check(lambda: T.tsum(T.mul(a @ b, a @ b)), {"a": a, "b": b}, tol=1e-5)


class TestSoftmax:
    def test_symmetric(self):
        assert np.allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_large_inputs(self):
        out = T.softmax_rows(Tensor([[1000.0, 1000.0]])).data
        assert np.all(np.isfinite(out)) and np.allclose(out, [[0.5, 0.5]])

    def test_closed_form(self):
        out = T.softmax_rows(Tensor([[0.0, math.log(3)]])).data
        assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)

    @given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), min_size=1, max_size=4).filter(
        lambda rows: len({len(r) for r in rows}) == 1))
    def test_rows_sum_to_one(self, rows):
        out = T.softmax_rows(Tensor(rows)).data
        assert np.all(np.abs(out.sum(axis=-1) - 1) <= 1e-12)

    def test_allowed_mask_gives_zero_weight(self):
        allowed = np.array([[True, False], [True, True]])
        out = T.softmax_rows(Tensor([[5.0, 9.0], [1.0, 1.0]]), allowed).data
        assert out[0].tolist() == [1.0, 0.0]

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x, w = leaf(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
        check(lambda: T.tsum(T.mul(T.softmax_rows(x), w)), {"x": x})


class TestLayerNorm:
    def test_constant_row(self):
        out = T.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, np.zeros((1, 3)))

    def test_closed_form(self):
        out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x, g, b = leaf(rng.normal(size=(2, 4))), leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
        w = Tensor(rng.normal(size=(2, 4)))
        check(lambda: T.tsum(T.mul(T.layer_norm(x, g, b), w)), {"x": x, "g": g, "b": b})


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.cross_entropy(Tensor(np.zeros((1, 4))), [2], [1])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_all_masked_is_zero_with_warning(self):
        x = leaf(np.random.default_rng(0).normal(size=(3, 5)))
        with pytest.warns(RuntimeWarning):
            loss = T.cross_entropy(x, [0, 1, 2], [0, 0, 0])
        assert loss.item() == 0.0
        loss.backward()
        assert np.array_equal(x.grad, np.zeros((3, 5)))

    def test_bruteforce_oracle(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(3, 5))
        targets, mask = [4, 0, 2], [1, 0, 1]
        want = 0.0
        for row, t, m in zip(z, targets, mask):
            want -= m * (row[t] - math.log(sum(math.exp(v) for v in row)))
        assert T.cross_entropy(Tensor(z), targets, mask).item() == pytest.approx(want, abs=1e-10)

    def test_masked_rows_have_zero_gradient(self):
        x = leaf(np.random.default_rng(5).normal(size=(4, 6)))
        T.cross_entropy(x, [1, 2, 3, 4], [1, 0, 1, 0]).backward()
        assert np.all(x.grad[[1, 3]] == 0.0)
        assert np.all(x.grad[[0, 2]] != 0.0)

    @given(st.integers(0, 2**32 - 1), st.permutations(range(5)))
    def test_time_permutation_invariance(self, seed, perm):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(5, 7))
        tg = rng.integers(0, 7, size=5)
        mk = rng.integers(0, 2, size=5)
        mk[0] = 1
        a = T.cross_entropy(Tensor(z), tg, mk).item()
        p = list(perm)
        b = T.cross_entropy(Tensor(z[p]), tg[p], mk[p]).item()
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)

    def test_target_out_of_vocab(self):
        with pytest.raises(ContractError):
            T.cross_entropy(Tensor(np.zeros((1, 4))), [4], [1])

    def test_gradient(self):
        x = leaf(np.random.default_rng(6).normal(size=(3, 5)))
        check(lambda: T.cross_entropy(x, [1, 4, 0], [1, 1, 0]), {"x": x})


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        T.tsum(x).backward()
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_product_chain(self):
        rng = np.random.default_rng(7)
        x, y = leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
        check(lambda: T.tsum(T.mul(T.mul(x, y), y)), {"x": x, "y": y})

    def test_frozen_leaf_gets_no_grad(self):
        x, c = leaf([1.0, 2.0]), Tensor([3.0, 4.0])
        T.tsum(T.mul(x, c)).backward()
        assert c.grad is None and x.grad.tolist() == [3.0, 4.0]

    def test_accumulates(self):
        x = leaf([1.0, 2.0])
        T.tsum(x).backward()
        T.tsum(x).backward()
        assert x.grad.tolist() == [2.0, 2.0]

    def test_non_scalar_root(self):
        with pytest.raises(ContractError):
            leaf([1.0, 2.0]).backward()

    def test_graph_order_and_single_visit(self):
        x = leaf([1.0, 2.0])
        y = T.mul(x, x)
        root = T.tsum(T.add(y, y))
        graph = T.ComputeGraph.from_root(root)
        ids = [id(n.tensor) for n in graph.nodes]
        assert len(ids) == len(set(ids))
        for i, node in enumerate(graph.nodes):
            assert all(j < i for j in node.inputs)

    def test_no_grad_builds_no_graph(self):
        x = leaf([1.0])
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad


class TestDebugMode:
    def test_nonfinite_raises_in_debug(self):
        T.set_debug(True)
        try:
            with pytest.raises(FloatingPointError):
                T.mul(Tensor([1e308]), Tensor([1e308]))
        finally:
            T.set_debug(False)

    def test_release_propagates(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = T.mul(Tensor([1e308]), Tensor([1e308]))
        assert np.isinf(out.data[0])


class TestOpGradients:
    """Every differentiable op against central differences on seeded random shapes."""

    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4))
    def test_elementwise_and_shape_ops(self, seed, m, n):
        rng = np.random.default_rng(seed)
        x, b = leaf(rng.normal(size=(m, n))), leaf(rng.normal(size=n))
        w = Tensor(rng.normal(size=(n, m)))

        def f():
            h = T.gelu(T.add(x, b))
            h = T.transpose(T.reshape(h, (m, n)), (1, 0))
            h = T.concat_rows([h, T.scale(T.neg(h), 0.5)])
            return T.mean(T.mul(T.slice_rows(h, 0, n), w))

        rep = T.finite_diff_check(f, {"x": x, "b": b}, eps=1e-6, floor=None)
        assert rep.passed(1e-4), rep.max_rel_err

    @given(st.integers(0, 10_000), st.lists(st.integers(0, 4), min_size=1, max_size=6))
    def test_take_rows(self, seed, ids):
        rng = np.random.default_rng(seed)
        table = leaf(rng.normal(size=(5, 3)))
        w = Tensor(rng.normal(size=(len(ids), 3)))
        rep = T.finite_diff_check(lambda: T.tsum(T.mul(T.take_rows(table, ids), w)), {"t": table}, eps=1e-6)
        assert rep.passed(1e-6)


class TestFiniteDiffOracle:
    def test_quadratic(self):
        x = leaf([3.0])
        rep = T.finite_diff_check(lambda: T.tsum(T.mul(x, x)), {"x": x}, eps=1e-5)
        assert x.grad[0] == 6.0
        assert rep.max_rel_err["x"] < 1e-9

    def test_frozen_excluded(self):
        x, y = leaf([1.0]), Tensor([2.0])
        rep = T.finite_diff_check(lambda: T.tsum(T.mul(x, y)), {"x": x, "y": y})
        assert "y" not in rep.max_rel_err

    @pytest.mark.parametrize("eps", [1e-8, 1e-2])
    def test_eps_bounds(self, eps):
        x = leaf([1.0])
        with pytest.raises(ContractError):
            T.finite_diff_check(lambda: T.tsum(x), {"x": x}, eps=eps)

    def test_nonfinite_reported_per_coordinate(self):
        x = leaf([0.0, 1.0])

        def f():
            # log of a value that goes negative when coordinate 0 is nudged down
            v = x.data[0]
            with np.errstate(all="ignore"):
                val = np.log(v) if v != 0 else 0.0
            return T.add(T.tsum(x), Tensor(val))

        rep = T.finite_diff_check(f, {"x": x}, eps=1e-5)
        assert ("x", (0,)) in rep.nonfinite
        assert not rep.passed(1.0)

    def test_rel_err_denominator(self):
        assert T.rel_err(0.0, 0.0) == 0.0
        assert T.rel_err(1e-9, 0.0) == pytest.approx(0.1)
        assert T.rel_err(2.0, 1.0) == pytest.approx(0.5)
