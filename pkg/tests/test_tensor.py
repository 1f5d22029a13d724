import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from userstate import tensor as T

from conftest import max_rel_diff


def t64(data, requires_grad=True):
    return T.tensor(data, dtype=np.float64, requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, T.tensor(np.eye(2)))
        assert np.allclose(out.data, [[1, 2], [3, 4]])

    def test_permutation(self):
        a = T.tensor([[1.0, 0.0], [0.0, 1.0]])
        p = T.tensor([[0.0, 1.0], [1.0, 0.0]])
        assert np.allclose(T.matmul(a, p).data, [[0, 1], [1, 0]])

    def test_hand_dot_product(self):
        out = T.matmul(T.tensor([[1.0, 2.0]]), T.tensor([[3.0], [5.0]]))
        assert out.data.shape == (1, 1)
        assert out.data[0, 0] == pytest.approx(13.0)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(T.zeros((2, 3)), T.zeros((2, 2)))

    def test_associativity_float32(self, rng):
        for _ in range(10):
            a = T.randn(rng, (5, 4))
            b = T.randn(rng, (4, 6))
            c = T.randn(rng, (6, 3))
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            assert max_rel_diff(left, right) < 1e-4


class TestElementwise:
    def test_sigmoid_symmetry_point(self):
        assert T.sigmoid(T.tensor([0.0])).data[0] == pytest.approx(0.5)

    def test_sigmoid_gradient_at_zero(self):
        x = t64([0.0])
        out = T.tsum(T.sigmoid(x))
        out.backward()
        assert x.grad[0] == pytest.approx(0.25)

    def test_exp_log_inverse_pair(self):
        out = T.exp(T.log(T.tensor([2.0])))
        assert abs(out.data[0] - 2.0) < 1e-6

    def test_log_domain_error(self):
        with pytest.raises(T.DomainError):
            T.log(T.tensor([1.0, -0.5]))

    def test_scalar_broadcast(self):
        out = T.add(T.tensor([[1.0, 2.0]]), T.tensor([3.0]))
        assert np.allclose(out.data, [[4, 5]])

    def test_non_scalar_broadcast_rejected(self):
        with pytest.raises(T.ShapeError):
            T.add(T.zeros((2, 2)), T.zeros((2, 3)))

    def test_no_nan_on_extreme_inputs(self):
        x = T.tensor([[-1e4, 1e4, 0.0]])
        assert np.isfinite(T.sigmoid(x).data).all()
        assert np.isfinite(T.softmax(x).data).all()
        assert np.isfinite(T.log_softmax(x).data).all()
        assert np.isfinite(T.gelu(x).data).all()


class TestReductionsAndNorms:
    def test_softmax_uniform(self):
        out = T.softmax(T.tensor([[0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, [[1 / 3] * 3])

    @settings(max_examples=30)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_softmax_rows_sum_to_one(self, row):
        out = T.softmax(T.tensor([row]))
        assert out.data.sum() == pytest.approx(1.0, abs=1e-5)

    def test_mean_over_rows(self):
        out = T.tmean(T.tensor([[1.0, 1.0], [3.0, 3.0]]), axis=0)
        assert np.allclose(out.data, [2.0, 2.0])

    def test_gather_rows_ordering(self):
        table = T.tensor([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
        out = T.gather_rows(table, [2, 0])
        assert np.allclose(out.data, [[2, 2], [0, 0]])

    def test_gather_rows_out_of_range_names_id(self):
        with pytest.raises(IndexError, match="7"):
            T.gather_rows(T.zeros((3, 2)), [1, 7])

    def test_layer_norm_row_stats(self, rng):
        x = T.randn(rng, (6, 16), std=3.0)
        out = T.layer_norm(x, T.ones((16,)), T.zeros((16,)))
        assert np.abs(out.data.mean(axis=1)).max() < 1e-5
        assert np.abs(out.data.var(axis=1) - 1.0).max() < 1e-3

    def test_invalid_axis(self):
        with pytest.raises(T.ShapeError):
            T.tsum(T.zeros((2, 2)), axis=3)


class TestFusedLosses:
    def test_bce_matches_naive(self, rng):
        z = rng.normal(0, 3, (4, 5))
        y = (rng.random((4, 5)) > 0.5).astype(np.float64)
        loss = T.bce_with_logits(t64(z, requires_grad=False), y)
        sig = 1 / (1 + np.exp(-z))
        naive = -(y * np.log(sig) + (1 - y) * np.log(1 - sig)).mean()
        assert loss.item() == pytest.approx(naive, rel=1e-9)

    def test_nll_matches_manual(self, rng):
        logits = rng.normal(0, 1, (5, 7))
        ids = rng.integers(0, 7, 5)
        lp = T.log_softmax(t64(logits, requires_grad=False))
        loss = T.nll_from_log_probs(lp, ids)
        manual = -np.mean([lp.data[i, ids[i]] for i in range(5)])
        assert loss.item() == pytest.approx(manual, rel=1e-12)

    def test_nll_bad_target(self):
        with pytest.raises(IndexError, match="9"):
            T.nll_from_log_probs(T.zeros((2, 3)), [0, 9])


class TestGraph:
    def test_backward_twice_rejected(self):
        x = t64([1.0, 2.0])
        out = T.tsum(x)
        out.backward()
        with pytest.raises(RuntimeError, match="already ran"):
            out.backward()

    def test_backward_needs_scalar(self):
        x = t64([1.0, 2.0])
        with pytest.raises(T.ShapeError):
            T.mul(x, x).backward()

    def test_topo_order_parents_first(self):
        a, b = t64([1.0]), t64([2.0])
        c = T.add(a, b)
        d = T.mul(c, a)      # diamond: a feeds both c and d
        out = T.tsum(d)
        order = T.topo_order(out)
        pos = {id(t): i for i, t in enumerate(order)}
        for node in order:
            for parent in node.parents:
                assert pos[id(parent)] < pos[id(node)]

    def test_diamond_gradient_accumulates(self):
        a = t64([3.0])
        out = T.tsum(T.mul(T.add(a, a), a))   # (a+a)*a = 2a^2, d/da = 4a = 12
        out.backward()
        assert a.grad[0] == pytest.approx(12.0)

    def test_no_grad_suppresses_graph(self):
        a = t64([1.0])
        with T.no_grad():
            out = T.mul(a, a)
        assert not out.requires_grad
        assert out.parents == ()

    def test_determinism_bitwise(self, rng):
        def run():
            r = np.random.default_rng(7)
            x = T.randn(r, (8, 8))
            w = T.randn(r, (8, 8))
            return T.tsum(T.gelu(T.matmul(x, w))).data.tobytes()
        assert run() == run()


def _rand(rng, shape):
    return t64(rng.normal(0, 1, shape))


def _pos(rng, shape):
    return t64(rng.uniform(0.5, 2.0, shape))


def _weighted_sum(rng, out):
    w = rng.normal(0, 1, out.shape)
    return T.tsum(T.mul(out, T.Tensor(w)))


OP_CASES = {
    "matmul": lambda rng: ((a := _rand(rng, (3, 4)), b := _rand(rng, (4, 2))),
                           lambda: T.matmul(a, b)),
    "add": lambda rng: ((a := _rand(rng, (3, 3)), b := _rand(rng, (3, 3))),
                        lambda: T.add(a, b)),
    "sub": lambda rng: ((a := _rand(rng, (2, 4)), b := _rand(rng, (2, 4))),
                        lambda: T.sub(a, b)),
    "mul": lambda rng: ((a := _rand(rng, (3, 2)), b := _rand(rng, (3, 2))),
                        lambda: T.mul(a, b)),
    "div": lambda rng: ((a := _rand(rng, (2, 3)), b := _pos(rng, (2, 3))),
                        lambda: T.div(a, b)),
    "scale": lambda rng: ((a := _rand(rng, (3, 3)),), lambda: T.scale(a, 1.7)),
    "add_bias": lambda rng: ((a := _rand(rng, (3, 4)), b := _rand(rng, (4,))),
                             lambda: T.add_bias(a, b)),
    "sigmoid": lambda rng: ((a := _rand(rng, (3, 3)),), lambda: T.sigmoid(a)),
    "gelu": lambda rng: ((a := _rand(rng, (3, 3)),), lambda: T.gelu(a)),
    "exp": lambda rng: ((a := _rand(rng, (2, 3)),), lambda: T.exp(a)),
    "log": lambda rng: ((a := _pos(rng, (2, 3)),), lambda: T.log(a)),
    "sqrt": lambda rng: ((a := _pos(rng, (2, 3)),), lambda: T.sqrt(a)),
    "softmax": lambda rng: ((a := _rand(rng, (3, 5)),), lambda: T.softmax(a)),
    "log_softmax": lambda rng: ((a := _rand(rng, (3, 5)),),
                                lambda: T.log_softmax(a)),
    "layer_norm": lambda rng: ((x := _rand(rng, (3, 6)), g := _pos(rng, (6,)),
                                b := _rand(rng, (6,))),
                               lambda: T.layer_norm(x, g, b)),
    "gather_rows": lambda rng: ((tab := _rand(rng, (5, 3)),),
                                lambda: T.gather_rows(tab, [4, 0, 2, 2])),
    "transpose": lambda rng: ((a := _rand(rng, (2, 4)),), lambda: T.transpose(a)),
    "slice_rows": lambda rng: ((a := _rand(rng, (5, 3)),),
                               lambda: T.slice_rows(a, 1, 4)),
    "slice_cols": lambda rng: ((a := _rand(rng, (3, 5)),),
                               lambda: T.slice_cols(a, 0, 2)),
    "concat_cols": lambda rng: ((a := _rand(rng, (3, 2)), b := _rand(rng, (3, 3))),
                                lambda: T.concat_cols([a, b])),
    "stack_rows": lambda rng: ((a := _rand(rng, (4,)), b := _rand(rng, (4,))),
                               lambda: T.stack_rows([a, b])),
    "sum_axis": lambda rng: ((a := _rand(rng, (3, 4)),), lambda: T.tsum(a, axis=1)),
    "mean_all": lambda rng: ((a := _rand(rng, (3, 4)),), lambda: T.tmean(a)),
    "mean_axis0": lambda rng: ((a := _rand(rng, (4, 3)),), lambda: T.tmean(a, axis=0)),
}


@pytest.mark.parametrize("op_name", sorted(OP_CASES))
def test_grad_check_every_op(op_name):
    """Every differentiable op: reverse-mode vs central differences, 64-bit,
    20 random small inputs, relative error < 1e-4."""
    for trial in range(20):
        rng = np.random.default_rng([hash(op_name) % 2 ** 32, trial])
        tensors, build = OP_CASES[op_name](rng)
        f = lambda: _weighted_sum(np.random.default_rng(trial), build())
        err = T.grad_check(f, list(tensors))
        assert err < 1e-4, f"{op_name} trial {trial}: rel err {err}"


def test_grad_check_square_example():
    x = t64([3.0])
    f = lambda: T.tsum(T.mul(x, x))
    out = f()
    out.backward()
    assert x.grad[0] == pytest.approx(6.0)
    assert T.grad_check(f, [x], eps=1e-5) < 1e-6


def test_grad_check_fused_losses(rng):
    z = t64(rng.normal(0, 2, (3, 4)))
    y = (rng.random((3, 4)) > 0.5).astype(np.float64)
    assert T.grad_check(lambda: T.bce_with_logits(z, y), [z]) < 1e-6

    logits = t64(rng.normal(0, 1, (4, 5)))
    ids = rng.integers(0, 5, 4)
    f = lambda: T.nll_from_log_probs(T.log_softmax(logits), ids)
    assert T.grad_check(f, [logits]) < 1e-6


def test_grad_check_requires_float64():
    x = T.tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        T.grad_check(lambda: T.tsum(x), [x])
