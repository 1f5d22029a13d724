import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from userstate import tensor as T
from userstate import retention as R

from conftest import max_rel_diff


def rand_qkv(rng, length, dk, dv=None, dtype=np.float32):
    dv = dv or dk
    q = T.tensor(rng.normal(0, 1, (length, dk)), dtype=dtype)
    k = T.tensor(rng.normal(0, 1, (length, dk)), dtype=dtype)
    v = T.tensor(rng.normal(0, 1, (length, dv)), dtype=dtype)
    return q, k, v


def run_recurrent(q, k, v, decay, dtype=np.float32):
    state = R.HeadState.zero(k.data.shape[1], v.data.shape[1], dtype)
    rows = []
    for i in range(q.data.shape[0]):
        o, state = R.retention_recurrent_step(q.data[i], k.data[i], v.data[i],
                                              state, decay)
        rows.append(o)
    return np.stack(rows), state


def run_chunkwise(q, k, v, decay, sizes, dtype=np.float32):
    state = R.HeadState.zero(k.data.shape[1], v.data.shape[1], dtype)
    outs, start = [], 0
    for size in sizes:
        sl = slice(start, start + size)
        o, state = R.retention_chunkwise(T.Tensor(q.data[sl]), T.Tensor(k.data[sl]),
                                         T.Tensor(v.data[sl]), state, decay)
        outs.append(o.data)
        start += size
    assert start == q.data.shape[0]
    return np.concatenate(outs), state


class TestConfig:
    @pytest.mark.parametrize("decay", [0.0, 1.0, -0.1, 1.5])
    def test_decay_outside_open_interval_rejected(self, decay):
        with pytest.raises(R.ConfigError):
            R.RetentionHeadConfig(0, 4, 4, decay)
        with pytest.raises(R.ConfigError):
            R.retention_parallel(T.zeros((2, 2)), T.zeros((2, 2)),
                                 T.zeros((2, 2)), decay)

    def test_decay_schedule_values(self):
        sched = R.decay_schedule(4)
        assert sched == [1 - 2 ** -5, 1 - 2 ** -6, 1 - 2 ** -7, 1 - 2 ** -8]
        assert all(0 < g < 1 for g in sched)

    def test_head_dim_divisibility(self):
        with pytest.raises(R.ConfigError):
            R.MultiHeadConfig(hidden_size=10, num_heads=3)


class TestParallel:
    def test_single_token_independent_of_decay(self, rng):
        q, k, v = rand_qkv(rng, 1, 4)
        a = R.retention_parallel(q, k, v, 0.1).data
        b = R.retention_parallel(q, k, v, 0.9).data
        expected = float(q.data[0] @ k.data[0]) * v.data[0]
        assert np.allclose(a, b)
        assert np.allclose(a[0], expected, atol=1e-6)

    def test_hand_evaluation_two_tokens(self):
        one = T.tensor([[1.0], [1.0]])
        out = R.retention_parallel(one, one, one, 0.5)
        assert np.allclose(out.data.ravel(), [1.0, 1.5])

    def test_matches_recurrent_t8(self, rng):
        q, k, v = rand_qkv(rng, 8, 4)
        par = R.retention_parallel(q, k, v, 0.9).data
        rec, _ = run_recurrent(q, k, v, 0.9)
        assert max_rel_diff(par, rec) < 1e-5

    def test_empty_sequence_rejected(self):
        with pytest.raises(R.EmptyChunkError):
            R.retention_parallel(T.zeros((0, 2)), T.zeros((0, 2)),
                                 T.zeros((0, 2)), 0.5)

    def test_gradient(self, rng):
        q = T.tensor(rng.normal(0, 1, (5, 3)), dtype=np.float64, requires_grad=True)
        k = T.tensor(rng.normal(0, 1, (5, 3)), dtype=np.float64, requires_grad=True)
        v = T.tensor(rng.normal(0, 1, (5, 2)), dtype=np.float64, requires_grad=True)
        w = np.random.default_rng(0).normal(0, 1, (5, 2))
        f = lambda: T.tsum(T.mul(R.retention_parallel(q, k, v, 0.95), T.Tensor(w)))
        assert T.grad_check(f, [q, k, v]) < 1e-4


class TestRecurrent:
    def test_base_case_zero_state(self, rng):
        q, k, v = rand_qkv(rng, 1, 3)
        state = R.HeadState.zero(3, 3)
        o, new_state = R.retention_recurrent_step(q.data[0], k.data[0], v.data[0],
                                                  state, 0.5)
        expected = float(q.data[0] @ k.data[0]) * v.data[0]
        assert np.allclose(o, expected, atol=1e-6)
        assert np.allclose(new_state.matrix, np.outer(k.data[0], v.data[0]), atol=1e-6)

    def test_scalar_trace(self):
        q = [[1.0], [1.0], [1.0]]
        k = [[1.0], [2.0], [1.0]]
        v = [[1.0], [1.0], [2.0]]
        state = R.HeadState.zero(1, 1)
        states, outs = [], []
        for i in range(3):
            o, state = R.retention_recurrent_step(q[i], k[i], v[i], state, 0.5)
            states.append(float(state.matrix[0, 0]))
            outs.append(float(o[0]))
        assert states == pytest.approx([1.0, 2.5, 3.25])
        assert outs == pytest.approx([1.0, 2.5, 3.25])

    def test_final_step_matches_parallel_row(self, rng):
        q, k, v = rand_qkv(rng, 12, 4)
        par = R.retention_parallel(q, k, v, 0.875).data
        rec, _ = run_recurrent(q, k, v, 0.875)
        assert max_rel_diff(par[-1], rec[-1]) < 1e-5

    def test_shape_mismatch(self):
        state = R.HeadState.zero(3, 3)
        with pytest.raises(T.ShapeError):
            R.retention_recurrent_step(np.ones(2), np.ones(2), np.ones(2), state, 0.5)


class TestChunkwise:
    def test_zero_state_reduces_to_parallel(self, rng):
        q, k, v = rand_qkv(rng, 9, 4)
        par = R.retention_parallel(q, k, v, 0.9).data
        chunk, _ = R.retention_chunkwise(q, k, v, R.HeadState.zero(4, 4), 0.9)
        assert max_rel_diff(par, chunk.data) < 1e-6

    def test_scalar_case_split(self):
        q = T.tensor([[1.0], [1.0], [1.0]])
        k = T.tensor([[1.0], [2.0], [1.0]])
        v = T.tensor([[1.0], [1.0], [2.0]])
        o1, s1 = R.retention_chunkwise(T.Tensor(q.data[:2]), T.Tensor(k.data[:2]),
                                       T.Tensor(v.data[:2]), R.HeadState.zero(1, 1), 0.5)
        assert s1.matrix[0, 0] == pytest.approx(2.5)
        o2, _ = R.retention_chunkwise(T.Tensor(q.data[2:]), T.Tensor(k.data[2:]),
                                      T.Tensor(v.data[2:]), s1, 0.5)
        assert o2.data[0, 0] == pytest.approx(1.0 * (0.5 * 2.5 + 2.0))

    def test_empty_chunk_rejected(self):
        with pytest.raises(R.EmptyChunkError):
            R.retention_chunkwise(T.zeros((0, 2)), T.zeros((0, 2)), T.zeros((0, 2)),
                                  R.HeadState.zero(2, 2), 0.5)

    def test_length64_fixed_split(self, rng):
        q, k, v = rand_qkv(rng, 64, 8)
        par = R.retention_parallel(q, k, v, 0.96875).data
        chunked, _ = run_chunkwise(q, k, v, 0.96875, [1, 7, 16, 40])
        assert max_rel_diff(par, chunked) < 1e-4

    def test_state_linearity_in_v(self, rng):
        q, k, v = rand_qkv(rng, 10, 4)
        _, s1 = R.retention_chunkwise(q, k, v, R.HeadState.zero(4, 4), 0.9)
        v2 = T.Tensor(2.0 * v.data)
        _, s2 = R.retention_chunkwise(q, k, v2, R.HeadState.zero(4, 4), 0.9)
        assert np.array_equal(2.0 * s1.matrix, s2.matrix)

    def test_decay_limit_forgets_history(self, rng):
        q, k, v = rand_qkv(rng, 16, 4)
        out = R.retention_parallel(q, k, v, 1e-6).data
        pointwise = (q.data * k.data).sum(axis=1, keepdims=True) * v.data
        assert max_rel_diff(out, pointwise) < 1e-4


@settings(max_examples=25, deadline=None)
@given(
    dk=st.sampled_from([4, 8, 16]),
    length=st.integers(2, 48),
    decay=st.floats(0.05, 0.995),
    data_seed=st.integers(0, 2 ** 20),
)
def test_form_equivalence_property(dk, length, decay, data_seed):
    """Parallel, recurrent, and chunk-wise outputs agree for random inputs and
    random chunk partitions, in 32-bit within 1e-4 and 64-bit within 1e-8."""
    rng = np.random.default_rng(data_seed)
    cuts = sorted(rng.choice(np.arange(1, length), size=min(3, length - 1),
                             replace=False)) if length > 1 else []
    sizes = np.diff([0, *cuts, length]).tolist()
    for dtype, tol in ((np.float32, 1e-4), (np.float64, 1e-8)):
        q, k, v = rand_qkv(rng, length, dk, dtype=dtype)
        par = R.retention_parallel(q, k, v, decay).data
        rec, rec_state = run_recurrent(q, k, v, decay, dtype)
        chunk, chunk_state = run_chunkwise(q, k, v, decay, sizes, dtype)
        assert max_rel_diff(par, rec) < tol
        assert max_rel_diff(par, chunk) < tol
        assert max_rel_diff(rec_state.matrix, chunk_state.matrix) < tol


class TestMultiHead:
    def test_single_head_reduces_to_manual_path(self, rng):
        cfg = R.MultiHeadConfig(hidden_size=8, num_heads=1)
        x = T.randn(rng, (10, 8))
        w = R.MultiHeadWeights(*(T.randn(rng, (8, 8)) for _ in range(4)))
        out, state = R.multi_head_retention(x, w, cfg)
        scl = 8 ** -0.5
        q = T.scale(T.matmul(x, w.w_q), scl)
        k = T.scale(T.matmul(x, w.w_k), scl)
        v = T.matmul(x, w.w_v)
        manual = T.matmul(R.retention_parallel(q, k, v, R.decay_schedule(1)[0]), w.w_o)
        assert max_rel_diff(out.data, manual.data) < 1e-6
        assert len(state.heads) == 1

    def test_zero_value_projection_annihilates(self, rng):
        cfg = R.MultiHeadConfig(hidden_size=8, num_heads=2)
        w = R.MultiHeadWeights(T.randn(rng, (8, 8)), T.randn(rng, (8, 8)),
                               T.zeros((8, 8)), T.randn(rng, (8, 8)))
        out, state = R.multi_head_retention(T.randn(rng, (6, 8)), w, cfg)
        assert np.allclose(out.data, 0.0)
        assert all(np.allclose(h.matrix, 0.0) for h in state.heads)

    def test_parallel_vs_chunkwise_two_heads(self, rng):
        cfg = R.MultiHeadConfig(hidden_size=16, num_heads=2)
        x = T.randn(rng, (64, 16))
        w = R.MultiHeadWeights(*(T.randn(rng, (16, 16), std=0.3) for _ in range(4)))
        full, _ = R.multi_head_retention(x, w, cfg)
        state = R.zero_layer_state(cfg)
        outs = []
        for start in range(0, 64, 16):
            o, state = R.multi_head_retention(T.Tensor(x.data[start:start + 16]),
                                              w, cfg, state)
            outs.append(o.data)
        assert np.abs(full.data - np.concatenate(outs)).max() < 1e-4

    def test_parallel_also_returns_resulting_state(self, rng):
        cfg = R.MultiHeadConfig(hidden_size=8, num_heads=2)
        x = T.randn(rng, (12, 8))
        w = R.MultiHeadWeights(*(T.randn(rng, (8, 8)) for _ in range(4)))
        _, state_parallel = R.multi_head_retention(x, w, cfg)
        state_chunk = R.zero_layer_state(cfg)
        _, state_chunk = R.multi_head_retention(x, w, cfg, state_chunk)
        for hp, hc in zip(state_parallel.heads, state_chunk.heads):
            assert max_rel_diff(hp.matrix, hc.matrix) < 1e-5
