import numpy as np
import pytest

from userstate import tensor as T
from userstate import model as M
from userstate import retention as R

from conftest import max_rel_diff


CFG = M.ModelConfig(vocab_size=20, num_layers=2, num_heads=2, hidden_size=16,
                    ffn_size=32, num_predicted=18, future_window=4, max_seq_len=64)


@pytest.fixture
def params():
    return M.init_parameters(CFG, seed=3)


def random_ids(rng, n, vocab=CFG.vocab_size):
    return rng.integers(0, vocab, n)


class TestConfig:
    def test_hidden_not_divisible(self):
        with pytest.raises(M.ConfigError):
            M.ModelConfig(hidden_size=30, num_heads=4)

    def test_future_window_positive(self):
        with pytest.raises(M.ConfigError):
            M.ModelConfig(future_window=0)

    def test_predicted_bounded_by_vocab(self):
        with pytest.raises(M.ConfigError):
            M.ModelConfig(vocab_size=10, num_predicted=11)

    def test_normalized_variant_reserved(self):
        with pytest.raises(M.ConfigError, match="reserved"):
            M.ModelConfig(normalized_retention=True)


class TestForward:
    def test_zeroed_blocks_reduce_to_final_norm_of_embeddings(self, params):
        for lay in params.layers:
            for name in ("w_q", "w_k", "w_v", "w_o", "ffn_w1", "ffn_w2"):
                getattr(lay, name).data[:] = 0.0
        params.invalidate_fingerprint()
        ids = [3, 7, 1, 3]
        hidden = M.forward_sequence(params, ids)
        emb = T.gather_rows(params.embedding, ids)
        expected = T.layer_norm(emb, params.final_gain, params.final_bias)
        assert np.allclose(hidden.data, expected.data, atol=1e-6)

    def test_batch_of_one_equals_unbatched(self, params, rng):
        ids = random_ids(rng, 12)
        batch_out = M.forward_parallel(params, [ids])
        single = M.forward_sequence(params, ids)
        assert np.array_equal(batch_out[0].data, single.data)

    def test_batch_permutation_permutes_outputs(self, params, rng):
        batch = [random_ids(rng, n) for n in (5, 9, 7)]
        outs = M.forward_parallel(params, batch)
        perm = [2, 0, 1]
        outs_perm = M.forward_parallel(params, [batch[i] for i in perm])
        for j, i in enumerate(perm):
            assert np.array_equal(outs[i].data, outs_perm[j].data)

    def test_overlong_sequence_rejected(self, params, rng):
        with pytest.raises(M.LengthError):
            M.forward_sequence(params, random_ids(rng, CFG.max_seq_len + 1))

    def test_bad_id_rejected(self, params):
        with pytest.raises(IndexError, match="25"):
            M.forward_sequence(params, [1, 25])


class TestChunkwise:
    def test_single_chunk_equals_parallel(self, params, rng):
        ids = random_ids(rng, 20)
        par = M.forward_sequence(params, ids)
        hidden, state = M.forward_chunkwise(params, ids, M.fresh_state(params))
        assert max_rel_diff(par.data, hidden.data) < 1e-5
        assert state.tokens_processed == 20

    def test_two_chunks_equal_one(self, params, rng):
        ids = random_ids(rng, 8)
        par = M.forward_sequence(params, ids).data
        st = M.fresh_state(params)
        h1, st = M.forward_chunkwise(params, ids[:3], st)
        h2, st = M.forward_chunkwise(params, ids[3:], st)
        assert max_rel_diff(par, np.concatenate([h1.data, h2.data])) < 1e-4

    def test_arbitrary_partition_statefulness(self, params, rng):
        """Pooled embedding over chunk-wise hiddens equals the parallel one."""
        ids = random_ids(rng, 50)
        parallel_embed = M.embed(M.forward_sequence(params, ids)).data
        st = M.fresh_state(params)
        pieces = []
        for size in (1, 12, 30, 7):
            h, st = M.forward_chunkwise(params, ids[:size], st)
            pieces.append(h.data)
            ids = ids[size:]
        chunk_embed = np.concatenate(pieces).mean(axis=0)
        assert max_rel_diff(parallel_embed, chunk_embed) < 1e-4

    def test_empty_chunk_rejected(self, params):
        with pytest.raises(R.EmptyChunkError):
            M.forward_chunkwise(params, [], M.fresh_state(params))

    def test_stale_state_names_both_fingerprints(self, params, rng):
        state = M.fresh_state(params)
        other = M.init_parameters(CFG, seed=99)
        with pytest.raises(M.StaleStateError) as exc:
            M.forward_chunkwise(other, [1, 2], state)
        msg = str(exc.value)
        assert state.fingerprint[:12] in msg and other.fingerprint()[:12] in msg

    def test_tokens_processed_accumulates(self, params, rng):
        st = M.fresh_state(params)
        total = 0
        for n in (4, 9, 1):
            _, st = M.forward_chunkwise(params, random_ids(rng, n), st)
            total += n
        assert st.tokens_processed == total


class TestEmbed:
    def test_mean_without_mask(self):
        out = M.embed(T.tensor([[1.0, 1.0], [3.0, 3.0]]))
        assert np.allclose(out.data, [2.0, 2.0])

    def test_single_row(self):
        out = M.embed(T.tensor([[5.0, -1.0]]))
        assert np.allclose(out.data, [5.0, -1.0])

    def test_mask_semantics(self):
        hidden = T.tensor([[1.0, 1.0], [9.0, 9.0], [3.0, 3.0]])
        out = M.embed(hidden, mask=[1, 0, 1])
        assert np.allclose(out.data, [2.0, 2.0])

    def test_fully_masked_rejected(self):
        with pytest.raises(M.EmptyPoolError):
            M.embed(T.tensor([[1.0, 2.0]]), mask=[0])


class TestHeads:
    def test_zero_head_weights_give_half_probability(self, params, rng):
        params.fbp_w.data[:] = 0.0
        params.fbp_b.data[:] = 0.0
        hidden = M.forward_sequence(params, random_ids(rng, 6))
        probs = T.sigmoid(M.fbp_logits(hidden, params))
        assert np.allclose(probs.data, 0.5)

    def test_single_prediction_column(self, rng):
        cfg = M.ModelConfig(vocab_size=10, num_layers=1, num_heads=1,
                            hidden_size=8, ffn_size=16, num_predicted=1,
                            future_window=2, max_seq_len=32)
        p = M.init_parameters(cfg, seed=0)
        hidden = M.forward_sequence(p, random_ids(rng, 5, 10))
        assert M.fbp_logits(hidden, p).shape == (5, 1)

    def test_head_gradient(self, rng):
        cfg = M.ModelConfig(vocab_size=6, num_layers=1, num_heads=1, hidden_size=4,
                            ffn_size=8, num_predicted=3, future_window=1,
                            max_seq_len=16)
        p = M.init_parameters(cfg, seed=0, dtype=np.float64)
        ids = rng.integers(0, 6, 5)
        w = rng.normal(0, 1, (5, 3))
        f = lambda: T.tsum(T.mul(M.fbp_logits(M.forward_sequence(p, ids), p),
                                 T.Tensor(w)))
        assert T.grad_check(f, [p.fbp_w, p.fbp_b]) < 1e-6


class TestPersistence:
    def test_round_trip_bitwise(self, params, tmp_path):
        path = tmp_path / "model.bin"
        M.save_params(params, path)
        loaded = M.load_params(path)
        assert loaded.fingerprint() == params.fingerprint()
        for (na, ta), (nb, tb) in zip(params.named_tensors(), loaded.named_tensors()):
            assert na == nb
            assert ta.data.tobytes() == tb.data.tobytes()
        # a second save produces identical bytes
        path2 = tmp_path / "model2.bin"
        M.save_params(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_file(self, params, tmp_path):
        path = tmp_path / "model.bin"
        M.save_params(params, path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(M.FormatError):
            M.load_params(path)

    def test_foreign_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(M.FormatError, match="magic"):
            M.load_params(path)

    def test_version_skew(self, params, tmp_path):
        path = tmp_path / "model.bin"
        M.save_params(params, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(M.VersionError):
            M.load_params(path)

    def test_corrupt_payload(self, params, tmp_path):
        path = tmp_path / "model.bin"
        M.save_params(params, path)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(M.FormatError, match="fingerprint"):
            M.load_params(path)

    def test_config_mismatch(self, params, tmp_path):
        path = tmp_path / "model.bin"
        M.save_params(params, path)
        other = M.ModelConfig(vocab_size=21, num_layers=2, num_heads=2,
                              hidden_size=16, ffn_size=32, num_predicted=18,
                              future_window=4, max_seq_len=64)
        with pytest.raises(M.ConfigError):
            M.load_params(path, expected_config=other)

    def test_fingerprint_tracks_weights(self, params):
        fp = params.fingerprint()
        params.fbp_b.data[0] += 1.0
        params.invalidate_fingerprint()
        assert params.fingerprint() != fp
        params.fbp_b.data[0] -= 1.0
        params.invalidate_fingerprint()
        assert params.fingerprint() == fp


def test_sequence_embedding_long_input_chunks(params, rng):
    ids = random_ids(rng, 3 * CFG.max_seq_len + 5)
    emb = M.sequence_embedding(params, ids)
    st = M.fresh_state(params)
    hs = []
    arr = ids
    while arr.size:
        h, st = M.forward_chunkwise(params, arr[:CFG.max_seq_len], st)
        hs.append(h.data)
        arr = arr[CFG.max_seq_len:]
    assert max_rel_diff(emb, np.concatenate(hs).mean(axis=0)) < 1e-5
