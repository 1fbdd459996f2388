"""Attention, encoder/decoder layers, embeddings, and the conv front-end,
checked against direct numpy enumeration and finite differences."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from crosscap import nn
from crosscap import tensor as T
from crosscap.tensor import Tensor


def numpy_attention(q_in, kv_in, Wq, Wk, Wv, Wo, heads):
    """Direct per-head enumeration of scaled dot-product attention."""
    dk = Wq.shape[1]
    dh = dk // heads
    Q, K, V = q_in @ Wq, kv_in @ Wk, kv_in @ Wv
    outs, ws = [], []
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        scores = Q[:, s] @ K[:, s].T / np.sqrt(dh)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        outs.append(w @ V[:, s])
        ws.append(w)
    return np.concatenate(outs, axis=1) @ Wo, np.mean(ws, axis=0)


class TestAttention:
    rng = np.random.default_rng(11)

    def make(self, d_q=6, d_kv=5, d_k=8, d_out=6, heads=2):
        return nn.MultiHeadAttention(d_q, d_kv, d_k, d_out, heads, self.rng)

    def test_single_key_gives_unit_weight(self):
        attn = self.make()
        q = Tensor(self.rng.standard_normal((3, 6)))
        kv = Tensor(self.rng.standard_normal((1, 5)))
        out, w = attn(q, kv)
        assert_allclose(w.data, np.ones((3, 1)))
        expected = (kv.data @ attn.W_V.data) @ attn.W_O.data
        assert_allclose(out.data, np.broadcast_to(expected, (3, 6)),
                        atol=1e-12)

    def test_identical_keys_give_uniform_weights(self):
        attn = self.make()
        q = Tensor(self.rng.standard_normal((2, 6)))
        row = self.rng.standard_normal(5)
        kv = Tensor(np.tile(row, (4, 1)))
        _, w = attn(q, kv)
        assert_allclose(w.data, np.full((2, 4), 0.25), atol=1e-12)

    def test_matches_direct_enumeration_one_head(self):
        attn = nn.MultiHeadAttention(3, 4, 5, 2, 1, self.rng)
        q = Tensor(self.rng.standard_normal((2, 3)))
        kv = Tensor(self.rng.standard_normal((2, 4)))
        out, w = attn(q, kv)
        ref_out, ref_w = numpy_attention(
            q.data, kv.data, attn.W_Q.data, attn.W_K.data,
            attn.W_V.data, attn.W_O.data, heads=1)
        assert_allclose(out.data, ref_out, atol=1e-12)
        assert_allclose(w.data, ref_w, atol=1e-12)

    def test_matches_direct_enumeration_multi_head(self):
        attn = self.make(heads=4, d_k=8)
        q = Tensor(self.rng.standard_normal((5, 6)))
        kv = Tensor(self.rng.standard_normal((7, 5)))
        out, w = attn(q, kv)
        ref_out, ref_w = numpy_attention(
            q.data, kv.data, attn.W_Q.data, attn.W_K.data,
            attn.W_V.data, attn.W_O.data, heads=4)
        assert_allclose(out.data, ref_out, atol=1e-12)
        assert_allclose(w.data, ref_w, atol=1e-12)

    def test_rows_sum_to_one_and_masked_entries_zero(self):
        attn = self.make()
        q = Tensor(self.rng.standard_normal((4, 6)))
        kv = Tensor(self.rng.standard_normal((5, 5)))
        mask = np.ones((4, 5), dtype=bool)
        mask[2, 1:4] = False
        mask[0, 0] = False
        _, w = attn(q, kv, mask=mask)
        assert_allclose(w.data.sum(axis=1), np.ones(4), atol=1e-10)
        assert (w.data[~mask] == 0.0).all()

    def test_fully_masked_row_raises(self):
        attn = self.make()
        q = Tensor(self.rng.standard_normal((2, 6)))
        kv = Tensor(self.rng.standard_normal((3, 5)))
        mask = np.ones((2, 3), dtype=bool)
        mask[1, :] = False
        with pytest.raises(ValueError, match="fully masked"):
            attn(q, kv, mask=mask)

    def test_permuting_kv_rows_permutes_weight_columns(self):
        attn = self.make()
        q = Tensor(self.rng.standard_normal((3, 6)))
        kv = self.rng.standard_normal((5, 5))
        perm = np.array([3, 0, 4, 1, 2])
        out_a, w_a = attn(q, Tensor(kv))
        out_b, w_b = attn(q, Tensor(kv[perm]))
        assert_allclose(w_b.data, w_a.data[:, perm], atol=1e-12)
        assert_allclose(out_b.data, out_a.data, atol=1e-12)

    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divisible"):
            nn.MultiHeadAttention(4, 4, 6, 4, 4, self.rng)

    def test_gradients(self):
        attn = self.make(d_q=4, d_kv=4, d_k=4, d_out=4, heads=2)
        q = Tensor(self.rng.standard_normal((3, 4)), requires_grad=True)
        kv = Tensor(self.rng.standard_normal((2, 4)), requires_grad=True)
        probe = Tensor(self.rng.standard_normal((3, 4)))

        def f():
            out, _ = attn(q, kv)
            return T.sum_all(T.mul(out, probe))

        report = T.finite_diff_check(f, [q, kv] + attn.parameters(), h=1e-5)
        assert report.max_rel_error < 1e-4, report.per_param


class TestEncoderLayer:
    rng = np.random.default_rng(12)

    def test_zeroed_projections_make_identity(self):
        layer = nn.EncoderLayer(6, 12, 2, self.rng)
        layer.attn.W_O.data[:] = 0.0
        layer.ffn.fc2.weight.data[:] = 0.0
        x = Tensor(self.rng.standard_normal((4, 6)))
        out = layer(x)
        assert np.array_equal(out.data, x.data)

    @pytest.mark.parametrize("l", [1, 4, 16])
    def test_shape_preserved(self, l):
        layer = nn.EncoderLayer(8, 16, 4, self.rng)
        out = layer(Tensor(self.rng.standard_normal((l, 8))))
        assert out.shape == (l, 8)

    def test_gradients_three_tokens_d8(self):
        layer = nn.EncoderLayer(8, 16, 2, self.rng)
        x = Tensor(self.rng.standard_normal((3, 8)), requires_grad=True)
        probe = Tensor(self.rng.standard_normal((3, 8)))

        def f():
            return T.sum_all(T.mul(layer(x), probe))

        report = T.finite_diff_check(f, [x] + layer.parameters(), h=1e-5)
        assert report.max_rel_error < 1e-4, report.per_param


class TestDecoderLayer:
    rng = np.random.default_rng(13)

    def test_causality_is_bitwise(self):
        layer = nn.DecoderLayer(8, 16, 2, self.rng)
        memory = Tensor(self.rng.standard_normal((5, 8)))
        y = self.rng.standard_normal((6, 8))
        base = layer(Tensor(y), memory).data
        for t in range(5):
            bumped = y.copy()
            bumped[t + 1:] += self.rng.standard_normal(
                bumped[t + 1:].shape) * 10.0
            out = layer(Tensor(bumped), memory).data
            assert np.array_equal(out[: t + 1], base[: t + 1])

    def test_single_token_self_attention(self):
        layer = nn.DecoderLayer(6, 12, 2, self.rng)
        memory = Tensor(self.rng.standard_normal((3, 6)))
        out = layer(Tensor(self.rng.standard_normal((1, 6))), memory)
        assert out.shape == (1, 6)

    def test_gradients(self):
        layer = nn.DecoderLayer(8, 16, 2, self.rng)
        y = Tensor(self.rng.standard_normal((3, 8)), requires_grad=True)
        memory = Tensor(self.rng.standard_normal((2, 8)), requires_grad=True)
        probe = Tensor(self.rng.standard_normal((3, 8)))

        def f():
            return T.sum_all(T.mul(layer(y, memory), probe))

        report = T.finite_diff_check(f, [y, memory] + layer.parameters(),
                                     h=1e-5)
        assert report.max_rel_error < 1e-4, report.per_param


class TestEmbedding:
    rng = np.random.default_rng(14)

    def test_empty_sequence_rejected(self):
        emb = nn.Embedding(10, 8, 4, self.rng)
        with pytest.raises(ValueError, match="empty"):
            emb([])

    def test_too_long_rejected(self):
        emb = nn.Embedding(10, 3, 4, self.rng)
        with pytest.raises(IndexError, match="exceeds"):
            emb([1, 2, 3, 4])

    def test_token_out_of_vocab_rejected(self):
        emb = nn.Embedding(10, 8, 4, self.rng)
        with pytest.raises(IndexError):
            emb([0, 10])

    def test_positional_additivity(self):
        emb = nn.Embedding(10, 8, 4, self.rng)
        out = emb([7, 7]).data
        pos = emb.position_table.data
        assert_allclose(out[1] - out[0], pos[1] - pos[0], atol=1e-15)

    def test_gradient_routes_to_used_rows_only(self):
        emb = nn.Embedding(6, 8, 3, self.rng)
        ids = [1, 4, 4]

        def f():
            rows = emb(ids)
            return T.sum_all(T.mul(rows, rows))

        report = T.finite_diff_check(f, [emb.token_table], h=1e-5)
        assert report.max_rel_error < 1e-4
        T.backward(f())
        unused = [0, 2, 3, 5]
        assert np.array_equal(emb.token_table.grad[unused],
                              np.zeros((4, 3)))
        T.zero_grads([emb.token_table])


class TestConv1d:
    rng = np.random.default_rng(15)

    def test_stride_arithmetic(self):
        conv = nn.Conv1d(3, 5, width=4, stride=2, rng=self.rng)
        out = conv(Tensor(self.rng.standard_normal((8, 3))))
        assert out.shape == (4, 5)

    def test_matches_direct_window_sums(self):
        conv = nn.Conv1d(2, 3, width=3, stride=2, rng=self.rng)
        x = self.rng.standard_normal((6, 2))
        out = conv(Tensor(x)).data
        padded = np.vstack([x, np.zeros((2, 2))])
        for i, start in enumerate(range(0, 6, 2)):
            window = padded[start: start + 3].reshape(-1)
            assert_allclose(out[i], window @ conv.weight.data
                            + conv.bias.data, atol=1e-12)

    def test_gradients(self):
        conv = nn.Conv1d(2, 3, width=3, stride=2, rng=self.rng)
        x = Tensor(self.rng.standard_normal((6, 2)), requires_grad=True)
        probe = Tensor(self.rng.standard_normal((3, 3)))

        def f():
            return T.sum_all(T.mul(conv(x), probe))

        report = T.finite_diff_check(f, [x] + conv.parameters(), h=1e-5)
        assert report.max_rel_error < 1e-4, report.per_param

    def test_channel_mismatch_raises(self):
        conv = nn.Conv1d(2, 3, width=3, stride=1, rng=self.rng)
        with pytest.raises(ValueError, match="channels"):
            conv(Tensor(np.zeros((4, 5))))


class TestParameterWalk:
    def test_named_parameters_unique_and_complete(self):
        rng = np.random.default_rng(16)
        layer = nn.DecoderLayer(8, 16, 2, rng)
        names = [n for n, _ in layer.named_parameters()]
        assert len(names) == len(set(names))
        # 3 norms x2, 2 attents x4, ffn 2 linears x2
        assert len(names) == 6 + 8 + 4
        assert "self_attn.W_Q" in names
        assert "ffn.fc1.weight" in names
