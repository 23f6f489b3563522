import numpy as np
import pytest

from cmser import numerics as nx
from cmser.errors import MaskError, ShapeError
from cmser.layers import (AffineLayer, AttentionPooling, BiGRULayer, CrossAttentionLayer, LayerNorm,
                          attention_pool, cross_attention, gru_forward, pooling_weights)


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def reference_gru(cell, x, reverse=False):
    """Plain numpy recurrence over one unpadded ``F × d`` sequence."""
    p = {k: v.value for k, v in cell.parameters()}
    h = np.zeros(cell.hidden)
    out = np.zeros((x.shape[0], cell.hidden))
    steps = range(x.shape[0] - 1, -1, -1) if reverse else range(x.shape[0])
    for t in steps:
        z = sigmoid(x[t] @ p["w_update"] + h @ p["u_update"] + p["b_update"])
        r = sigmoid(x[t] @ p["w_reset"] + h @ p["u_reset"] + p["b_reset"])
        c = np.tanh(x[t] @ p["w_cand"] + r * (h @ p["u_cand"]) + p["b_cand"])
        h = (1 - z) * h + z * c
        out[t] = h
    return out


@pytest.fixture
def gru(rng):
    return BiGRULayer(3, 4, rng)


class TestGRU:
    def test_zero_parameters_zero_input(self, gru):
        for _, p in gru.parameters():
            p.value[...] = 0.0
        out = gru_forward(gru, np.zeros((6, 3)), np.ones(6, dtype=bool)).value
        assert out.shape == (6, 8) and np.all(out == 0)

    def test_single_frame_is_one_cell_step(self, gru, rng):
        x = rng.normal(size=(1, 3))
        out = gru_forward(gru, x, np.ones(1, dtype=bool)).value
        for cell, cols in ((gru.forward_cell, slice(0, 4)), (gru.backward_cell, slice(4, 8))):
            p = {k: v.value for k, v in cell.parameters()}
            z = sigmoid(x[0] @ p["w_update"] + p["b_update"])
            c = np.tanh(x[0] @ p["w_cand"] + p["b_cand"])
            assert np.allclose(out[0, cols], z * c, atol=1e-14)

    def test_matches_numpy_reference(self, gru, rng):
        for _, p in gru.parameters():
            p.value += 0.1 * rng.standard_normal(p.shape)
        x = rng.normal(size=(7, 3))
        out = gru_forward(gru, x, np.ones(7, dtype=bool)).value
        assert np.allclose(out[:, :4], reference_gru(gru.forward_cell, x), atol=1e-12)
        assert np.allclose(out[:, 4:], reference_gru(gru.backward_cell, x, reverse=True), atol=1e-12)

    def test_padding_leaves_prefix_unchanged(self, gru, rng):
        x = rng.normal(size=(5, 3))
        base = gru_forward(gru, x, np.ones(5, dtype=bool)).value
        for extra in (1, 4, 9):
            padded = np.vstack([x, np.zeros((extra, 3))])
            mask = np.r_[np.ones(5, bool), np.zeros(extra, bool)]
            out = gru_forward(gru, padded, mask).value
            assert np.max(np.abs(out[:5] - base)) < 1e-10
            assert np.all(out[5:] == 0)

    def test_reversal_symmetry_with_shared_cells(self, gru, rng):
        for (_, f), (_, b) in zip(gru.forward_cell.parameters(), gru.backward_cell.parameters()):
            b.value[...] = f.value
        x = rng.normal(size=(6, 3))
        mask = np.ones(6, dtype=bool)
        original = gru_forward(gru, x, mask).value
        flipped = gru_forward(gru, x[::-1].copy(), mask).value
        assert np.allclose(flipped[:, :4], original[::-1, 4:], atol=1e-14)

    def test_mask_length_mismatch(self, gru):
        with pytest.raises(ShapeError):
            gru_forward(gru, np.zeros((4, 3)), np.ones(5, dtype=bool))


class TestCrossAttention:
    @pytest.fixture
    def layer(self, rng):
        return CrossAttentionLayer(6, rng)

    def test_single_key(self, layer, rng):
        q, kv = rng.normal(size=(4, 6)), rng.normal(size=(1, 6))
        out = cross_attention(layer, q, kv, np.ones(1, dtype=bool)).value
        expected = kv @ layer.value.value @ layer.output.value
        assert np.allclose(out, np.repeat(expected, 4, axis=0), atol=1e-13)

    def test_zero_output_projection(self, layer, rng):
        layer.output.value[...] = 0.0
        out = cross_attention(layer, rng.normal(size=(3, 6)), rng.normal(size=(5, 6)), np.ones(5, bool)).value
        assert np.all(out == 0)

    def test_masking_all_but_one_key(self, layer, rng):
        q, kv = rng.normal(size=(3, 6)), rng.normal(size=(5, 6))
        for j in range(5):
            mask = np.zeros(5, dtype=bool)
            mask[j] = True
            masked = cross_attention(layer, q, kv, mask).value
            alone = cross_attention(layer, q, kv[j:j + 1], np.ones(1, bool)).value
            assert np.allclose(masked, alone, atol=1e-13)

    def test_matches_softmax_oracle(self, layer, rng):
        q, kv = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
        qp, kp, vp = q @ layer.query.value, kv @ layer.key.value, kv @ layer.value.value
        s = qp @ kp.T / np.sqrt(6)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        expected = w @ vp @ layer.output.value
        assert np.allclose(cross_attention(layer, q, kv, np.ones(4, bool)).value, expected, atol=1e-12)

    def test_key_padding_invariance(self, layer, rng):
        q, kv = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
        base = cross_attention(layer, q, kv, np.ones(4, bool)).value
        padded = np.vstack([kv, np.zeros((3, 6))])
        out = cross_attention(layer, q, padded, np.r_[np.ones(4, bool), np.zeros(3, bool)]).value
        assert np.max(np.abs(out - base)) < 1e-10

    def test_fully_masked_keys(self, layer):
        with pytest.raises(MaskError):
            cross_attention(layer, np.ones((2, 6)), np.ones((3, 6)), np.zeros(3, bool))

    def test_single_head(self, layer):
        assert layer.heads == 1


class TestAttentionPooling:
    @pytest.fixture
    def pool(self, rng):
        return AttentionPooling(5, rng)

    def test_identical_frames(self, pool, rng):
        v = rng.normal(size=5)
        out = attention_pool(pool, np.tile(v, (7, 1)), np.ones(7, bool)).value
        assert np.allclose(out[0], v, atol=1e-14)

    def test_single_frame(self, pool, rng):
        v = rng.normal(size=(1, 5))
        assert np.allclose(attention_pool(pool, v, np.ones(1, bool)).value, v, atol=1e-15)

    def test_orthogonal_query_gives_uniform_average(self, pool, rng):
        pool.query.value[...] = [1.0, 0, 0, 0, 0]
        frames = rng.normal(size=(4, 5))
        frames[:, 0] = 0.0
        out = attention_pool(pool, frames, np.ones(4, bool)).value
        assert np.allclose(out[0], frames.mean(axis=0), atol=1e-14)

    def test_weights_and_envelope(self, pool, rng):
        for _ in range(50):
            frames = rng.normal(size=(3, 6, 5))
            mask = rng.random((3, 6)) < 0.7
            mask[:, 0] = True
            frames[~mask] = 0.0
            w = pooling_weights(pool, frames, mask).value
            assert np.all(np.abs(w.sum(axis=1) - 1) < 1e-9)
            assert np.all(w[~mask] == 0)
            out = attention_pool(pool, frames, mask).value
            for b in range(3):
                valid = frames[b][mask[b]]
                assert np.all(out[b] >= valid.min(axis=0) - 1e-12)
                assert np.all(out[b] <= valid.max(axis=0) + 1e-12)

    def test_scores_use_query_and_scale(self, pool, rng):
        frames = rng.normal(size=(4, 5))
        s = frames @ pool.query.value / np.sqrt(5)
        expected = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        assert np.allclose(pooling_weights(pool, frames, np.ones(4, bool)).value[0], expected, atol=1e-15)

    def test_padding_invariance(self, pool, rng):
        frames = rng.normal(size=(4, 5))
        base = attention_pool(pool, frames, np.ones(4, bool)).value
        out = attention_pool(pool, np.vstack([frames, np.zeros((2, 5))]),
                             np.r_[np.ones(4, bool), np.zeros(2, bool)]).value
        assert np.max(np.abs(out - base)) < 1e-10

    def test_no_valid_frames(self, pool):
        with pytest.raises(MaskError):
            attention_pool(pool, np.zeros((3, 5)), np.zeros(3, bool))


class TestLayerGradients:
    def _check(self, layer, build, seed=0):
        r = np.random.default_rng(seed)
        for _, p in layer.parameters():
            p.value *= 2.0
            p.value += 0.1 * r.standard_normal(p.shape)
        probe = r.normal(size=build().shape)
        f = lambda: nx.sum(nx.tanh(nx.mul(build(), probe)))
        return nx.grad_check(f, [p for _, p in layer.parameters()])

    def test_affine(self, rng):
        layer = AffineLayer(4, 3, rng)
        x = rng.normal(size=(5, 4))
        assert self._check(layer, lambda: layer(x)) < 1e-4

    def test_layer_norm(self, rng):
        layer = LayerNorm(4)
        x = rng.normal(size=(5, 4))
        assert self._check(layer, lambda: layer(x)) < 1e-4

    def test_bigru(self, rng):
        layer = BiGRULayer(3, 3, rng)
        x = rng.normal(size=(2, 5, 3))
        mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
        x[~mask] = 0
        assert self._check(layer, lambda: layer(x, mask)) < 1e-4

    def test_cross_attention(self, rng):
        layer = CrossAttentionLayer(4, rng)
        q, kv = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4))
        mask = np.array([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0]], dtype=bool)
        assert self._check(layer, lambda: layer(q, kv, mask)) < 1e-4

    def test_pooling(self, rng):
        layer = AttentionPooling(4, rng)
        x = rng.normal(size=(2, 5, 4))
        mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
        x[~mask] = 0
        assert self._check(layer, lambda: layer(x, mask)) < 1e-4
