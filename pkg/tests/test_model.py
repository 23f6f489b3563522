import struct

import numpy as np
import pytest

from cmser import numerics as nx
from cmser.errors import BadMagicError, ConfigError, MaskError, ShapeError, TruncatedFileError, VersionMismatchError
from cmser.layers import AffineLayer
from cmser.model import (FEATURE_PRESETS, MODEL_MAGIC, CrossModalModel, ModelConfig, clone_model,
                         count_params, forward, load_model, save_model)

from conftest import condition, random_batch


def expected_param_count(dims, h, n_classes, classifier_hidden=None):
    c = classifier_hidden or h
    m = len(dims)
    per_modality = sum(d * h + h + 2 * h + 2 * 3 * (h * h + h * h + h) + 2 * h for d in dims)
    attention = m * (m - 1) * 4 * (2 * h) ** 2
    d_f = 2 * h * m
    head = 2 * d_f + (d_f * c + c) + (c * n_classes + n_classes) + (d_f + 1)
    return per_modality + attention + head


class TestForward:
    def test_shapes_bimodal(self, rng):
        model = CrossModalModel(ModelConfig([("a", 5), ("b", 3)], hidden=8, n_classes=4))
        out = model(random_batch(rng, [5, 3], batch=2))
        assert out.logits.shape == (2, 4)
        assert out.aux.shape == (2, 1)
        assert out.fused.shape == (2, 32)

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_fused_width(self, rng, m):
        dims = [3, 4, 2][:m]
        cfg = ModelConfig([(f"m{i}", d) for i, d in enumerate(dims)], hidden=5, n_classes=3)
        model = CrossModalModel(cfg)
        assert cfg.fused_dim == 2 * 5 * m
        assert model(random_batch(rng, dims, batch=2)).fused.shape == (2, 10 * m)
        assert len(model.attention) == m * (m - 1)

    def test_identical_samples_identical_rows(self, tiny_bimodal, rng):
        batch = [(np.repeat(x[:1], 3, axis=0), np.repeat(mk[:1], 3, axis=0))
                 for x, mk in random_batch(rng, [3, 2])]
        logits = tiny_bimodal(batch).logits.value
        assert np.array_equal(logits[0], logits[1]) and np.array_equal(logits[0], logits[2])

    def test_deterministic(self, tiny_bimodal, rng):
        batch = random_batch(rng, [3, 2])
        assert np.array_equal(tiny_bimodal(batch).logits.value, tiny_bimodal(batch).logits.value)

    def test_padding_invariance(self, tiny_bimodal, rng):
        batch = random_batch(rng, [3, 2])
        base = tiny_bimodal(batch).logits.value
        padded = [(np.concatenate([x, np.zeros((3, 4, x.shape[2]))], axis=1),
                   np.concatenate([mk, np.zeros((3, 4), bool)], axis=1)) for x, mk in batch]
        assert np.max(np.abs(tiny_bimodal(padded).logits.value - base)) < 1e-8

    def test_zeroed_attention_equals_ablation(self, rng):
        cfg = ModelConfig([("a", 3), ("b", 2), ("c", 4)], hidden=4, n_classes=3, seed=5)
        full = CrossModalModel(cfg)
        ablated = CrossModalModel(ModelConfig(cfg.modalities, hidden=4, n_classes=3, seed=5,
                                              cross_attention=False))
        shared = dict(full.parameters())
        for name, node in ablated.parameters():
            node.value[...] = shared[name].value
        for layer in full.attention.values():
            layer.output.value[...] = 0.0
        batch = random_batch(rng, [3, 2, 4])
        assert np.array_equal(full(batch).logits.value, ablated(batch).logits.value)

    def test_errors(self, tiny_bimodal, rng):
        batch = random_batch(rng, [3, 2])
        with pytest.raises(ShapeError):
            tiny_bimodal(batch[:1])
        with pytest.raises(ShapeError):
            tiny_bimodal([batch[0], random_batch(rng, [5])[0]])
        x, mk = batch[1]
        mk = mk.copy()
        mk[1] = False
        with pytest.raises(MaskError):
            tiny_bimodal([batch[0], (x, mk)])
        with pytest.raises(ShapeError):
            tiny_bimodal([(np.zeros((0, 5, 3)), np.zeros((0, 5), bool)), (np.zeros((0, 5, 2)), np.zeros((0, 5), bool))])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig([])
        with pytest.raises(ConfigError):
            ModelConfig([("a", 1), ("b", 1), ("c", 1), ("d", 1)])
        with pytest.raises(ConfigError):
            ModelConfig([("a", 0)])

    def test_gradient_check(self):
        model = condition(CrossModalModel(ModelConfig([("a", 3), ("b", 2)], hidden=3, n_classes=3, seed=2)), 2)
        r = np.random.default_rng(2)
        batch = random_batch(r, [3, 2], batch=2, frames=4)
        onehot = np.eye(3)[[0, 2]]
        f = lambda: nx.mul(nx.sum(nx.mul(nx.log_softmax(model(batch).logits), onehot)), -0.5)
        err = nx.grad_check(f, model.parameter_nodes(), n_samples=80, rng=np.random.default_rng(0))
        assert err < 1e-4


class TestParamCount:
    def test_affine(self, rng):
        assert count_params(AffineLayer(3, 2, rng)) == 8

    def test_doubling_hidden(self):
        small = count_params(CrossModalModel(ModelConfig([("a", 6), ("b", 4)], hidden=4)))
        large = count_params(CrossModalModel(ModelConfig([("a", 6), ("b", 4)], hidden=8)))
        assert large > 2 * small

    @pytest.mark.parametrize("dims,h", [([3, 2], 4), ([3, 2, 5], 6), ([7], 3)])
    def test_formula_small(self, dims, h):
        cfg = ModelConfig([(f"m{i}", d) for i, d in enumerate(dims)], hidden=h, n_classes=5)
        assert count_params(CrossModalModel(cfg)) == expected_param_count(dims, h, 5)

    def test_formula_default_bimodal(self):
        dims = [FEATURE_PRESETS["whisper-large-v3"], FEATURE_PRESETS["roberta-large"]]
        cfg = ModelConfig([("speech", dims[0]), ("text", dims[1])])
        assert cfg.hidden == 512 and cfg.n_classes == 8 and cfg.classifier_hidden == 512
        assert count_params(CrossModalModel(cfg)) == expected_param_count(dims, 512, 8)


class TestSerialisation:
    def test_round_trip(self, tiny_bimodal, rng, tmp_path):
        path = tmp_path / "m.cmser"
        save_model(tiny_bimodal, path)
        loaded = load_model(path)
        assert loaded.config == tiny_bimodal.config
        for (n1, a), (n2, b) in zip(tiny_bimodal.parameters(), loaded.parameters()):
            assert n1 == n2 and np.array_equal(a.value, b.value)
        batch = random_batch(rng, [3, 2])
        assert np.array_equal(tiny_bimodal(batch).logits.value, loaded(batch).logits.value)

    def test_layout(self, tiny_bimodal, tmp_path):
        path = tmp_path / "m.cmser"
        save_model(tiny_bimodal, path)
        raw = path.read_bytes()
        assert raw[:6] == MODEL_MAGIC
        assert struct.unpack_from("<H", raw, 6)[0] == 1
        (clen,) = struct.unpack_from("<I", raw, 8)
        text = raw[12:12 + clen].decode("utf-8")
        assert "hidden=4" in text.splitlines()
        pos = 12 + clen
        (nlen,) = struct.unpack_from("<I", raw, pos)
        assert raw[pos + 4:pos + 4 + nlen].decode() == tiny_bimodal.parameters()[0][0]

    def test_bad_magic(self, tiny_bimodal, tmp_path):
        path = tmp_path / "m.cmser"
        save_model(tiny_bimodal, path)
        raw = bytearray(path.read_bytes())
        raw[0:2] = b"XX"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_model(path)

    def test_version_mismatch(self, tiny_bimodal, tmp_path):
        path = tmp_path / "m.cmser"
        save_model(tiny_bimodal, path)
        raw = bytearray(path.read_bytes())
        raw[6:8] = struct.pack("<H", 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            load_model(path)

    def test_truncation_names_tensor(self, tiny_bimodal, tmp_path):
        path = tmp_path / "m.cmser"
        save_model(tiny_bimodal, path)
        raw = path.read_bytes()
        params = tiny_bimodal.parameters()
        # walk the records to the middle of the third tensor's payload
        (clen,) = struct.unpack_from("<I", raw, 8)
        pos = 12 + clen
        for name, node in params[:2]:
            pos += 4 + len(name.encode()) + 4 + 4 * node.value.ndim + 8 * node.value.size
        name, node = params[2]
        cut = pos + 4 + len(name.encode()) + 4 + 4 * node.value.ndim + 8 * (node.value.size // 2)
        path.write_bytes(raw[:cut])
        with pytest.raises(TruncatedFileError, match=name.replace(".", r"\.")):
            load_model(path)

    def test_clone_is_independent(self, tiny_bimodal):
        copy = clone_model(tiny_bimodal)
        copy.parameter_nodes()[0].value[...] += 1.0
        assert not np.array_equal(copy.parameter_nodes()[0].value, tiny_bimodal.parameter_nodes()[0].value)
