import numpy as np
import pytest

from moe2pc.fixed import decode, encode
from moe2pc.model import (
    ConfigError, DimMismatch, MalformedWeights, ModelConfig, config_by_name, float_forward, gen_weights,
    load_weights, plain_forward, read_config, save_weights,
)
from moe2pc.protocols.moe import expert_ffn_fixed
from moe2pc.runner import run_inference


@pytest.fixture(scope="module")
def tiny():
    cfg = config_by_name("tiny-moe-4e")
    return cfg, gen_weights(cfg, 1)


class TestConfig:
    def test_presets(self):
        cfg = config_by_name("toy-moe-128e")
        assert (cfg.d_model, cfg.d_ff, cfg.num_heads, cfg.num_layers, cfg.n_experts) == (64, 128, 4, 2, 128)
        assert cfg.d_head == 16

    @pytest.mark.parametrize("bad", ["toy", "huge-moe-8e", "toy-moe-e"])
    def test_bad_names(self, bad):
        with pytest.raises(ConfigError):
            config_by_name(bad)

    def test_invariants(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, num_heads=4)
        with pytest.raises(ConfigError):
            ModelConfig(k_experts=2)
        with pytest.raises(ConfigError):
            ModelConfig(n_experts=0)


class TestWeights:
    def test_deterministic_and_in_range(self, tiny):
        cfg, store = tiny
        again = gen_weights(cfg, 1)
        other = gen_weights(cfg, 2)
        a, b, c = store.tensors(), again.tensors(), other.tensors()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a)
        assert all(np.abs(decode(v)).max() <= 0.1 for v in a.values())

    def test_round_trip(self, tiny, tmp_path):
        cfg, store = tiny
        save_weights(store, tmp_path)
        back = load_weights(tmp_path)
        assert back.config == cfg
        a, b = store.tensors(), back.tensors()
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
        assert read_config(tmp_path)[0] == cfg

    def test_truncated_blob(self, tiny, tmp_path):
        save_weights(tiny[1], tmp_path)
        blob = tmp_path / "layers.0.wq.bin"
        blob.write_bytes(blob.read_bytes()[:-3])
        with pytest.raises(MalformedWeights):
            load_weights(tmp_path)

    def test_manifest_dims_mismatch(self, tiny, tmp_path):
        save_weights(tiny[1], tmp_path)
        man = tmp_path / "manifest.txt"
        man.write_text(man.read_text().replace("layers.0.gate.bin 16x4", "layers.0.gate.bin 16x5"))
        with pytest.raises(DimMismatch):
            load_weights(tmp_path)

    def test_garbage_manifest(self, tmp_path):
        (tmp_path / "manifest.txt").write_text("hello\n")
        with pytest.raises(MalformedWeights):
            load_weights(tmp_path)


class TestForward:
    def test_secure_equals_plain(self, tiny):
        cfg, store = tiny
        tokens = np.random.default_rng(0).uniform(-1, 1, (cfg.seq_len, cfg.d_model))
        out, res = run_inference(cfg, store, tokens, seed=2)
        assert np.array_equal(out, plain_forward(cfg, store, encode(tokens)))
        assert res.budget is not None and sum(res.budget.values()) > 0

    def test_float_shadow(self):
        cfg = config_by_name("toy-moe-8e")
        store = gen_weights(cfg, 3)
        tokens = np.random.default_rng(1).uniform(-1, 1, (cfg.seq_len, cfg.d_model))
        diff = decode(plain_forward(cfg, store, encode(tokens))) - float_forward(cfg, store, tokens)
        assert np.abs(diff).max() < 2.0 ** -6

    def test_deterministic(self, tiny):
        cfg, store = tiny
        x = encode(np.ones((cfg.seq_len, cfg.d_model)) * 0.3)
        assert np.array_equal(plain_forward(cfg, store, x), plain_forward(cfg, store, x))

    def test_dim_mismatch(self, tiny):
        cfg, store = tiny
        with pytest.raises(DimMismatch):
            plain_forward(cfg, store, encode(np.zeros((8, 5))))

    def test_one_layer_one_expert_is_dense_block(self):
        from moe2pc.fixed import fixed_matmul, ring_add
        from moe2pc.protocols.attention import attention_fixed
        from moe2pc.protocols.nonlinear import layernorm_fixed

        cfg = ModelConfig(name="d", d_model=16, d_ff=32, num_heads=4, num_layers=1, n_experts=1)
        store = gen_weights(cfg, 0)
        lw = store.layers[0]
        x = encode(np.random.default_rng(0).uniform(-1, 1, (8, 16)))
        r = store.real
        a = attention_fixed(x, lw.wq, lw.wk, lw.wv, 4)
        h = layernorm_fixed(ring_add(x, fixed_matmul(a, lw.wo)), r(lw.ln1_g), r(lw.ln1_b))
        y = expert_ffn_fixed(h, lw.experts[0])
        want = layernorm_fixed(ring_add(h, y), r(lw.ln2_g), r(lw.ln2_b))
        assert np.array_equal(plain_forward(cfg, store, x), want)

    def test_dense_protocol_same_output(self, tiny):
        cfg, store = tiny
        tokens = np.random.default_rng(4).uniform(-1, 1, (cfg.seq_len, cfg.d_model))
        a, ra = run_inference(cfg, store, tokens, seed=1, pools="ondemand")
        b, rb = run_inference(cfg, store, tokens, seed=1, pools="ondemand", protocol="dense")
        assert np.array_equal(a, b)
        # at these dims and few experts dense is not necessarily the larger one
        assert rb.stats.total_bytes != ra.stats.total_bytes
