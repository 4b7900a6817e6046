import numpy as np
import pytest

from conftest import split
from moe2pc.bench import moe_layer_session, random_experts
from moe2pc.fixed import DEFAULT, decode, encode
from moe2pc.he.engines import SemanticEngine
from moe2pc.he.poly import encode_right
from moe2pc.protocols.linear import block_plan
from moe2pc.protocols.moe import (
    expert_ffn_fixed, moe_fixed, moe_float, naive_dense_moe, oblivious_select, secure_sparse_moe,
)
from moe2pc.runner import run_two_party
from moe2pc.sharing import BoolShare, UnsupportedK, reconstruct

M, N_FF, T = 16, 32, 4


def reveal_layer(res):
    return reconstruct(res.client, res.server)


class TestSparse:
    @pytest.mark.parametrize("gate_scaling", [False, True])
    def test_matches_fixed(self, gate_scaling):
        res, x, g, experts = moe_layer_session(4, "secmoe", seed=3, d_model=M, d_ff=N_FF, tokens=T,
                                               gate_scaling=gate_scaling)
        out = DEFAULT.reduce(res.client + res.server)
        assert np.array_equal(out, moe_fixed(x, g, experts, gate_scaling))

    def test_float_shadow(self):
        res, x, g, experts = moe_layer_session(4, "secmoe", seed=4, d_model=M, d_ff=N_FF, tokens=T)
        real = [type(e)(decode(e.W1), decode(e.V), decode(e.W2)) for e in experts]
        out = decode(DEFAULT.reduce(res.client + res.server))
        assert np.abs(out - moe_float(decode(x), decode(g), real)).max() < 2.0 ** -8

    def test_forced_expert(self, rng):
        experts = random_experts(3, M, N_FF, rng)
        x = encode(rng.uniform(-1, 1, (3, M)))
        for j in range(3):
            g = encode(np.where(np.arange(3) == j, 2.0, -2.0) * np.ones((3, 1)))
            want = np.stack([expert_ffn_fixed(x[i:i + 1], experts[j])[0] for i in range(3)])
            assert np.array_equal(moe_fixed(x, g, experts), want)

    def test_single_expert_is_dense_ffn(self, rng):
        experts = random_experts(1, M, N_FF, rng)
        x = encode(rng.uniform(-1, 1, (2, M)))
        g = encode(np.zeros((2, 1)))
        assert np.array_equal(moe_fixed(x, g, experts), expert_ffn_fixed(x, experts[0]))

    def test_k2_rejected(self):
        xc, xs = split(encode(np.zeros((1, M))))
        gc, gs = split(encode(np.zeros((1, 2))))
        with pytest.raises(UnsupportedK):
            run_two_party(lambda p: secure_sparse_moe(p, p.arith(xc), p.arith(gc), n_experts=2, d_ff=N_FF, k=2),
                          he=SemanticEngine.create())


class TestDense:
    @pytest.mark.parametrize("gate_scaling", [False, True])
    def test_equals_sparse(self, gate_scaling):
        a = moe_layer_session(4, "secmoe", seed=5, d_model=M, d_ff=N_FF, tokens=T, gate_scaling=gate_scaling)[0]
        b = moe_layer_session(4, "dense", seed=5, d_model=M, d_ff=N_FF, tokens=T, gate_scaling=gate_scaling)[0]
        ya, yb = DEFAULT.reduce(a.client + a.server), DEFAULT.reduce(b.client + b.server)
        assert np.all(np.abs(DEFAULT.to_signed(ya) - DEFAULT.to_signed(yb)) <= 2)
        assert b.stats.total_bytes > a.stats.total_bytes


def selected_cts(E, idx, experts, m, n):
    """Server-side selected ciphertexts for a forced one-hot, decrypted by the key holder."""
    he = SemanticEngine.create()
    onehot = np.eye(E, dtype=np.uint8)[idx]
    mask = np.random.default_rng(E).integers(0, 2, onehot.shape, dtype=np.uint8)
    res = run_two_party(
        lambda p: oblivious_select(p, BoolShare(mask, p.role), None, n_experts=E, m=m, n=n),
        lambda p: oblivious_select(p, BoolShare(onehot ^ mask, p.role), experts, n_experts=E, m=m, n=n),
        he=he)
    return he, res


class TestObliviousSelect:
    def test_decrypts_to_selected_weights(self, rng):
        E, m, n = 4, 8, 16
        experts = random_experts(E, m, n, rng)
        idx = np.array([2, 0, 3])
        he, res = selected_cts(E, idx, experts, m, n)
        assert res.client is None
        _, nb = block_plan(1, m, n, he.N)
        for tau, j in enumerate(idx):
            got = he.decrypt(res.server["W1"][tau][0]).coeffs
            assert np.array_equal(got, encode_right(experts[j].W1[:, :nb], 1, he.N))

    def test_upload_is_independent_of_weight_dims(self, rng):
        sizes = []
        for m, n in [(8, 16), (32, 64)]:
            experts = random_experts(4, m, n, rng)
            _, res = selected_cts(4, np.array([1, 2]), experts, m, n)
            sizes.append(res.stats.total_bytes)
        assert sizes[0] == sizes[1]
