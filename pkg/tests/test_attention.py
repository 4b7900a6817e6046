import numpy as np

from conftest import split
from moe2pc.fixed import decode, encode
from moe2pc.he.engines import SemanticEngine
from moe2pc.protocols.attention import attention_fixed, attention_float, secure_attention
from moe2pc.runner import run_two_party
from moe2pc.sharing import reconstruct


class TestAttention:
    def test_secure_matches_fixed_and_float(self, rng):
        T, d, h = 8, 64, 4
        x = rng.uniform(-1, 1, (T, d))
        ws = [encode(rng.uniform(-0.1, 0.1, (d, d))) for _ in range(3)]
        xc, xs = split(encode(x))
        res = run_two_party(lambda p: secure_attention(p, p.arith(xc), heads=h),
                            lambda p: secure_attention(p, p.arith(xs), *ws, heads=h),
                            he=SemanticEngine.create())
        out = reconstruct(res.client, res.server)
        assert np.array_equal(out, attention_fixed(encode(x), *ws, h))
        assert np.abs(decode(out) - attention_float(x, *(decode(w) for w in ws), h)).max() < 2.0 ** -5

    def test_non_square_head_dim(self, rng):
        T, d, h = 4, 12, 2
        x = encode(rng.uniform(-1, 1, (T, d)))
        ws = [encode(rng.uniform(-0.2, 0.2, (d, d))) for _ in range(3)]
        xc, xs = split(x)
        res = run_two_party(lambda p: secure_attention(p, p.arith(xc), heads=h),
                            lambda p: secure_attention(p, p.arith(xs), *ws, heads=h),
                            he=SemanticEngine.create())
        assert np.array_equal(reconstruct(res.client, res.server), attention_fixed(x, *ws, h))
