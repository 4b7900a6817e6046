"""Mixture-of-experts FFN layers: the sparse select-then-compute protocol and the dense baseline.

Each expert is a GeGLU block y = (GeLU(x W1) * (x V)) W2 with W1, V of size
m x n and W2 of size n x m. Exactly one expert is active per token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..fixed import DEFAULT, FixedConfig, fixed_matmul, fixed_mul
from ..he.poly import encode_left, encode_right, extract_indices
from ..sharing import (
    ArithShare, BoolShare, Party, UnsupportedK, cat, pi_B2A, pi_Mul, pi_MUX, pi_Topk, pi_trunc,
)
from ..transport import Tag
from .linear import block_plan, secure_matmul_pt_batch
from .nonlinear import EXP_SPEC, masked_softmax_fixed, secure_masked_softmax, softmax_float
from .piecewise import GELU_SPEC, gelu_fixed, gelu_plain, secure_gelu


@dataclass(frozen=True)
class ExpertWeights:
    W1: np.ndarray
    V: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        m, n = np.shape(self.W1)
        if np.shape(self.V) != (m, n) or np.shape(self.W2) != (n, m):
            raise ValueError("expert weights must be W1, V: m x n and W2: n x m")

    @property
    def dims(self) -> tuple[int, int]:
        return np.shape(self.W1)


# -- selection ---------------------------------------------------------------

def _token_slots(T: int, E: int, N: int) -> list[tuple[int, int]]:
    """(ciphertext index, coefficient offset) of each token's selector vector."""
    per_ct = N // E
    return [(tau // per_ct, (tau % per_ct) * E) for tau in range(T)]


def _weight_blocks(W, k_b: int, n_b: int, N: int) -> list[np.ndarray]:
    m, n = W.shape
    out = []
    for c0 in range(0, n, n_b):
        blk = np.zeros((m, n_b), dtype=np.uint64)
        blk[:, :min(n_b, n - c0)] = W[:, c0:c0 + n_b]
        out.append(encode_right(blk, k_b, N))
    return out


def oblivious_select(p: Party, onehot: BoolShare, experts=None, *, n_experts: int, m: int, n: int):
    """Turn the shared one-hot into encrypted selected weights held by the server.

    The selector is converted to arithmetic shares; the client uploads its
    share of all T x E selector entries packed into ciphertext coefficients.
    The server adds its share and forms, per token and weight block, the
    plaintext-weighted sum over experts of (selector coefficient x encoded
    weight block) without further communication.

    Returns, on the server, ``{"W1": [[ct per block] per token], "V": ..., "W2": ...}``;
    the client gets None.
    """
    he, N = p.he, p.he.N
    T, E = onehot.shape
    if E != n_experts:
        raise ValueError("one-hot width does not match the expert count")
    if E > N:
        raise ValueError("more experts than ciphertext slots")
    t = pi_B2A(p, onehot)
    slots = _token_slots(T, E, N)
    n_cts = slots[-1][0] + 1
    packed = np.zeros((n_cts, N), dtype=np.uint64)
    for tau, (ci, off) in enumerate(slots):
        packed[ci, off:off + E] = t.v[tau]
    if p.is_client:
        p.chan.send(Tag.HE_SELECT, he.serialize_many([he.encrypt(row) for row in packed]))
        return None
    cts = [he.add_ct_pt(ct, row) for ct, row in zip(he.deserialize_many(p.chan.recv(Tag.HE_SELECT)), packed)]
    _, nb_up = block_plan(1, m, n, N)
    _, nb_down = block_plan(1, n, m, N)
    enc = {
        "W1": [_weight_blocks(np.asarray(e.W1, dtype=np.uint64), 1, nb_up, N) for e in experts],
        "V": [_weight_blocks(np.asarray(e.V, dtype=np.uint64), 1, nb_up, N) for e in experts],
        "W2": [_weight_blocks(np.asarray(e.W2, dtype=np.uint64), 1, nb_down, N) for e in experts],
    }
    out = {}
    for name, per_expert in enc.items():
        nblocks = len(per_expert[0])
        out[name] = [
            [he.select_sum(cts[ci], off, [per_expert[i][b] for i in range(E)]) for b in range(nblocks)]
            for ci, off in slots
        ]
    return out


def _ctct_products(p: Party, x: ArithShare, selected, names: list[str], n_out: int) -> list[ArithShare]:
    """Per-token x_tau times each encrypted selected weight in ``names``; untruncated shares."""
    he, cfg, N = p.he, p.cfg, p.he.N
    T, m = x.shape
    _, n_b = block_plan(1, m, n_out, N)
    nblocks = math.ceil(n_out / n_b)
    idx = extract_indices(1, m, n_b)
    outs = [np.zeros((T, nblocks * n_b), dtype=np.uint64) for _ in names]
    if p.is_client:
        cts = [he.encrypt(encode_left(x.v[tau:tau + 1], n_b, N)) for tau in range(T)]
        p.chan.send(Tag.HE_INPUT, he.serialize_many(cts))
        replies = iter(he.deserialize_many(p.chan.recv(Tag.HE_RESULT)))
        for tau in range(T):
            for w in range(len(names)):
                for b in range(nblocks):
                    outs[w][tau, b * n_b:(b + 1) * n_b] = he.decrypt(next(replies)).coeffs[idx]
    else:
        x_cts = he.deserialize_many(p.chan.recv(Tag.HE_INPUT))
        replies = []
        for tau in range(T):
            ct_x = he.add_ct_pt(x_cts[tau], encode_left(x.v[tau:tau + 1], n_b, N))
            for w, name in enumerate(names):
                for b in range(nblocks):
                    prod = he.mul_ct_ct(ct_x, selected[name][tau][b])
                    R = cfg.random(p.rng, N)
                    replies.append(he.add_ct_pt(prod, cfg.reduce(np.uint64(0) - R)))
                    outs[w][tau, b * n_b:(b + 1) * n_b] = R[idx]
        p.chan.send(Tag.HE_RESULT, he.serialize_many(replies))
    return [ArithShare(o[:, :n_out], p.role, cfg, x.scale + 1) for o in outs]


def _check_k(k: int):
    if k != 1:
        raise UnsupportedK(f"only one active expert per token is supported, got k={k}")


def _gate_prob(p: Party, g: ArithShare, onehot: BoolShare) -> tuple[ArithShare, ArithShare]:
    """(selected expert probability, all masked probabilities)."""
    probs = secure_masked_softmax(p, g, onehot)
    return probs.sum(axis=-1, keepdims=True), probs


def secure_sparse_moe(p: Party, x: ArithShare, g: ArithShare, experts=None, *, n_experts: int, d_ff: int,
                      k: int = 1, gate_scaling: bool = False, gelu=secure_gelu) -> ArithShare:
    """Select the token's expert obliviously, then run one expert per token."""
    _check_k(k)
    if n_experts < 1:
        raise ValueError("need at least one expert")
    T, m = x.shape
    n = d_ff
    with p.section("moe/select"):
        _, onehot = pi_Topk(p, g)
        selected = oblivious_select(p, onehot, experts, n_experts=n_experts, m=m, n=n)
    with p.section("moe/compute"):
        u1, uv = _ctct_products(p, x, selected, ["W1", "V"], n)
        both = pi_trunc(p, cat([u1[None], uv[None]], axis=0))
        h = pi_Mul(p, gelu(p, both[0]), both[1])
        (y,) = _ctct_products(p, h, selected, ["W2"], m)
        y = pi_trunc(p, y)
    if gate_scaling:
        with p.section("moe/gate"):
            pr, _ = _gate_prob(p, g, onehot)
            y = pi_Mul(p, y, pr)
    return y


def naive_dense_moe(p: Party, x: ArithShare, g: ArithShare, experts=None, *, n_experts: int, d_ff: int,
                    k: int = 1, gate_scaling: bool = False, gelu=secure_gelu) -> ArithShare:
    """Baseline: run every expert on every token, then aggregate.

    Aggregation weights are the masked-softmax gate probabilities when
    ``gate_scaling`` is on, otherwise the shared one-hot selector, so the
    output matches :func:`secure_sparse_moe` under the same flag.
    """
    _check_k(k)
    if n_experts < 1:
        raise ValueError("need at least one expert")
    T, m = x.shape
    E, n = n_experts, d_ff
    with p.section("moe/select"):
        _, onehot = pi_Topk(p, g)
    with p.section("moe/compute"):
        ws = None if experts is None else [[w for e in experts for w in (e.W1, e.V)]]
        up = secure_matmul_pt_batch(p, [x], ws, [[n] * (2 * E)])[0]
        u1 = cat([up[2 * i][None] for i in range(E)], axis=0)
        uv = cat([up[2 * i + 1][None] for i in range(E)], axis=0)
        h = pi_Mul(p, gelu(p, u1), uv)
        ws2 = None if experts is None else [[e.W2] for e in experts]
        if ws2 is None:
            ws2 = [[None] for _ in range(E)]
        ys = secure_matmul_pt_batch(p, [h[i] for i in range(E)], ws2, [[m] for _ in range(E)])
        ys = cat([row[0][None] for row in ys], axis=0)  # E x T x m
    with p.section("moe/aggregate"):
        if gate_scaling:
            _, probs = _gate_prob(p, g, onehot)
            w = probs.swapaxes(0, 1).reshape(E, T, 1)
            terms = pi_Mul(p, ys, w)
        else:
            sel = BoolShare(onehot.bits.swapaxes(0, 1).reshape(E, T, 1), p.role)
            terms = pi_MUX(p, sel, ys)
        return terms.sum(axis=0)


# -- references ---------------------------------------------------------------

def _select_index(g, cfg: FixedConfig) -> np.ndarray:
    return np.argmax(cfg.to_signed(g), axis=-1)


def expert_ffn_fixed(x, e: ExpertWeights, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    u1 = fixed_matmul(x, e.W1, cfg)
    uv = fixed_matmul(x, e.V, cfg)
    return fixed_matmul(fixed_mul(gelu_fixed(u1, GELU_SPEC, cfg), uv, cfg), e.W2, cfg)


def moe_fixed(x, g, experts, gate_scaling: bool = False, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    """Plaintext ring-exact reference for both MoE protocols."""
    x = cfg.reduce(x)
    sel = _select_index(g, cfg)
    y = np.stack([expert_ffn_fixed(x[tau:tau + 1], experts[sel[tau]], cfg)[0] for tau in range(x.shape[0])])
    if gate_scaling:
        pr = cfg.reduce(masked_softmax_fixed(g, sel, EXP_SPEC, cfg).sum(-1, keepdims=True, dtype=np.uint64))
        y = fixed_mul(y, pr, cfg)
    return y


def moe_float(x, g, experts, gate_scaling: bool = False) -> np.ndarray:
    """Double-precision shadow with the same approximations (weights given as reals)."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    sel = np.argmax(g, axis=-1)
    rows = []
    for tau in range(x.shape[0]):
        e = experts[sel[tau]]
        u1 = x[tau] @ e.W1
        rows.append((gelu_plain(u1) * (x[tau] @ e.V)) @ e.W2)
    y = np.stack(rows)
    if gate_scaling:
        masked = np.where(np.arange(g.shape[-1]) == sel[:, None], g, -64.0)
        y = y * softmax_float(masked, EXP_SPEC).sum(-1, keepdims=True)
    return y


__all__ = [
    "ExpertWeights", "oblivious_select", "secure_sparse_moe", "naive_dense_moe",
    "expert_ffn_fixed", "moe_fixed", "moe_float",
]
