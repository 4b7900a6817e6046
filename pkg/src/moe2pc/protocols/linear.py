"""Share-times-plaintext matrix products through additive HE.

The client encrypts its share of x in the left encoding, the server adds its
own share, multiplies by the right-encoded weight block, subtracts a fresh
uniform mask polynomial R and returns the result. The client's share is the
extracted product, the server's share is the same coefficients of R.
"""

from __future__ import annotations

import math

import numpy as np

from ..he.poly import DimensionOverflow, encode_left, encode_right, extract_indices
from ..sharing import ArithShare, Party, pi_trunc
from ..transport import Tag


def block_plan(k: int, m: int, n: int, N: int) -> tuple[int, int]:
    """Rows per ciphertext and weight columns per product for a k x m by m x n product."""
    if m > N:
        raise DimensionOverflow(f"inner dimension {m} exceeds ring degree {N}")
    k_b = min(k, N // m)
    n_b = max(1, min(n, N // (k_b * m)))
    return k_b, n_b


def ct_count(k: int, m: int, n: int, N: int) -> tuple[int, int]:
    """(uploaded, returned) ciphertexts for one product."""
    k_b, n_b = block_plan(k, m, n, N)
    rows = math.ceil(k / k_b)
    return rows, rows * math.ceil(n / n_b)


def _check_engine(p: Party):
    if p.he is None:
        raise RuntimeError("secure matmul needs an HE engine on the party")
    if p.he.params.plaintext_bits != p.cfg.ell:
        raise ValueError("HE plaintext modulus must equal the sharing ring")


def secure_matmul_pt_batch(p: Party, xs: list[ArithShare], weights, ns: list[list[int]],
                           trunc: bool = True) -> list[list[ArithShare]]:
    """Products x_i @ W_ij for several left operands, each against several weights.

    ``weights[i][j]`` is the server's ring matrix (ignored on the client);
    ``ns[i][j]`` its column count, known to both parties. Each x_i is uploaded
    once. One upload message and one response message in total, then a single
    batched truncation.
    """
    _check_engine(p)
    he, cfg, N = p.he, p.cfg, p.he.N
    plans = []
    for x, n_list in zip(xs, ns):
        k, m = x.shape
        plans.append((k, m) + block_plan(k, m, max(n_list), N))

    if p.is_client:
        cts = []
        for x, (k, m, k_b, n_b) in zip(xs, plans):
            for r0 in range(0, k, k_b):
                cts.append(he.encrypt(encode_left(x.v[r0:r0 + k_b], n_b, N)))
        p.chan.send(Tag.HE_INPUT, he.serialize_many(cts))
        replies = iter(he.deserialize_many(p.chan.recv(Tag.HE_RESULT)))
        raw_out = []
        for (k, m, k_b, n_b), n_list in zip(plans, ns):
            per_x = []
            for n in n_list:
                out = np.zeros((k, n), dtype=np.uint64)
                for r0 in range(0, k, k_b):
                    rows = min(k_b, k - r0)
                    for c0 in range(0, n, n_b):
                        dec = he.decrypt(next(replies)).coeffs
                        blk = dec[extract_indices(k_b, m, n_b)].reshape(k_b, n_b)
                        out[r0:r0 + rows, c0:c0 + n_b] = blk[:rows, :min(n_b, n - c0)]
                per_x.append(out)
            raw_out.append(per_x)
    else:
        cts = iter(he.deserialize_many(p.chan.recv(Tag.HE_INPUT)))
        replies, raw_out = [], []
        for x, (k, m, k_b, n_b), w_list, n_list in zip(xs, plans, weights, ns):
            per_x = [np.zeros((k, n), dtype=np.uint64) for n in n_list]
            x_cts = []
            for r0 in range(0, k, k_b):
                x_cts.append(he.add_ct_pt(next(cts), encode_left(x.v[r0:r0 + k_b], n_b, N)))
            for j, (W, n) in enumerate(zip(w_list, n_list)):
                W = np.asarray(W, dtype=np.uint64)
                if W.shape != (m, n):
                    raise ValueError(f"weight shape {W.shape} does not match ({m}, {n})")
                for ri, r0 in enumerate(range(0, k, k_b)):
                    rows = min(k_b, k - r0)
                    for c0 in range(0, n, n_b):
                        blk = np.zeros((m, n_b), dtype=np.uint64)
                        blk[:, :min(n_b, n - c0)] = W[:, c0:c0 + n_b]
                        prod = he.mul_ct_pt(x_cts[ri], encode_right(blk, k_b, N))
                        R = cfg.random(p.rng, N)
                        replies.append(he.add_ct_pt(prod, cfg.reduce(np.uint64(0) - R)))
                        sh = R[extract_indices(k_b, m, n_b)].reshape(k_b, n_b)
                        per_x[j][r0:r0 + rows, c0:c0 + n_b] = sh[:rows, :min(n_b, n - c0)]
            raw_out.append(per_x)
        p.chan.send(Tag.HE_RESULT, he.serialize_many(replies))

    shares = [[ArithShare(v, p.role, cfg, x.scale + 1) for v in per_x] for x, per_x in zip(xs, raw_out)]
    if not trunc:
        return shares
    flat = [s for per_x in shares for s in per_x]
    sizes = [s.size for s in flat]
    joined = ArithShare(np.concatenate([s.v.ravel() for s in flat]), p.role, cfg, flat[0].scale)
    t = pi_trunc(p, joined)
    out, pos = [], 0
    it = iter(zip(flat, sizes))
    for per_x in shares:
        row = []
        for _ in per_x:
            s, sz = next(it)
            row.append(ArithShare(t.v[pos:pos + sz].reshape(s.shape), p.role, cfg, t.scale))
            pos += sz
        out.append(row)
    return out


def secure_matmul_pt(p: Party, x: ArithShare, W=None, n: int | None = None, trunc: bool = True) -> ArithShare:
    """<x> (k x m) times the server's plaintext W (m x n)."""
    if n is None:
        if W is None:
            raise ValueError("the client must pass the output width n")
        n = np.shape(W)[1]
    return secure_matmul_pt_batch(p, [x], [[W]], [[n]], trunc)[0][0]


def secure_matmul_pt_multi(p: Party, x: ArithShare, Ws, ns: list[int], trunc: bool = True) -> list[ArithShare]:
    """x against several weights with a single upload of x."""
    Ws = Ws if Ws is not None else [None] * len(ns)
    return secure_matmul_pt_batch(p, [x], [Ws], [ns], trunc)[0]
