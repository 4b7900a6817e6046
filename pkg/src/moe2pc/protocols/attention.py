"""Multi-head self-attention on shares (output projection is applied by the caller)."""

from __future__ import annotations

import math

import numpy as np

from ..fixed import DEFAULT, FixedConfig, encode, fixed_matmul, ring_matmul, truncate_plain
from ..sharing import ArithShare, Party, pi_matmul, pi_trunc
from .linear import secure_matmul_pt_multi
from .nonlinear import EXP_SPEC, secure_softmax, softmax_fixed, softmax_float


def _split_heads(a, heads: int):
    T, d = a.shape[-2:]
    return a.reshape(T, heads, d // heads).swapaxes(0, 1)


def _score_shift(d_head: int, s: int) -> int | None:
    """Truncation shift that also applies 1/sqrt(d_head), if sqrt(d_head) is a power of two."""
    root = math.isqrt(d_head)
    if root * root == d_head and root & (root - 1) == 0:
        return s + root.bit_length() - 1
    return None


def _scale_scores(p: Party, raw: ArithShare, d_head: int) -> ArithShare:
    shift = _score_shift(d_head, p.cfg.scale_s)
    if shift is not None:
        return pi_trunc(p, raw, shift)
    return pi_trunc(p, pi_trunc(p, raw).mul_public(encode(1.0 / math.sqrt(d_head), p.cfg)))


def secure_attention(p: Party, x: ArithShare, wq=None, wk=None, wv=None, *, heads: int) -> ArithShare:
    """softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated (T x d)."""
    T, d = x.shape
    if d % heads:
        raise ValueError("model width must be divisible by the head count")
    dh = d // heads
    with p.section("attn/proj"):
        q, k, v = secure_matmul_pt_multi(p, x, None if wq is None else [wq, wk, wv], [d, d, d])
    qh = ArithShare(_split_heads(q.v, heads), p.role, p.cfg, q.scale)
    kh = ArithShare(_split_heads(k.v, heads), p.role, p.cfg, k.scale)
    vh = ArithShare(_split_heads(v.v, heads), p.role, p.cfg, v.scale)
    with p.section("attn/scores"):
        scores = _scale_scores(p, pi_matmul(p, qh, kh.swapaxes(-1, -2)), dh)
    probs = secure_softmax(p, scores, EXP_SPEC)
    with p.section("attn/context"):
        ctx = pi_trunc(p, pi_matmul(p, probs, vh))
    return ArithShare(ctx.v.swapaxes(0, 1).reshape(T, d), p.role, p.cfg, ctx.scale)


def attention_fixed(x, wq, wk, wv, heads: int, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    T, d = x.shape
    dh = d // heads
    q, k, v = (_split_heads(fixed_matmul(x, w, cfg), heads) for w in (wq, wk, wv))
    raw = ring_matmul(q, k.swapaxes(-1, -2), cfg)
    shift = _score_shift(dh, cfg.scale_s)
    if shift is not None:
        scores = truncate_plain(raw, shift, cfg)
    else:
        scores = truncate_plain(raw, cfg.scale_s, cfg)
        scores = truncate_plain(cfg.reduce(scores * encode(1.0 / math.sqrt(dh), cfg)), cfg.scale_s, cfg)
    probs = softmax_fixed(scores, EXP_SPEC, cfg)
    ctx = fixed_matmul(probs, v, cfg)
    return ctx.swapaxes(0, 1).reshape(T, d)


def attention_float(x, wq, wk, wv, heads: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    T, d = x.shape
    dh = d // heads
    q, k, v = (_split_heads(x @ w, heads) for w in (wq, wk, wv))
    probs = softmax_float(q @ k.swapaxes(-1, -2) / math.sqrt(dh), EXP_SPEC)
    return (probs @ v).swapaxes(0, 1).reshape(T, d)
