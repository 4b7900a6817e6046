"""Exponential, softmax and LayerNorm on shares, with fixed-point and float references.

Every secure function here has a ``*_fixed`` twin that performs the same ring
operations in the clear (same truncation points, same iteration counts) and a
``*_float`` twin running the same approximation in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..fixed import DEFAULT, FixedConfig, encode, fixed_mul, ring_add, ring_sub, truncate_plain
from ..sharing import (
    SERVER, ArithShare, Party, cat, pi_comp, pi_MUL, pi_Mul, pi_MUX, pi_trunc, secure_max,
    segment_indicators, share_input,
)


@dataclass(frozen=True)
class ExpSpec:
    """exp(x) ~ (1 + x / 2^n_iter)^(2^n_iter) on [t_exp, 0], and 0 below t_exp."""

    t_exp: float = -13.0
    n_iter: int = 6

    def __post_init__(self):
        if not self.t_exp < 0:
            raise ValueError("clipping threshold must be negative")
        if self.n_iter < 1:
            raise ValueError("need at least one squaring")


EXP_SPEC = ExpSpec()

GOLDSCHMIDT_ITERS = 2
RECIP_INIT = (2.9142, 2.0)  # w0 = a - b * x on [0.5, 1)
NEWTON_ITERS = 3
RSQRT_INIT = (1.9987, 1.0775)  # y0 = a - b * v on [0.25, 1)
RSQRT_POWERS = range(-6, 9)  # thresholds 4^j
LN_EPS = 2.0 ** -12
MASK_LOGIT = 64.0


# -- shared helpers -----------------------------------------------------------

def _server_add(p: Party, x: ArithShare, c) -> ArithShare:
    """Add a value known only to the server."""
    if p.role == SERVER:
        return x._new(x.v + np.asarray(c, dtype=np.uint64))
    return x._new(np.broadcast_to(x.v, np.broadcast_shapes(x.shape, np.shape(c))).copy())


def _public_affine(p: Party, x: ArithShare, a: float, b: float) -> ArithShare:
    """a - b * x with public reals a, b."""
    cfg = p.cfg
    bx = pi_trunc(p, x.mul_public(encode(b, cfg)))
    return (-bx).add_public(encode(a, cfg))


def _select_constants(p: Party, v: ArithShare, thresholds, columns) -> list[ArithShare]:
    """For each column of per-segment public constants, shares of the entry for v's segment.

    Segments are [t_{i-1}, t_i) over the ascending ring thresholds.
    """
    thresholds = np.asarray(thresholds, dtype=np.uint64)
    columns = [np.asarray(c, dtype=np.uint64) for c in columns]
    if thresholds.size == 0:
        return [p.public(np.full(v.shape, c[0], dtype=np.uint64)) for c in columns]
    ind = segment_indicators(p, v, thresholds)
    nseg = thresholds.size + 1
    sel = cat([ind[j].reshape(*v.shape, 1) for j in range(nseg) for _ in columns])
    consts = np.stack([np.full(v.shape, c[j], dtype=np.uint64) for j in range(nseg) for c in columns], axis=-1)
    picked = pi_MUX(p, sel, consts)
    out = []
    for ci in range(len(columns)):
        acc = picked[..., ci]
        for j in range(1, nseg):
            acc = acc + picked[..., j * len(columns) + ci]
        out.append(acc)
    return out


def _segment_plain(v, thresholds, cfg) -> np.ndarray:
    return (cfg.to_signed(v)[..., None] >= cfg.to_signed(np.asarray(thresholds, dtype=np.uint64))).sum(-1)


def _recip_table(n: int, cfg: FixedConfig):
    J = max(0, math.ceil(math.log2(n))) if n > 1 else 0
    thresholds = encode([2.0 ** j for j in range(1, J + 1)], cfg) if J else np.zeros(0, dtype=np.uint64)
    scales = encode([2.0 ** -(i + 1) for i in range(J + 1)], cfg)
    return thresholds, scales


def _rsqrt_table(cfg: FixedConfig):
    thresholds = encode([4.0 ** j for j in RSQRT_POWERS], cfg)
    nseg = len(RSQRT_POWERS) + 1
    top = RSQRT_POWERS[0]  # segment i covers [4^(top-1+i), 4^(top+i))
    norm = encode([4.0 ** -(top + i) for i in range(nseg)], cfg)
    post = encode([2.0 ** -(top + i) for i in range(nseg)], cfg)
    return thresholds, norm, post


# -- exponential --------------------------------------------------------------

def secure_exp(p: Party, x: ArithShare, spec: ExpSpec = EXP_SPEC) -> ArithShare:
    """exp on non-positive shares: clipping bit, then n_iter squarings of 1 + x/2^n."""
    cfg = p.cfg
    clip = pi_comp(p, x, encode(spec.t_exp, cfg))
    y = pi_trunc(p, x, spec.n_iter).add_public(encode(1.0, cfg))
    for _ in range(spec.n_iter):
        y = pi_Mul(p, y, y)
    return pi_MUX(p, clip.invert(), y)


def exp_fixed(x, spec: ExpSpec = EXP_SPEC, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    x = cfg.reduce(x)
    y = ring_add(truncate_plain(x, spec.n_iter, cfg), encode(1.0, cfg), cfg)
    for _ in range(spec.n_iter):
        y = fixed_mul(y, y, cfg)
    keep = cfg.to_signed(x) >= cfg.to_signed(encode(spec.t_exp, cfg))
    return np.where(keep, y, np.uint64(0))


def exp_float(x, spec: ExpSpec = EXP_SPEC) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = (1.0 + x / 2.0 ** spec.n_iter) ** (2 ** spec.n_iter)
    return np.where(x >= spec.t_exp, y, 0.0)


# -- reciprocal ---------------------------------------------------------------

def secure_reciprocal(p: Party, d: ArithShare, max_value: int) -> ArithShare:
    """1/d for shares of d in [1, max_value]: normalise to [0.5, 1), Goldschmidt, rescale."""
    cfg = p.cfg
    thresholds, scales = _recip_table(max_value, cfg)
    (scale,) = _select_constants(p, d, thresholds, [scales])
    xh = pi_Mul(p, d, scale)
    w = _public_affine(p, xh, *RECIP_INIT)
    one = encode(1.0, cfg)
    e = (-pi_Mul(p, xh, w)).add_public(one)
    for it in range(GOLDSCHMIDT_ITERS):
        last = it == GOLDSCHMIDT_ITERS - 1
        if last:
            w = pi_Mul(p, w, e.add_public(one))
        else:
            both = pi_Mul(p, cat([w[..., None], e[..., None]]), cat([e.add_public(one)[..., None], e[..., None]]))
            w, e = both[..., 0], both[..., 1]
    return pi_Mul(p, w, scale)


def reciprocal_fixed(d, max_value: int, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    thresholds, scales = _recip_table(max_value, cfg)
    scale = scales[_segment_plain(d, thresholds, cfg)]
    xh = fixed_mul(d, scale, cfg)
    a, b = RECIP_INIT
    one = encode(1.0, cfg)
    w = ring_sub(encode(a, cfg), fixed_mul(xh, encode(b, cfg), cfg), cfg)
    e = ring_sub(one, fixed_mul(xh, w, cfg), cfg)
    for it in range(GOLDSCHMIDT_ITERS):
        if it == GOLDSCHMIDT_ITERS - 1:
            w = fixed_mul(w, ring_add(e, one, cfg), cfg)
        else:
            w, e = fixed_mul(w, ring_add(e, one, cfg), cfg), fixed_mul(e, e, cfg)
    return fixed_mul(w, scale, cfg)


def reciprocal_float(d, max_value: int) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    J = max(0, math.ceil(math.log2(max_value))) if max_value > 1 else 0
    seg = (d[..., None] >= 2.0 ** np.arange(1, J + 1)).sum(-1) if J else np.zeros(d.shape, dtype=int)
    scale = 2.0 ** -(seg + 1.0)
    xh = d * scale
    a, b = RECIP_INIT
    w = a - b * xh
    e = 1.0 - xh * w
    for it in range(GOLDSCHMIDT_ITERS):
        w, e = w * (1.0 + e), e * e
    return w * scale


# -- softmax ------------------------------------------------------------------

def secure_softmax(p: Party, x: ArithShare, spec: ExpSpec = EXP_SPEC) -> ArithShare:
    """Row softmax over the last axis."""
    n = x.shape[-1]
    with p.section("softmax"):
        m = secure_max(p, x)
        z = x - m.reshape(*m.shape, 1)
        e = secure_exp(p, z, spec)
        d = e.sum(axis=-1)
        r = secure_reciprocal(p, d, n)
        return pi_Mul(p, e, r.reshape(*r.shape, 1))


def softmax_fixed(x, spec: ExpSpec = EXP_SPEC, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    x = cfg.reduce(x)
    n = x.shape[-1]
    m = cfg.from_signed(cfg.to_signed(x).max(-1, keepdims=True))
    e = exp_fixed(ring_sub(x, m, cfg), spec, cfg)
    d = cfg.reduce(e.sum(-1, dtype=np.uint64))
    r = reciprocal_fixed(d, n, cfg)
    return fixed_mul(e, r[..., None], cfg)


def softmax_float(x, spec: ExpSpec = EXP_SPEC) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    e = exp_float(x - x.max(-1, keepdims=True), spec)
    return e * reciprocal_float(e.sum(-1), x.shape[-1])[..., None]


def secure_masked_softmax(p: Party, g: ArithShare, onehot, spec: ExpSpec = EXP_SPEC) -> ArithShare:
    """Softmax over gate scores with every unselected entry pushed to -64 (clipped to 0)."""
    cfg = p.cfg
    lifted = g.add_public(encode(MASK_LOGIT, cfg))
    masked = pi_MUX(p, onehot, lifted).add_public(encode(-MASK_LOGIT, cfg))
    return secure_softmax(p, masked, spec)


def masked_softmax_fixed(g, sel_index, spec: ExpSpec = EXP_SPEC, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    g = cfg.reduce(g)
    oh = np.arange(g.shape[-1]) == np.asarray(sel_index)[..., None]
    masked = np.where(oh, g, encode(-MASK_LOGIT, cfg))
    return softmax_fixed(masked, spec, cfg)


# -- inverse square root and LayerNorm ----------------------------------------

def secure_rsqrt(p: Party, v: ArithShare) -> ArithShare:
    """1/sqrt(v) for v in [2^-12, 2^18): normalise into [0.25, 1), Newton, rescale."""
    cfg = p.cfg
    thresholds, norm, post = _rsqrt_table(cfg)
    a, b = _select_constants(p, v, thresholds, [norm, post])
    vh = pi_Mul(p, v, a)
    y = _public_affine(p, vh, *RSQRT_INIT)
    for _ in range(NEWTON_ITERS):
        y2 = pi_Mul(p, y, y)
        half_t = pi_trunc(p, pi_Mul(p, vh, y2), 1)
        y = pi_Mul(p, y, (-half_t).add_public(encode(1.5, cfg)))
    return pi_Mul(p, y, b)


def rsqrt_fixed(v, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    thresholds, norm, post = _rsqrt_table(cfg)
    seg = _segment_plain(v, thresholds, cfg)
    vh = fixed_mul(v, norm[seg], cfg)
    a, b = RSQRT_INIT
    y = ring_sub(encode(a, cfg), fixed_mul(vh, encode(b, cfg), cfg), cfg)
    for _ in range(NEWTON_ITERS):
        y2 = fixed_mul(y, y, cfg)
        half_t = truncate_plain(fixed_mul(vh, y2, cfg), 1, cfg)
        y = fixed_mul(y, ring_sub(encode(1.5, cfg), half_t, cfg), cfg)
    return fixed_mul(y, post[seg], cfg)


def rsqrt_float(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    top = RSQRT_POWERS[0]
    seg = (v[..., None] >= 4.0 ** np.asarray(list(RSQRT_POWERS), dtype=float)).sum(-1)
    vh = v * 4.0 ** -(top + seg)
    a, b = RSQRT_INIT
    y = a - b * vh
    for _ in range(NEWTON_ITERS):
        y = y * (1.5 - 0.5 * vh * y * y)
    return y * 2.0 ** -(top + seg)


def secure_layernorm(p: Party, x: ArithShare, gamma=None, beta=None) -> ArithShare:
    """Row LayerNorm with server-private gamma/beta (the client passes None)."""
    cfg = p.cfg
    d = x.shape[-1]
    if d < 2:
        raise ValueError("LayerNorm needs at least two features")
    inv_d = encode(1.0 / d, cfg)
    with p.section("layernorm"):
        g = share_input(p, encode(gamma, cfg) if p.role == SERVER else None, shape=(d,), owner=SERVER)
        mean = pi_trunc(p, x.sum(axis=-1, keepdims=True).mul_public(inv_d))
        c = x - mean
        ss = pi_trunc(p, pi_MUL(p, c, c).sum(axis=-1, keepdims=True))
        var = pi_trunc(p, ss.mul_public(inv_d)).add_public(encode(LN_EPS, cfg))
        r = secure_rsqrt(p, var)
        normed = pi_Mul(p, c, r)
        out = pi_Mul(p, normed, g)
        return _server_add(p, out, encode(beta, cfg) if p.role == SERVER else np.zeros(d, dtype=np.uint64))


def layernorm_fixed(x, gamma, beta, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    x = cfg.reduce(x)
    d = x.shape[-1]
    inv_d = encode(1.0 / d, cfg)
    s = cfg.reduce(x.sum(-1, keepdims=True, dtype=np.uint64))
    mean = fixed_mul(s, inv_d, cfg)
    c = ring_sub(x, mean, cfg)
    ss = truncate_plain(cfg.reduce((c * c).sum(-1, keepdims=True, dtype=np.uint64)), cfg.scale_s, cfg)
    var = ring_add(fixed_mul(ss, inv_d, cfg), encode(LN_EPS, cfg), cfg)
    r = rsqrt_fixed(var, cfg)
    normed = fixed_mul(c, r, cfg)
    return ring_add(fixed_mul(normed, encode(gamma, cfg), cfg), encode(beta, cfg), cfg)


def layernorm_float(x, gamma, beta) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    c = x - x.mean(-1, keepdims=True)
    var = (c * c).mean(-1, keepdims=True) + LN_EPS
    return c * rsqrt_float(var) * np.asarray(gamma) + np.asarray(beta)
