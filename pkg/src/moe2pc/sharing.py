"""Additive / boolean secret sharing and the two-party subprotocols.

Every protocol function takes the calling :class:`Party` first. Both parties
run the same function with their own shares; message order is identical on
both sides, which keeps transcripts transport independent.

Scale tracking: an :class:`ArithShare` carries ``scale`` = the power of 2^s
its ring value is multiplied by (0 for raw integers such as selector bits,
1 for fixed-point values, 2 for un-truncated products). Mixing scales in an
addition raises :class:`ScaleError` while checking is on.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from .dealer import CorrelationPool
from .fixed import DEFAULT, FixedConfig
from .transport import CLIENT, SERVER, Endpoint, Tag

__all__ = [
    "CLIENT", "SERVER", "ArithShare", "BoolShare", "Party", "ScaleError",
    "share", "reconstruct", "reconstruct_bits", "share_input", "reveal",
    "pi_MUL", "pi_trunc", "pi_Mul", "pi_and", "pi_comp", "pi_B2A", "pi_MUX",
    "pi_Topk", "pi_onehot", "secure_max", "segment_indicators", "pi_matmul",
    "UnsupportedK", "cat",
]

_SCALE_CHECK = True


def set_scale_check(on: bool) -> bool:
    global _SCALE_CHECK
    prev, _SCALE_CHECK = _SCALE_CHECK, on
    return prev


class ScaleError(AssertionError):
    pass


class UnsupportedK(ValueError):
    pass


def _check_scale(a: int, b: int, what: str):
    if _SCALE_CHECK and a != b:
        raise ScaleError(f"{what}: scale mismatch {a} vs {b}")


class ArithShare:
    """One party's additive share of a ring tensor."""

    __slots__ = ("v", "owner", "cfg", "scale")

    def __init__(self, v, owner: int, cfg: FixedConfig = DEFAULT, scale: int = 1):
        self.v = cfg.reduce(v)
        self.owner = owner
        self.cfg = cfg
        self.scale = scale

    def _new(self, v, scale=None):
        return ArithShare(v, self.owner, self.cfg, self.scale if scale is None else scale)

    @property
    def shape(self):
        return self.v.shape

    @property
    def size(self):
        return self.v.size

    def __add__(self, other):
        if isinstance(other, ArithShare):
            _check_scale(self.scale, other.scale, "add")
            return self._new(self.v + other.v)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, ArithShare):
            _check_scale(self.scale, other.scale, "sub")
            return self._new(self.v - other.v)
        return NotImplemented

    def __neg__(self):
        return self._new(np.uint64(0) - self.v)

    def __getitem__(self, idx):
        return self._new(self.v[idx])

    def reshape(self, *shape):
        return self._new(self.v.reshape(*shape))

    def swapaxes(self, a, b):
        return self._new(np.swapaxes(self.v, a, b))

    def sum(self, axis=None, keepdims=False):
        return self._new(self.v.sum(axis=axis, keepdims=keepdims, dtype=np.uint64))

    def broadcast_to(self, shape):
        return self._new(np.broadcast_to(self.v, shape).copy())

    def add_public(self, c, scale: int | None = None):
        """Add a public ring value (only the client's share changes)."""
        if scale is not None:
            _check_scale(self.scale, scale, "add_public")
        if self.owner == CLIENT:
            return self._new(self.v + np.asarray(c, dtype=np.uint64))
        return self._new(np.broadcast_to(self.v, np.broadcast_shapes(self.v.shape, np.shape(c))).copy())

    def mul_int(self, k):
        """Multiply by a public integer (no change of scale)."""
        k = np.asarray(k)
        if k.dtype.kind == "i":
            k = k.astype(np.int64).view(np.uint64)
        return self._new(self.v * k.astype(np.uint64))

    def mul_public(self, c, scale_add: int = 1):
        """Multiply by public ring values carrying ``scale_add`` fractional units."""
        return self._new(self.v * np.asarray(c, dtype=np.uint64), self.scale + scale_add)

    def __repr__(self):
        return f"ArithShare(owner={self.owner}, shape={self.shape}, scale={self.scale})"


class BoolShare:
    """One party's XOR share of a bit tensor (uint8 0/1)."""

    __slots__ = ("bits", "owner")

    def __init__(self, bits, owner: int):
        self.bits = np.asarray(bits, dtype=np.uint8)
        self.owner = owner

    @property
    def shape(self):
        return self.bits.shape

    def __xor__(self, other):
        if isinstance(other, BoolShare):
            return BoolShare(self.bits ^ other.bits, self.owner)
        return NotImplemented

    def xor_public(self, c):
        if self.owner == CLIENT:
            return BoolShare(self.bits ^ np.asarray(c, dtype=np.uint8), self.owner)
        return BoolShare(np.broadcast_to(self.bits, np.broadcast_shapes(self.bits.shape, np.shape(c))).copy(), self.owner)

    def and_public(self, c):
        return BoolShare(self.bits & np.asarray(c, dtype=np.uint8), self.owner)

    def invert(self):
        return self.xor_public(np.uint8(1))

    def __getitem__(self, idx):
        return BoolShare(self.bits[idx], self.owner)

    def reshape(self, *shape):
        return BoolShare(self.bits.reshape(*shape), self.owner)

    def __repr__(self):
        return f"BoolShare(owner={self.owner}, shape={self.shape})"


def cat(shares, axis=-1):
    first = shares[0]
    if isinstance(first, BoolShare):
        return BoolShare(np.concatenate([s.bits for s in shares], axis=axis), first.owner)
    for s in shares[1:]:
        _check_scale(first.scale, s.scale, "cat")
    return first._new(np.concatenate([s.v for s in shares], axis=axis))


# -- plain helpers ------------------------------------------------------------

def share(x, rng: np.random.Generator, cfg: FixedConfig = DEFAULT, scale: int = 1):
    """Split ``x`` into (client share, server share); the client keeps the mask."""
    x = cfg.reduce(x)
    mask = cfg.random(rng, x.shape)
    return ArithShare(mask, CLIENT, cfg, scale), ArithShare(x - mask, SERVER, cfg, scale)


def reconstruct(a: ArithShare, b: ArithShare) -> np.ndarray:
    return a.cfg.reduce(a.v + b.v)


def reconstruct_bits(a: BoolShare, b: BoolShare) -> np.ndarray:
    return a.bits ^ b.bits


# -- party --------------------------------------------------------------------

class Party:
    """A protocol session: one role, one channel endpoint, one correlation pool."""

    def __init__(self, role: int, chan: Endpoint, pool: CorrelationPool, cfg: FixedConfig = DEFAULT,
                 seed: int = 0, he=None, trunc_mode: str = "exact"):
        self.role = role
        self.chan = chan
        self.pool = pool
        self.cfg = cfg
        self.rng = np.random.default_rng([seed, role])
        self.he = he
        self.trunc_mode = trunc_mode
        self.counters: Counter = Counter()

    @property
    def is_client(self) -> bool:
        return self.role == CLIENT

    def count(self, op: str, n: int):
        self.counters[op] += 1
        self.counters[op + ".elems"] += int(n)

    def section(self, name: str):
        return self.chan.section(name)

    # wire helpers
    def _ring_bytes(self, arr) -> bytes:
        return np.ascontiguousarray(arr, dtype=np.uint64).astype(self.cfg.wire_dtype).tobytes()

    def _ring_from(self, raw: bytes, shape) -> np.ndarray:
        return np.frombuffer(raw, dtype=self.cfg.wire_dtype).astype(np.uint64).reshape(shape)

    def exchange_ring(self, tag, arr) -> np.ndarray:
        arr = np.asarray(arr, dtype=np.uint64)
        return self._ring_from(self.chan.exchange(tag, self._ring_bytes(arr)), arr.shape)

    def exchange_bits(self, tag, bits) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.uint8)
        raw = self.chan.exchange(tag, np.packbits(bits.ravel()).tobytes())
        return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=bits.size).reshape(bits.shape)

    def exchange_mixed(self, tag, arr, bits):
        arr = np.asarray(arr, dtype=np.uint64)
        bits = np.asarray(bits, dtype=np.uint8)
        ring_raw = self._ring_bytes(arr)
        raw = self.chan.exchange(tag, ring_raw + np.packbits(bits.ravel()).tobytes())
        cut = len(ring_raw)
        peer_bits = np.unpackbits(np.frombuffer(raw[cut:], dtype=np.uint8), count=bits.size).reshape(bits.shape)
        return self._ring_from(raw[:cut], arr.shape), peer_bits

    def send_ring(self, tag, arr):
        self.chan.send(tag, self._ring_bytes(arr))

    def recv_ring(self, tag, shape) -> np.ndarray:
        return self._ring_from(self.chan.recv(tag), shape)

    def open(self, sh: ArithShare, tag=Tag.REVEAL) -> np.ndarray:
        return self.cfg.reduce(sh.v + self.exchange_ring(tag, sh.v))

    def arith(self, v, scale=1) -> ArithShare:
        return ArithShare(v, self.role, self.cfg, scale)

    def zeros(self, shape, scale=1) -> ArithShare:
        return self.arith(np.zeros(shape, dtype=np.uint64), scale)

    def public(self, c, scale=1) -> ArithShare:
        """Trivial sharing of a public value (client holds it, server holds 0)."""
        c = np.asarray(c, dtype=np.uint64)
        return self.arith(c if self.is_client else np.zeros_like(c), scale)


def share_input(p: Party, x=None, shape=None, owner: int = CLIENT, scale: int = 1) -> ArithShare:
    """Owner secret-shares its private tensor; the peer receives a uniform share."""
    if p.role == owner:
        x = p.cfg.reduce(x)
        mask = p.cfg.random(p.rng, x.shape)
        p.send_ring(Tag.SHARE_INPUT, x - mask)
        return p.arith(mask, scale)
    return p.arith(p.recv_ring(Tag.SHARE_INPUT, shape), scale)


def reveal(p: Party, sh: ArithShare, to: int | None = None):
    """Open a shared tensor to both parties, or only to ``to``."""
    if to is None:
        return p.open(sh)
    if p.role == to:
        return p.cfg.reduce(sh.v + p.recv_ring(Tag.REVEAL, sh.shape))
    p.send_ring(Tag.REVEAL, sh.v)
    return None


# -- arithmetic ---------------------------------------------------------------

def pi_MUL(p: Party, x: ArithShare, y: ArithShare) -> ArithShare:
    """Beaver multiplication; result is the raw ring product (no truncation)."""
    shape = np.broadcast_shapes(x.shape, y.shape)
    xv = np.broadcast_to(x.v, shape).ravel()
    yv = np.broadcast_to(y.v, shape).ravel()
    n = xv.size
    p.count("pi_MUL", n)
    t = p.pool.take(("beaver",), n)
    d = p.cfg.reduce(xv - t["a"])
    e = p.cfg.reduce(yv - t["b"])
    peer = p.exchange_ring(Tag.MUL_OPEN, np.concatenate([d, e]))
    D = d + peer[:n]
    E = e + peer[n:]
    z = t["c"] + D * t["b"] + E * t["a"]
    if p.is_client:
        z = z + D * E
    return ArithShare(z.reshape(shape), p.role, p.cfg, x.scale + y.scale)


def _lt_public(p: Party, c: np.ndarray, rbits: BoolShare) -> BoolShare:
    """Shares of 1{c < r} for public ``c`` and bit-shared ``r`` (LSB first).

    Log-depth prefix comparison: per bit, g = r_i & ~c_i and e = ~(r_i ^ c_i);
    adjacent (hi, lo) nodes merge as (g_hi ^ e_hi & g_lo, e_hi & e_lo).
    """
    n, nbits = rbits.shape
    if nbits == 0:
        return BoolShare(np.zeros(n, dtype=np.uint8), p.role)
    cb = ((c[:, None] >> np.arange(nbits, dtype=np.uint64)) & np.uint64(1)).astype(np.uint8)
    G = rbits.bits & (cb ^ 1)
    E = rbits.bits ^ (cb ^ 1) if p.is_client else rbits.bits.copy()
    while G.shape[1] > 1:
        w = G.shape[1]
        npairs, odd = divmod(w, 2)
        g_lo, g_hi = G[:, 0:2 * npairs:2], G[:, 1:2 * npairs:2]
        e_lo, e_hi = E[:, 0:2 * npairs:2], E[:, 1:2 * npairs:2]
        if w == 2:
            z = pi_and(p, BoolShare(e_hi, p.role), BoolShare(g_lo, p.role)).bits
            G = g_hi ^ z
            break
        z = pi_and(p, BoolShare(np.concatenate([e_hi, e_hi], axis=1), p.role),
                   BoolShare(np.concatenate([g_lo, e_lo], axis=1), p.role)).bits
        G_new, E_new = g_hi ^ z[:, :npairs], z[:, npairs:]
        if odd:
            G_new = np.concatenate([G_new, G[:, -1:]], axis=1)
            E_new = np.concatenate([E_new, E[:, -1:]], axis=1)
        G, E = G_new, E_new
    return BoolShare(G[:, 0], p.role)


def pi_trunc(p: Party, x: ArithShare, shift: int | None = None, mode: str | None = None) -> ArithShare:
    """Arithmetic right shift of a shared value by ``shift`` bits.

    Exact mode (default): requires |x| < 2^(ell-2). The shifted input
    x' = x + 2^(ell-2) is non-negative below 2^(ell-1), so opening c = x' + r
    reveals the wrap as (r_msb and not c_msb); the borrow out of the low
    ``shift`` bits comes from a prefix comparison against the dealt bits of r.

    Local mode: each party shifts its own share (off by one ulp at most, fails
    with probability ~|x|/2^ell).
    """
    cfg = p.cfg
    shift = cfg.scale_s if shift is None else shift
    new_scale = x.scale - 1 if shift >= cfg.scale_s else x.scale
    mode = mode or p.trunc_mode
    n = x.size
    p.count("pi_trunc", n)
    if mode == "local":
        if p.is_client:
            out = cfg.from_signed(cfg.to_signed(x.v) >> shift)
        else:
            out = cfg.reduce(np.uint64(0) - cfg.from_signed(cfg.to_signed(np.uint64(0) - x.v) >> shift))
        return ArithShare(out, p.role, cfg, new_scale)
    if not 0 <= shift <= cfg.ell - 2:
        raise ValueError(f"shift {shift} out of range for ell={cfg.ell}")
    ell = cfg.ell
    t = p.pool.take(("trunc", shift), n)
    xv = x.v.ravel()
    if p.is_client:
        xv = xv + np.uint64(1 << (ell - 2))
    masked = cfg.reduce(xv + t["r"])
    c = cfg.reduce(masked + p.exchange_ring(Tag.TRUNC_OPEN, masked))
    c_low = c & np.uint64((1 << shift) - 1)
    c_high = c >> np.uint64(shift)
    c_msb = c >> np.uint64(ell - 1)
    borrow = pi_B2A(p, _lt_public(p, c_low, BoolShare(t["rbits"], p.role)))
    wrap = (np.uint64(1) - c_msb) * t["rmsb"]
    out = np.uint64(0) - t["rhigh"] + wrap * np.uint64((1 << (ell - shift)) % (1 << 64)) - borrow.v
    if p.is_client:
        out = out + c_high - np.uint64(1 << (ell - 2 - shift))
    return ArithShare(out.reshape(x.shape), p.role, cfg, new_scale)


def pi_Mul(p: Party, x: ArithShare, y: ArithShare) -> ArithShare:
    """Fixed-point multiplication: truncation of the Beaver product."""
    p.count("pi_Mul", int(np.prod(np.broadcast_shapes(x.shape, y.shape))))
    return pi_trunc(p, pi_MUL(p, x, y))


# -- boolean ------------------------------------------------------------------

def pi_and(p: Party, x: BoolShare, y: BoolShare) -> BoolShare:
    shape = x.shape
    n = int(np.prod(shape))
    p.count("pi_and", n)
    t = p.pool.take(("and",), n)
    d = x.bits.ravel() ^ t["a"]
    e = y.bits.ravel() ^ t["b"]
    peer = p.exchange_bits(Tag.AND_OPEN, np.concatenate([d, e]))
    D = d ^ peer[:n]
    E = e ^ peer[n:]
    z = t["c"] ^ (D & t["b"]) ^ (E & t["a"])
    if p.is_client:
        z ^= D & E
    return BoolShare(z.reshape(shape), p.role)


def pi_comp(p: Party, x: ArithShare, b) -> BoolShare:
    """Shares of 1{x < b} (signed) for public ring value(s) ``b``.

    Requires |x - b| < 2^(ell-1): the result is the MSB of x - b, obtained as
    msb(c) ^ msb(r) ^ 1{c_low < r_low} with c = x - b + r opened.
    """
    if _SCALE_CHECK and x.scale > 1:
        raise ScaleError("comparison on an untruncated product")
    cfg = p.cfg
    ell = cfg.ell
    z = x.add_public(np.uint64(0) - np.asarray(b, dtype=np.uint64))
    shape = z.shape
    n = z.size
    p.count("pi_comp", n)
    t = p.pool.take(("cmp", ell), n)
    masked = cfg.reduce(z.v.ravel() + t["r"])
    c = cfg.reduce(masked + p.exchange_ring(Tag.CMP_OPEN, masked))
    c_low = c & np.uint64((1 << (ell - 1)) - 1)
    c_msb = (c >> np.uint64(ell - 1)).astype(np.uint8)
    lt = _lt_public(p, c_low, BoolShare(t["rbits"], p.role))
    out = lt.bits ^ t["rmsb"]
    if p.is_client:
        out = out ^ c_msb
    return BoolShare(out.reshape(shape), p.role)


def pi_B2A(p: Party, t: BoolShare) -> ArithShare:
    """Boolean to arithmetic conversion of bits; output is the raw 0/1 ring value."""
    n = int(np.prod(t.shape))
    p.count("pi_B2A", n)
    c = p.pool.take(("b2a",), n)
    e = t.bits.ravel() ^ c["rb"]
    E = (e ^ p.exchange_bits(Tag.B2A_OPEN, e)).astype(np.uint64)
    out = (np.uint64(1) - np.uint64(2) * E) * c["ra"]
    if p.is_client:
        out = out + E
    return ArithShare(out.reshape(t.shape), p.role, p.cfg, 0)


def pi_MUX(p: Party, sel: BoolShare, operand, scale: int = 1) -> ArithShare:
    """Shares of (sel ? operand : 0).

    ``operand`` is either an ArithShare (costs one ring element and one bit per
    direction) or a public ring tensor carrying ``scale`` (costs one bit).
    """
    cfg = p.cfg
    if isinstance(operand, ArithShare):
        shape = np.broadcast_shapes(sel.shape, operand.shape)
        s = np.broadcast_to(sel.bits, shape).ravel()
        b = np.broadcast_to(operand.v, shape).ravel()
        n = s.size
        p.count("pi_MUX", n)
        c = p.pool.take(("mux",), n)
        e = s ^ c["rb"]
        f = cfg.reduce(b - c["v"])
        pf, pe = p.exchange_mixed(Tag.MUX_OPEN, f, e)
        E = (e ^ pe).astype(np.uint64)
        F = cfg.reduce(f + pf)
        rb_share = F * c["ra"] + c["w"]
        out = E * b + (np.uint64(1) - np.uint64(2) * E) * rb_share
        return ArithShare(out.reshape(shape), p.role, cfg, operand.scale)
    const = np.asarray(operand, dtype=np.uint64)
    shape = np.broadcast_shapes(sel.shape, const.shape)
    s = np.broadcast_to(sel.bits, shape).ravel()
    n = s.size
    p.count("pi_MUX", n)
    c = p.pool.take(("muxc",), n)
    e = s ^ c["rb"]
    E = (e ^ p.exchange_bits(Tag.MUX_OPEN, e)).astype(np.uint64)
    bit = (np.uint64(1) - np.uint64(2) * E) * c["ra"]
    if p.is_client:
        bit = bit + E
    out = bit * np.broadcast_to(const, shape).ravel()
    return ArithShare(out.reshape(shape), p.role, cfg, scale)


# -- selection ----------------------------------------------------------------

def _tournament(p: Party, x: ArithShare, track: bool):
    """Pairwise max tree along the last axis; ties keep the lower index."""
    lead = x.shape[:-1]
    E = x.shape[-1]
    vals = [x[..., j] for j in range(E)]
    ohs = [np.ones(lead + (1,), dtype=np.uint8) if p.is_client else np.zeros(lead + (1,), dtype=np.uint8)
           for _ in range(E)] if track else None
    while len(vals) > 1:
        npairs = len(vals) // 2
        left = cat([v[..., None] for v in vals[0:2 * npairs:2]])
        right = cat([v[..., None] for v in vals[1:2 * npairs:2]])
        # 1{left < right}: pick right only on strict improvement
        c = pi_comp(p, left - right, np.uint64(0))
        best = left + pi_MUX(p, c, right - left)
        new_vals = [best[..., j] for j in range(npairs)]
        if track:
            xs, ys = [], []
            for j in range(npairs):
                lo, hi = ohs[2 * j], ohs[2 * j + 1]
                cj = c.bits[..., j:j + 1]
                ncj = cj ^ np.uint8(1) if p.is_client else cj
                xs += [lo, hi]
                ys += [np.broadcast_to(ncj, lo.shape), np.broadcast_to(cj, hi.shape)]
            z = pi_and(p, BoolShare(np.concatenate(xs, axis=-1), p.role),
                       BoolShare(np.concatenate(ys, axis=-1), p.role)).bits
            new_ohs, pos = [], 0
            for j in range(npairs):
                w = ohs[2 * j].shape[-1] + ohs[2 * j + 1].shape[-1]
                new_ohs.append(z[..., pos:pos + w])
                pos += w
        if len(vals) % 2:
            new_vals.append(vals[-1])
            if track:
                new_ohs.append(ohs[-1])
        vals = new_vals
        if track:
            ohs = new_ohs
    onehot = BoolShare(ohs[0], p.role) if track else None
    return vals[0], onehot


def pi_Topk(p: Party, g: ArithShare, k: int = 1):
    """(max value, one-hot of argmax) along the last axis; only k = 1 is supported."""
    if k != 1:
        raise UnsupportedK(f"top-k with k={k} is not supported (k must be 1)")
    if g.shape[-1] < 1:
        raise ValueError("need at least one score")
    p.count("pi_Topk", int(np.prod(g.shape[:-1])))
    return _tournament(p, g, track=True)


def pi_onehot(p: Party, g: ArithShare, k: int = 1) -> BoolShare:
    return pi_Topk(p, g, k)[1]


def secure_max(p: Party, x: ArithShare) -> ArithShare:
    return _tournament(p, x, track=False)[0]


def segment_indicators(p: Party, x: ArithShare, breakpoints, needed=None) -> dict[int, BoolShare]:
    """Boolean one-hot over the segments cut by ascending public ``breakpoints``.

    Segment j covers [b_{j-1}, b_j) with b_{-1} = -inf and b_{m-1} = +inf. All
    comparisons 1{x < b_j} run in one batch; segment j's indicator is
    ~cmp_{j-1} & cmp_j. Only the segments listed in ``needed`` are formed.
    """
    bps = np.asarray(breakpoints, dtype=np.uint64)
    m = bps.size + 1
    needed = list(range(m)) if needed is None else sorted(needed)
    xs = x.reshape(*x.shape, 1).broadcast_to(x.shape + (bps.size,)) if bps.size else None
    cmp = pi_comp(p, xs, bps) if bps.size else None
    out: dict[int, BoolShare] = {}
    inner = [j for j in needed if 0 < j < m - 1]
    if 0 in needed:
        out[0] = cmp[..., 0] if m > 1 else BoolShare(
            np.full(x.shape, 1 if p.is_client else 0, dtype=np.uint8), p.role)
    if m > 1 and (m - 1) in needed:
        out[m - 1] = cmp[..., m - 2].invert()
    if inner:
        lo = cat([cmp[..., j - 1].invert().reshape(x.shape + (1,)) for j in inner])
        hi = cat([cmp[..., j].reshape(x.shape + (1,)) for j in inner])
        z = pi_and(p, lo, hi)
        for i, j in enumerate(inner):
            out[j] = z[..., i]
    return dict(sorted(out.items()))


def pi_matmul(p: Party, X: ArithShare, Y: ArithShare) -> ArithShare:
    """Share-by-share matrix product via dealt matrix triples (batched over leading dims)."""
    *lead, m, k = X.shape
    *lead_y, k2, n = Y.shape
    if k != k2 or tuple(lead) != tuple(lead_y):
        raise ValueError(f"matmul shape mismatch {X.shape} x {Y.shape}")
    batch = int(np.prod(lead)) if lead else 1
    p.count("pi_matmul", batch * m * n)
    t = p.pool.take(("mat", m, k, n), batch)
    A, B, C = t["A"], t["B"], t["C"]
    xv = X.v.reshape(batch, m, k)
    yv = Y.v.reshape(batch, k, n)
    d = p.cfg.reduce(xv - A)
    e = p.cfg.reduce(yv - B)
    peer = p.exchange_ring(Tag.MATMUL_OPEN, np.concatenate([d.ravel(), e.ravel()]))
    D = p.cfg.reduce(d + peer[:d.size].reshape(d.shape))
    E = p.cfg.reduce(e + peer[d.size:].reshape(e.shape))
    z = C + np.matmul(D, B) + np.matmul(A, E)
    if p.is_client:
        z = z + np.matmul(D, E)
    return ArithShare(z.reshape(*lead, m, n), p.role, p.cfg, X.scale + Y.scale)
