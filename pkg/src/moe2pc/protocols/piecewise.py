"""Piecewise-polynomial GeLU: select the segment's coefficients, then evaluate once."""

from __future__ import annotations

from dataclasses import dataclass
from math import erf, sqrt

import numpy as np

from ..fixed import DEFAULT, FixedConfig, encode, fixed_mul, ring_add
from ..sharing import ArithShare, Party, cat, pi_Mul, pi_MUX, segment_indicators


@dataclass(frozen=True)
class PiecewiseSpec:
    """Breakpoints b_1 < ... < b_{m-1} and an m x (deg+1) coefficient table.

    Coefficients are ascending (constant term first). Segment j covers the
    half-open interval (b_j, b_{j+1}] with b_0 = -inf and b_m = +inf.
    """

    breakpoints: tuple
    coeffs: tuple

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        if np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        rows = [tuple(r) for r in self.coeffs]
        if len(rows) != b.size + 1:
            raise ValueError("need one coefficient row per segment")
        if len({len(r) for r in rows}) != 1:
            raise ValueError("coefficient rows must be zero-padded to the same length")

    @property
    def m_seg(self) -> int:
        return len(self.coeffs)

    @property
    def deg(self) -> int:
        return len(self.coeffs[0]) - 1

    @property
    def table(self) -> np.ndarray:
        return np.asarray(self.coeffs, dtype=float)

    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.table))

    def segment_of(self, x) -> np.ndarray:
        # counts breakpoints strictly below x, so x == b_j lands in the segment ending at b_j
        return np.searchsorted(np.asarray(self.breakpoints, dtype=float), np.asarray(x, dtype=float), side="left")


GELU_SPEC = PiecewiseSpec(
    breakpoints=(-5.0, -3.0, -1.0, 1.0, 3.0),
    coeffs=(
        (0.0, 0.0, 0.0),
        (-0.02986296, -0.01380208, -0.00158297),
        (-0.36497047, -0.23581369, -0.0384032),
        (0.00485947, 0.50000716, 0.3482604),
        (-0.36491015, 1.23575599, -0.03839009),
        (0.0, 1.0, 0.0),
    ),
)


def gelu_exact(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x * 0.5 * (1.0 + np.vectorize(erf)(x / sqrt(2.0)))


def gelu_plain(x, spec: PiecewiseSpec = GELU_SPEC) -> np.ndarray:
    """Real-valued piecewise evaluation (the approximation itself, no fixed point)."""
    x = np.asarray(x, dtype=float)
    c = spec.table[spec.segment_of(x)]
    powers = x[..., None] ** np.arange(spec.deg + 1)
    return (c * powers).sum(-1)


def _ring_breakpoints(spec: PiecewiseSpec, cfg: FixedConfig) -> np.ndarray:
    # 1{x < b + ulp} == 1{x <= b}: gives the half-open (b_j, b_{j+1}] segments
    return encode(spec.breakpoints, cfg) + np.uint64(1)


def _segment_plain_ring(x, spec: PiecewiseSpec, cfg: FixedConfig) -> np.ndarray:
    xs = cfg.to_signed(x)
    bs = cfg.to_signed(encode(spec.breakpoints, cfg))
    return (xs[..., None] > bs).sum(-1)


def gelu_fixed(x, spec: PiecewiseSpec = GELU_SPEC, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    """Fixed-point reference with the same truncation points as :func:`secure_gelu`."""
    x = cfg.reduce(x)
    coeffs = encode(spec.table, cfg)
    c = coeffs[_segment_plain_ring(x, spec, cfg)]
    x2 = fixed_mul(x, x, cfg)
    out = c[..., 0]
    if spec.deg >= 1:
        out = ring_add(out, fixed_mul(x, c[..., 1], cfg), cfg)
    power = x
    for d in range(2, spec.deg + 1):
        power = x2 if d == 2 else fixed_mul(power, x, cfg)
        out = ring_add(out, fixed_mul(power, c[..., d], cfg), cfg)
    return out


def _powers(p: Party, x: ArithShare, deg: int) -> list[ArithShare]:
    pw = [None, x]
    for d in range(2, deg + 1):
        pw.append(pi_Mul(p, x, x) if d == 2 else pi_Mul(p, pw[-1], x))
    return pw


def secure_gelu(p: Party, x: ArithShare, spec: PiecewiseSpec = GELU_SPEC) -> ArithShare:
    """Select-Then-Compute evaluation.

    Selection: m-1 comparisons against the public breakpoints, adjacent
    combination into a segment one-hot, then one public-constant MUX per
    non-zero table entry, summed per column. Compute: deg pi_Mul for the
    powers and coefficients (3 for a quadratic table).
    """
    cfg = p.cfg
    table = encode(spec.table, cfg)
    live_rows = [j for j in range(spec.m_seg) if np.any(spec.table[j] != 0)]
    with p.section("gelu/select"):
        ind = segment_indicators(p, x, _ring_breakpoints(spec, cfg), needed=live_rows)
        sels, consts, slots = [], [], []
        for j in live_rows:
            for d in range(spec.deg + 1):
                if spec.table[j, d] != 0:
                    sels.append(ind[j].reshape(*x.shape, 1))
                    consts.append(np.full(x.shape + (1,), table[j, d], dtype=np.uint64))
                    slots.append(d)
        picked = pi_MUX(p, cat(sels), np.concatenate(consts, axis=-1)) if sels else None
        coef = [p.zeros(x.shape) for _ in range(spec.deg + 1)]
        for i, d in enumerate(slots):
            coef[d] = coef[d] + picked[..., i]
    with p.section("gelu/compute"):
        pw = _powers(p, x, spec.deg)
        if spec.deg == 0:
            return coef[0]
        terms = pi_Mul(p, cat([pw[d].reshape(*x.shape, 1) for d in range(1, spec.deg + 1)]),
                       cat([coef[d].reshape(*x.shape, 1) for d in range(1, spec.deg + 1)]))
        out = coef[0]
        for i in range(spec.deg):
            out = out + terms[..., i]
    return out


def naive_piecewise_gelu(p: Party, x: ArithShare, spec: PiecewiseSpec = GELU_SPEC) -> ArithShare:
    """Per-segment baseline: evaluate every non-zero segment polynomial, then MUX the results.

    Each segment is evaluated on its own with generic secure polynomial
    evaluation: its powers of x and each coefficient term cost one pi_Mul,
    with the coefficients entering as (trivially) shared operands.
    """
    cfg = p.cfg
    table = encode(spec.table, cfg)
    live_rows = [j for j in range(spec.m_seg) if np.any(spec.table[j] != 0)]
    with p.section("gelu_naive/select"):
        ind = segment_indicators(p, x, _ring_breakpoints(spec, cfg), needed=live_rows)
    with p.section("gelu_naive/compute"):
        lhs, rhs, owners = [], [], []
        seg_deg = {j: max(d for d in range(spec.deg + 1) if spec.table[j, d] != 0) for j in live_rows}
        # powers, one independent chain per segment, batched per step
        chains = {j: [None, x] for j in live_rows}
        for d in range(2, spec.deg + 1):
            segs = [j for j in live_rows if seg_deg[j] >= d]
            if not segs:
                break
            prod = pi_Mul(p, cat([chains[j][-1].reshape(*x.shape, 1) for j in segs]),
                          cat([x.reshape(*x.shape, 1) for _ in segs]))
            for i, j in enumerate(segs):
                chains[j].append(prod[..., i])
        for j in live_rows:
            for d in range(1, spec.deg + 1):
                if spec.table[j, d] != 0:
                    lhs.append(chains[j][d].reshape(*x.shape, 1))
                    rhs.append(p.public(np.full(x.shape + (1,), table[j, d], dtype=np.uint64)))
                    owners.append(j)
        terms = pi_Mul(p, cat(lhs), cat(rhs)) if lhs else None
        seg_val = {j: p.public(np.full(x.shape, table[j, 0], dtype=np.uint64)) for j in live_rows}
        for i, j in enumerate(owners):
            seg_val[j] = seg_val[j] + terms[..., i]
        picked = pi_MUX(p, cat([ind[j].reshape(*x.shape, 1) for j in live_rows]),
                        cat([seg_val[j].reshape(*x.shape, 1) for j in live_rows]))
        out = picked[..., 0]
        for i in range(1, len(live_rows)):
            out = out + picked[..., i]
    return out
