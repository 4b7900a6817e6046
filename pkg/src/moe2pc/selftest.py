"""Oracle-equivalence suites behind ``moe2pc selftest``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dealer import audit, deal, key_str
from .fixed import DEFAULT, FixedConfig, encode, fixed_mul, truncate_plain
from .he.engines import HeParams, RlweEngine, SemanticEngine
from .runner import dry_run, run_two_party
from .sharing import (
    BoolShare, Party, pi_B2A, pi_comp, pi_MUL, pi_Mul, pi_MUX, pi_trunc, reconstruct, reconstruct_bits, share,
)


@dataclass
class Check:
    name: str
    checked: int
    failed: int
    seconds: float = 0.0
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.failed == 0 and self.checked > 0

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.checked - self.failed}/{self.checked} ok in {self.seconds:.2f}s{extra}"


def _timed(name, fn, *args) -> Check:
    t0 = time.perf_counter()
    checked, failed, detail = fn(*args)
    return Check(name, checked, failed, time.perf_counter() - t0, detail)


def _pair(fn, cfg: FixedConfig, seed: int = 0):
    """Run ``fn(p)`` on both sides; return both results."""
    res = run_two_party(fn, seed=seed, cfg=cfg)
    return res.client, res.server


def _shared_pair(x, cfg: FixedConfig, seed: int):
    a, b = share(x, np.random.default_rng(seed), cfg)
    return a.v, b.v


# -- small-ring exhaustive ---------------------------------------------------

def comparison_grid(ell: int, seed: int = 0, thresholds=None):
    """pi_comp over every x in the valid domain against a few public thresholds."""
    cfg = FixedConfig(ell, min(4, ell - 1))
    quarter = 1 << (ell - 2)
    xs = np.arange(-quarter, quarter, dtype=np.int64)
    bs = thresholds if thresholds is not None else (-quarter // 2, -1, 0, 1, quarter // 3)
    x = cfg.from_signed(np.repeat(xs, len(bs)))
    b = cfg.from_signed(np.tile(np.asarray(bs, dtype=np.int64), xs.size))
    sc, ss = _shared_pair(x, cfg, seed)

    def fn(p: Party):
        return pi_comp(p, p.arith(sc if p.is_client else ss, 1), b)

    bc, bs_ = _pair(fn, cfg, seed)
    got = reconstruct_bits(bc, bs_)
    want = (cfg.to_signed(x) < cfg.to_signed(b)).astype(np.uint8)
    return x.size, int(np.count_nonzero(got != want)), f"ell={ell}"


def truncation_grid(ell: int, seed: int = 0, shift: int | None = None):
    """pi_trunc over every x with |x| < 2^(ell-2), for a given shift."""
    cfg = FixedConfig(ell, min(4, ell - 2))
    shift = cfg.scale_s if shift is None else shift
    quarter = 1 << (ell - 2)
    x = cfg.from_signed(np.arange(-quarter, quarter, dtype=np.int64))
    sc, ss = _shared_pair(x, cfg, seed)

    def fn(p: Party):
        return pi_trunc(p, p.arith(sc if p.is_client else ss, 2), shift)

    yc, ys = _pair(fn, cfg, seed)
    got = reconstruct(yc, ys)
    want = truncate_plain(x, shift, cfg)
    return x.size, int(np.count_nonzero(got != want)), f"ell={ell} shift={shift}"


# -- random 64-bit ------------------------------------------------------------

def _random_fixed(rng, n, cfg, lo=-8.0, hi=8.0):
    return encode(rng.uniform(lo, hi, n), cfg)


def random_mul(n: int, seed: int = 0, cfg: FixedConfig = DEFAULT):
    rng = np.random.default_rng([seed, 1])
    x, y = _random_fixed(rng, n, cfg), _random_fixed(rng, n, cfg)
    xc, xs = _shared_pair(x, cfg, seed)
    yc, ys = _shared_pair(y, cfg, seed + 1)

    def fn(p: Party):
        a = p.arith(xc if p.is_client else xs)
        b = p.arith(yc if p.is_client else ys)
        return pi_MUL(p, a, b), pi_Mul(p, a, b)

    (rc, mc), (rs, ms) = _pair(fn, cfg, seed)
    bad = np.count_nonzero(reconstruct(rc, rs) != cfg.reduce(x * y))
    bad += np.count_nonzero(reconstruct(mc, ms) != fixed_mul(x, y, cfg))
    return 2 * n, int(bad), "pi_MUL and pi_Mul"


def random_mux_b2a(n: int, seed: int = 0, cfg: FixedConfig = DEFAULT):
    rng = np.random.default_rng([seed, 2])
    bits = rng.integers(0, 2, n, dtype=np.uint8)
    val = cfg.random(rng, n)
    const = cfg.random(rng, n)
    mask = rng.integers(0, 2, n, dtype=np.uint8)
    vc, vs = _shared_pair(val, cfg, seed)

    def fn(p: Party):
        sel = BoolShare(mask if p.is_client else bits ^ mask, p.role)
        v = p.arith(vc if p.is_client else vs)
        return pi_MUX(p, sel, v), pi_MUX(p, sel, const), pi_B2A(p, sel)

    (a1, b1, c1), (a2, b2, c2) = _pair(fn, cfg, seed)
    sel = bits.astype(np.uint64)
    bad = np.count_nonzero(reconstruct(a1, a2) != cfg.reduce(sel * val))
    bad += np.count_nonzero(reconstruct(b1, b2) != cfg.reduce(sel * const))
    bad += np.count_nonzero(reconstruct(c1, c2) != sel)
    return 3 * n, int(bad), "pi_MUX shared, pi_MUX public, pi_B2A"


# -- dealer ---------------------------------------------------------------------

def _mixed_plan(cfg: FixedConfig):
    from .protocols.piecewise import secure_gelu
    from .sharing import pi_matmul

    def fn(p: Party):
        x = p.zeros((4, 8))
        secure_gelu(p, x)
        pi_matmul(p, x, p.zeros((8, 3)))
        pi_trunc(p, x, 7)

    return fn, fn


def dealer_audit(seed: int = 0, cfg: FixedConfig = DEFAULT):
    budget = dry_run(_mixed_plan(cfg), cfg=cfg)
    pc, ps = deal(budget, seed, cfg)
    rep = audit(pc, ps)
    return sum(c for c, _ in rep.values()), sum(f for _, f in rep.values()), f"{len(rep)} kinds"


def dealer_tamper_detected(seed: int = 0, cfg: FixedConfig = DEFAULT):
    """Negative test: a corrupted pool must fail its audit."""
    budget = dry_run(_mixed_plan(cfg), cfg=cfg)
    probes = [(("beaver",), "c"), (("and",), "c"), (("b2a",), "ra")]
    missed = 0
    for key, name in probes:
        pc, ps = deal(budget, seed, cfg)
        ps.tamper(key, name, 0)
        _, failed = audit(pc, ps)[key_str(key)]
        missed += failed == 0
    return len(probes), missed, "corrupted entries reported by audit"


# -- HE ---------------------------------------------------------------------------

def he_compositions(trials: int, seed: int = 0, N: int = 1024):
    """rlwe decrypt of random (add, ct x pt) compositions equals the semantic engine."""
    params = HeParams(ring_degree_N=N, plaintext_bits=16)
    rng = np.random.default_rng([seed, 3])
    rl = RlweEngine.keygen(params, rng)
    se = SemanticEngine.create(params)
    bad = 0
    t = params.plaintext_modulus
    for _ in range(trials):
        a, b, w = (rng.integers(0, t, N, dtype=np.uint64) for _ in range(3))
        w[rng.random(N) < 0.9] = 0
        op = rng.integers(3)
        outs = []
        for eng in (rl, se):
            ca, cb = eng.encrypt(a), eng.encrypt(b)
            if op == 0:
                ct = eng.add_ct_ct(ca, cb)
            elif op == 1:
                ct = eng.mul_ct_pt(ca, w)
            else:
                ct = eng.add_ct_pt(eng.mul_ct_pt(eng.sub_ct_ct(ca, cb), w), b)
            outs.append(eng.decrypt(ct).coeffs)
        bad += int(not np.array_equal(outs[0], outs[1]))
    return trials, bad, f"N={N}"


# -- protocol level -----------------------------------------------------------------

def gelu_oracle(n: int, seed: int = 0, cfg: FixedConfig = DEFAULT):
    from .protocols.piecewise import gelu_fixed, secure_gelu

    x = _random_fixed(np.random.default_rng([seed, 4]), n, cfg, -7.0, 7.0)
    xc, xs = _shared_pair(x, cfg, seed)
    yc, ys = _pair(lambda p: secure_gelu(p, p.arith(xc if p.is_client else xs)), cfg, seed)
    return n, int(np.count_nonzero(reconstruct(yc, ys) != gelu_fixed(x, cfg=cfg))), ""


def model_oracle(seed: int = 0, name: str = "tiny-moe-4e"):
    from .fixed import decode
    from .model import config_by_name, gen_weights, plain_forward
    from .runner import run_inference

    cfg = config_by_name(name)
    store = gen_weights(cfg, seed)
    tokens = np.random.default_rng([seed, 5]).uniform(-1, 1, (cfg.seq_len, cfg.d_model))
    out, _ = run_inference(cfg, store, tokens, seed=seed)
    want = plain_forward(cfg, store, encode(tokens))
    err = float(np.abs(decode(out) - decode(want)).max())
    return out.size, int(np.count_nonzero(out != want)), f"{name} max err {err:.2e}"


def run_suites(level: str = "quick", seed: int = 0, report=print) -> list[Check]:
    if level not in ("quick", "full"):
        raise ValueError(f"unknown selftest level {level!r}")
    full = level == "full"
    plan = [
        ("dealer audit", dealer_audit, seed),
        ("dealer tamper detection", dealer_tamper_detected, seed),
        (f"comparison exhaustive {12 if full else 10}-bit", comparison_grid, 12 if full else 10, seed),
        (f"truncation exhaustive {12 if full else 10}-bit", truncation_grid, 12 if full else 10, seed),
        ("multiplication random 64-bit", random_mul, 1000, seed),
        ("mux/b2a random 64-bit", random_mux_b2a, 1000, seed),
        ("he rlwe vs semantic", he_compositions, 200 if full else 40, seed),
        ("secure gelu vs fixed oracle", gelu_oracle, 4000 if full else 1000, seed),
        ("secure forward vs plain forward", model_oracle, seed, "toy-moe-8e" if full else "tiny-moe-4e"),
    ]
    out = []
    for name, fn, *args in plan:
        try:
            chk = _timed(name, fn, *args)
        except Exception as err:  # report and keep going
            chk = Check(name, 1, 1, 0.0, f"{type(err).__name__}: {err}")
        out.append(chk)
        if report:
            report(chk.line())
    return out
