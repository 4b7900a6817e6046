"""Expert-count sweeps of a single MoE layer at fixed dims."""

from __future__ import annotations

import time

import numpy as np

from .dealer import ondemand_pools
from .fixed import DEFAULT, FixedConfig, encode
from .he.engines import HeParams, SemanticEngine
from .protocols.moe import ExpertWeights, naive_dense_moe, secure_sparse_moe
from .runner import run_two_party
from .sharing import share_input
from .transport import CLIENT, LAN, WAN, SERVER, modeled_time

BENCH_SCHEMA = 1
PROTOCOLS = {"secmoe": secure_sparse_moe, "dense": naive_dense_moe}


def random_experts(E: int, m: int, n: int, rng, cfg: FixedConfig = DEFAULT) -> list[ExpertWeights]:
    def w(*shape):
        return encode(rng.uniform(-0.1, 0.1, shape), cfg)
    return [ExpertWeights(w(m, n), w(m, n), w(n, m)) for _ in range(E)]


def moe_layer_session(E: int, protocol: str, *, seed: int = 0, d_model: int = 64, d_ff: int = 128,
                      tokens: int = 8, gate_scaling: bool = False, cfg: FixedConfig = DEFAULT,
                      he_params: HeParams | None = None):
    """Run one MoE layer on random inputs. Returns (RunResult, x, g, experts) with x, g in the ring."""
    moe_fn = PROTOCOLS[protocol]
    rng = np.random.default_rng([seed, E])
    experts = random_experts(E, d_model, d_ff, rng, cfg)
    x = encode(rng.uniform(-1, 1, (tokens, d_model)), cfg)
    g = encode(rng.uniform(-2, 2, (tokens, E)), cfg)

    def run(p, role_experts):
        xs = share_input(p, x if p.is_client else None, (tokens, d_model), owner=CLIENT)
        gs = share_input(p, x=None if p.is_client else g, shape=(tokens, E), owner=SERVER)
        y = moe_fn(p, xs, gs, role_experts, n_experts=E, d_ff=d_ff, gate_scaling=gate_scaling)
        return y.v

    res = run_two_party(lambda p: run(p, None), lambda p: run(p, experts), pools=ondemand_pools(seed, cfg),
                        seed=seed, cfg=cfg, he=SemanticEngine.create(he_params or HeParams(plaintext_bits=cfg.ell)))
    return res, x, g, experts


def bench_row(E: int, protocol: str, **kw) -> dict:
    t0 = time.perf_counter()
    res, *_ = moe_layer_session(E, protocol, **kw)
    st = res.stats
    return {
        "n_experts": E,
        "protocol": protocol,
        "online_bytes": st.total_bytes,
        "bytes_c_to_s": st.bytes_c_to_s,
        "bytes_s_to_c": st.bytes_s_to_c,
        "rounds": st.rounds,
        "wall_time_s": time.perf_counter() - t0,
        "modeled_lan_time_s": modeled_time(st, LAN),
        "modeled_wan_time_s": modeled_time(st, WAN),
    }


def flatness(rows: list[dict]) -> dict[str, float]:
    """comm(max E) / comm(min E) per protocol."""
    out = {}
    for proto in sorted({r["protocol"] for r in rows}):
        rs = sorted((r for r in rows if r["protocol"] == proto), key=lambda r: r["n_experts"])
        out[proto] = rs[-1]["online_bytes"] / rs[0]["online_bytes"]
    return out


def sweep(experts, protocols, *, seed: int = 0, d_model: int = 64, d_ff: int = 128, tokens: int = 8,
          progress=None) -> dict:
    rows = []
    for proto in protocols:
        for E in experts:
            rows.append(bench_row(E, proto, seed=seed, d_model=d_model, d_ff=d_ff, tokens=tokens))
            if progress:
                progress(rows[-1])
    return {
        "schema_version": BENCH_SCHEMA,
        "scope": "moe_layer",
        "dims": {"d_model": d_model, "d_ff": d_ff, "tokens": tokens},
        "seed": seed,
        "rows": rows,
        "flatness": flatness(rows),
    }
