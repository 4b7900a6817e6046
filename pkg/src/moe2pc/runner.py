"""Drive both parties of a protocol in one process (threads) or over TCP."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .dealer import Budget, CountingPool, deal, ondemand_pools
from .fixed import DEFAULT, FixedConfig
from .sharing import CLIENT, SERVER, Party
from .transport import ChannelStats, connect_inproc


class PeerFailure(RuntimeError):
    """The other party's thread raised; carries the original exception."""


@dataclass
class RunResult:
    client: Any
    server: Any
    stats: ChannelStats
    counters: dict = field(default_factory=dict)
    budget: Budget | None = None
    wall_s: float = 0.0


def run_two_party(client_fn: Callable[[Party], Any], server_fn: Callable[[Party], Any] | None = None, *,
                  pools=None, seed: int = 0, cfg: FixedConfig = DEFAULT, he=None, timeout: float = 600.0,
                  transcript: bool = False, trunc_mode: str = "exact") -> RunResult:
    """Run ``client_fn`` and ``server_fn`` against each other over an in-process channel.

    Each function receives its :class:`Party`. When ``server_fn`` is None the
    same function runs on both sides. Without ``pools`` correlations are dealt
    lazily from ``seed``.
    """
    server_fn = server_fn or client_fn
    if pools is None:
        pools = ondemand_pools(seed, cfg)
    chans = connect_inproc(timeout=timeout, transcript=transcript)
    hes = [he, he.public_view() if he is not None else None]
    parties = [Party(r, chans[r], pools[r], cfg, seed=seed, he=hes[r], trunc_mode=trunc_mode) for r in (CLIENT, SERVER)]
    fns = [client_fn, server_fn]
    results: list[Any] = [None, None]
    errors: list[BaseException | None] = [None, None]

    def body(r):
        try:
            results[r] = fns[r](parties[r])
        except BaseException as err:  # noqa: BLE001 - re-raised in the caller
            errors[r] = err
            chans[r].close()

    t0 = time.perf_counter()
    threads = [threading.Thread(target=body, args=(r,), daemon=True) for r in (CLIENT, SERVER)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - t0
    for r in (CLIENT, SERVER):
        # report the root cause, not the peer's "channel closed"
        if errors[r] is not None and not _is_peer_close(errors[r]):
            raise errors[r]
    for err in errors:
        if err is not None:
            raise err
    counters = dict(parties[CLIENT].counters)
    return RunResult(results[CLIENT], results[SERVER], chans[CLIENT].stats, counters,
                     getattr(pools[CLIENT], "budget", None), wall)


def _is_peer_close(err: BaseException) -> bool:
    from .transport import TransportError

    return isinstance(err, TransportError)


def dry_run(plan, cfg: FixedConfig = DEFAULT, he=None, **kw) -> Budget:
    """Exact correlation budget of ``plan`` = (client_fn, server_fn) via zero correlations."""
    client_fn, server_fn = plan
    pools = (CountingPool(cfg), CountingPool(cfg))
    res = run_two_party(client_fn, server_fn, pools=pools, cfg=cfg, he=he, **kw)
    if pools[CLIENT].budget != pools[SERVER].budget:
        raise RuntimeError("parties consumed different correlation budgets")
    return pools[CLIENT].budget


def run_prepared(plan, seed: int, cfg: FixedConfig = DEFAULT, he=None, dry_he=None, **kw):
    """Measure the budget, deal exactly that much, then run for real.

    Returns (RunResult, client pool, server pool); the pools are fully consumed.
    """
    budget = dry_run(plan, cfg=cfg, he=dry_he if dry_he is not None else he, **kw)
    pools = deal(budget, seed, cfg)
    res = run_two_party(plan[0], plan[1], pools=pools, seed=seed, cfg=cfg, he=he, **kw)
    res.budget = budget
    return res, pools


# -- model inference sessions ---------------------------------------------------

REPORT_SCHEMA = 1


def _plan(cfg, store, tokens, protocol: str, gate_scaling: bool, fixed: FixedConfig):
    from .fixed import encode
    from .model import secure_forward
    from .sharing import reveal, share_input

    shape = (len(tokens) if tokens is not None else cfg.seq_len, cfg.d_model)

    def client_fn(p: Party):
        x = share_input(p, encode(tokens, fixed), owner=CLIENT)
        y = secure_forward(p, cfg, None, x, protocol, gate_scaling)
        return reveal(p, y, to=CLIENT)

    def server_fn(p: Party):
        x = share_input(p, shape=shape, owner=CLIENT)
        y = secure_forward(p, cfg, store, x, protocol, gate_scaling)
        reveal(p, y, to=CLIENT)

    return client_fn, server_fn


def measure_budget(cfg, protocol: str = "secmoe", gate_scaling: bool = False, seq_len: int | None = None,
                   fixed: FixedConfig = DEFAULT, he_params=None) -> Budget:
    """Correlation budget of one inference; depends only on shapes, so dummy data is used."""
    import numpy as np

    from .he.engines import HeParams, SemanticEngine
    from .model import gen_weights

    T = seq_len or cfg.seq_len
    plan = _plan(cfg, gen_weights(cfg, 0, fixed), np.zeros((T, cfg.d_model)), protocol, gate_scaling, fixed)
    return dry_run(plan, cfg=fixed, he=SemanticEngine.create(he_params or HeParams(), dry=True))


def run_inference(cfg, store, tokens, *, protocol: str = "secmoe", seed: int = 0, gate_scaling: bool = False,
                  pools: str = "prepared", transcript: bool = False, he_params=None):
    """In-process secure inference. Returns (output ring tensor, RunResult).

    ``pools='prepared'`` measures the budget with a dry run and deals exactly
    that much before the online phase; ``'ondemand'`` deals lazily (faster,
    same transcript and output).
    """
    from .he.engines import HeParams, SemanticEngine

    fixed = store.fixed
    plan = _plan(cfg, store, tokens, protocol, gate_scaling, fixed)
    he = SemanticEngine.create(he_params or HeParams(plaintext_bits=fixed.ell))
    budget = None
    if pools == "prepared":
        budget = measure_budget(cfg, protocol, gate_scaling, len(tokens), fixed, he.params)
        pool_pair = deal(budget, seed, fixed)
    elif pools == "ondemand":
        pool_pair = ondemand_pools(seed, fixed)
    else:
        raise ValueError(f"unknown pool mode {pools!r}")
    res = run_two_party(plan[0], plan[1], pools=pool_pair, seed=seed, cfg=fixed, he=he, transcript=transcript)
    res.budget = budget if budget is not None else pool_pair[CLIENT].budget
    return res.client, res


def run_party_tcp(role: int, addr, cfg, store, tokens, *, protocol: str = "secmoe", seed: int = 0,
                  gate_scaling: bool = False, fixed: FixedConfig = DEFAULT, timeout: float = 60.0,
                  transcript: bool = False, he_params=None):
    """Run one party over TCP. Each process re-deals its own pool half from ``seed``.

    This is a simulation of the setup phase: both processes run the same
    deterministic dealer locally and keep only their half.
    """
    from .he.engines import HeParams, SemanticEngine
    from .transport import connect_tcp

    T = len(tokens) if tokens is not None else cfg.seq_len
    params = he_params or HeParams(plaintext_bits=fixed.ell)
    budget = measure_budget(cfg, protocol, gate_scaling, T, fixed, params)
    pool = deal(budget, seed, fixed)[role]
    he = SemanticEngine.create(params)
    if role == SERVER:
        he = he.public_view()
    chan = connect_tcp(addr, role, timeout=timeout, transcript=transcript)
    party = Party(role, chan, pool, fixed, seed=seed, he=he)
    plan = _plan(cfg, store, tokens if role == CLIENT else None, protocol, gate_scaling, fixed)
    t0 = time.perf_counter()
    try:
        out = plan[role](party)
    finally:
        chan.close()
    res = RunResult(out if role == CLIENT else None, None, chan.stats, dict(party.counters), budget,
                    time.perf_counter() - t0)
    return out, res


def make_report(res: RunResult, *, protocol: str, cfg=None, profile=None, he_params=None,
                fixed: FixedConfig = DEFAULT) -> dict:
    from .he.engines import HeParams
    from .transport import LAN, WAN, Tag, modeled_time

    st = res.stats
    params = he_params or HeParams()
    resp = st.by_tag.get(int(Tag.HE_RESULT), 0)
    what_if = st.total_bytes - resp + int(round(resp * params.response_scale))
    report = {
        "schema_version": REPORT_SCHEMA,
        "protocol": protocol,
        "bytes_online": {"c_to_s": st.bytes_c_to_s, "s_to_c": st.bytes_s_to_c, "total": st.total_bytes},
        "framing_bytes": st.framing_bytes,
        "messages": st.messages,
        "rounds": st.rounds,
        "bytes_setup_modeled": res.budget.setup_bytes(fixed) if res.budget is not None else None,
        "wall_time_s": res.wall_s,
        "modeled_time_s": modeled_time(st, profile),
        "modeled_time_lan_s": modeled_time(st, LAN),
        "modeled_time_wan_s": modeled_time(st, WAN),
        "net_profile": profile.name if profile is not None else "none",
        "he_response_bytes": resp,
        "bytes_online_with_response_scale": what_if,
        "response_scale": params.response_scale,
        "per_section": {name: sec.as_dict() for name, sec in sorted(st.sections.items())},
        "counters": dict(sorted(res.counters.items())),
    }
    if cfg is not None:
        report["model"] = {f: getattr(cfg, f) for f in ("name", "d_model", "d_ff", "num_heads", "num_layers",
                                                         "n_experts", "seq_len")}
    return report
