"""Command-line entry point: gen-weights, infer, bench, selftest."""

from __future__ import annotations

import argparse
import json
import socket
import sys
import threading
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FAILURE = 3
EXIT_IO = 4


class UsageError(Exception):
    pass


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"--addr must look like host:port, got {text!r}")
    return host, int(port)


def _free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def read_tokens(path) -> np.ndarray:
    """One row per token, space-separated reals; blank lines and # comments skipped."""
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(v) for v in line.split()])
        except ValueError:
            raise UsageError(f"{path}:{ln}: not a row of numbers") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise UsageError(f"{path}: expected a non-empty table with equal-length rows")
    return np.asarray(rows, dtype=float)


def format_rows(arr) -> str:
    return "\n".join(" ".join(f"{v:.6f}" for v in row) for row in np.atleast_2d(arr)) + "\n"


# -- commands -------------------------------------------------------------------

def cmd_gen_weights(args) -> int:
    from .model import ConfigError, config_by_name, gen_weights, save_weights

    try:
        cfg = config_by_name(args.config)
    except ConfigError as err:
        raise UsageError(str(err)) from None
    out = save_weights(gen_weights(cfg, args.seed), args.out)
    print(f"wrote {cfg.name} (d_model={cfg.d_model} d_ff={cfg.d_ff} heads={cfg.num_heads} "
          f"layers={cfg.num_layers} experts={cfg.n_experts}) to {out}")
    return EXIT_OK


def _check_tokens(cfg, tokens):
    if tokens.shape[1] != cfg.d_model:
        raise UsageError(f"input rows have {tokens.shape[1]} values, model width is {cfg.d_model}")


def _emit(args, out_real, report):
    if out_real is not None:
        if args.output:
            Path(args.output).write_text(format_rows(out_real))
        else:
            sys.stdout.write(format_rows(out_real))
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)


def cmd_infer(args) -> int:
    from .fixed import decode
    from .model import load_weights, read_config
    from .runner import make_report, run_inference, run_party_tcp
    from .transport import CLIENT, SERVER, profile_from_name

    try:
        profile = profile_from_name(args.net)
    except ValueError as err:
        raise UsageError(str(err)) from None
    role = args.role
    if args.transport == "inproc" and role != "both":
        raise UsageError("--transport inproc runs both parties; use --role both")
    if role in ("both", "client") and not args.input:
        raise UsageError("the client needs --input")

    if role == "client":
        # the client never loads weights; it only needs the model shape
        cfg, fixed = read_config(args.weights)
        store = None
    else:
        store = load_weights(args.weights)
        cfg, fixed = store.config, store.fixed
    tokens = read_tokens(args.input) if args.input else None
    if tokens is not None:
        _check_tokens(cfg, tokens)

    kw = dict(protocol=args.protocol, seed=args.seed, gate_scaling=args.gate_scaling)
    if args.transport == "inproc":
        out, res = run_inference(cfg, store, tokens, **kw)
    elif role == "both":
        host, port = _parse_addr(args.addr) if args.addr else ("127.0.0.1", _free_port())
        box = {}

        def server():
            box["server"] = run_party_tcp(SERVER, (host, port), cfg, store, None, fixed=fixed,
                                          timeout=args.timeout, **kw)

        th = threading.Thread(target=server, daemon=True)
        th.start()
        out, res = run_party_tcp(CLIENT, (host, port), cfg, None, tokens, fixed=fixed, timeout=args.timeout, **kw)
        th.join(args.timeout)
    else:
        if not args.addr:
            raise UsageError("--transport tcp with a single role needs --addr host:port")
        r = CLIENT if role == "client" else SERVER
        out, res = run_party_tcp(r, _parse_addr(args.addr), cfg, store, tokens, fixed=fixed,
                                 timeout=args.timeout, **kw)

    report = make_report(res, protocol=args.protocol, cfg=cfg, profile=profile, fixed=fixed)
    report["transport"] = args.transport
    report["role"] = role
    report["seed"] = args.seed
    report["gate_scaling"] = args.gate_scaling
    _emit(args, decode(out, fixed) if out is not None else None, report)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import sweep

    try:
        experts = sorted({int(e) for e in args.experts.split(",") if e.strip()})
    except ValueError:
        raise UsageError(f"--experts must be a comma-separated list of integers, got {args.experts!r}") from None
    if not experts or experts[0] < 1:
        raise UsageError("--experts needs positive counts")
    protocols = ["secmoe", "dense"] if args.protocol == "both" else [args.protocol]

    def progress(row):
        print(f"{row['protocol']:>7} E={row['n_experts']:<4d} bytes={row['online_bytes']:>12,d} "
              f"rounds={row['rounds']:<4d} lan={row['modeled_lan_time_s']:.3f}s "
              f"wan={row['modeled_wan_time_s']:.3f}s wall={row['wall_time_s']:.2f}s", file=sys.stderr)

    rep = sweep(experts, protocols, seed=args.seed, d_model=args.d_model, d_ff=args.d_ff, tokens=args.tokens,
                progress=progress)
    text = json.dumps(rep, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    for proto, ratio in rep["flatness"].items():
        print(f"flatness {proto}: comm(E={experts[-1]})/comm(E={experts[0]}) = {ratio:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_suites

    checks = run_suites(args.level, seed=args.seed)
    failed = [c for c in checks if not c.ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} suites passed")
    return EXIT_OK if not failed else EXIT_FAILURE


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moe2pc", description="Two-party secure MoE transformer inference.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-weights", help="generate a random weight store")
    g.add_argument("--config", required=True, help="e.g. toy-moe-8e or tiny-moe-4e")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_weights)

    i = sub.add_parser("infer", help="run one secure forward pass")
    i.add_argument("--weights", required=True, help="weights directory (client reads only its manifest)")
    i.add_argument("--input", help="text file, one row of d_model reals per token")
    i.add_argument("--net", choices=["lan", "wan", "none"], default=None,
                   help="modeled network profile (default: $MOE2PC_NET or none)")
    i.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    i.add_argument("--role", choices=["client", "server", "both"], default="both")
    i.add_argument("--protocol", choices=["secmoe", "dense"], default="secmoe")
    i.add_argument("--gate-scaling", action="store_true", help="scale expert output by its gate probability")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--addr", help="host:port for tcp")
    i.add_argument("--timeout", type=float, default=60.0)
    i.add_argument("--output", help="write the output tensor here instead of stdout")
    i.add_argument("--report", help="write the JSON report here instead of stdout")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="sweep expert counts for one MoE layer")
    b.add_argument("--experts", default="2,4,8,16,32,64,128")
    b.add_argument("--protocol", choices=["secmoe", "dense", "both"], default="both")
    b.add_argument("--d-model", type=int, default=64)
    b.add_argument("--d-ff", type=int, default=128)
    b.add_argument("--tokens", type=int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="JSON report path (default stdout)")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("selftest", help="oracle-equivalence suites")
    s.add_argument("--level", choices=["quick", "full"], default="quick")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    from .he.engines import HeError
    from .model import ConfigError, MalformedWeights
    from .runner import PeerFailure
    from .transport import ProtocolDesync, TransportError

    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"moe2pc: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (MalformedWeights, OSError) as err:
        if isinstance(err, (TransportError, TimeoutError)):
            print(f"moe2pc: connection error: {err}", file=sys.stderr)
            return EXIT_FAILURE
        print(f"moe2pc: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ProtocolDesync, PeerFailure, HeError, RuntimeError) as err:
        print(f"moe2pc: protocol failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
