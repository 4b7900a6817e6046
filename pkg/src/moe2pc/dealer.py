"""Setup-phase generator of correlated randomness (trusted-dealer simulation).

This stands in for OT-based correlation generation. Setup material is never
sent over the protocol channel; its size is reported as a modeled figure.

Correlation kinds, keyed by tuples, one entry per element:

    ("beaver",)        a, b, c = a*b                    (ring)
    ("and",)           a, b, c = a&b                    (bits)
    ("b2a",)           rb (bit) and ra (ring) with ra == rb
    ("muxc",)          same layout as b2a; used by MUX against public values
    ("mux",)           rb, ra as b2a plus v and w = ra*v (ring)
    ("cmp", ell)       r, low ell-1 bits of r, msb of r (bit)
    ("trunc", k)       r, low k bits of r, r >> k (ring), msb of r (ring)
    ("mat", m, k, n)   A (m x k), B (k x n), C = A @ B
"""

from __future__ import annotations

import io
import json
import struct
import threading
import zlib
from collections import Counter

import numpy as np

from .fixed import DEFAULT, FixedConfig


class RandomnessExhausted(RuntimeError):
    pass


def key_str(key: tuple) -> str:
    return ":".join(str(p) for p in key)


def key_from_str(s: str) -> tuple:
    parts = s.split(":")
    return (parts[0], *(int(p) for p in parts[1:]))


def layout(key: tuple, cfg: FixedConfig) -> list[tuple[str, str, tuple]]:
    kind = key[0]
    if kind == "beaver":
        return [("a", "ring", ()), ("b", "ring", ()), ("c", "ring", ())]
    if kind == "and":
        return [("a", "bit", ()), ("b", "bit", ()), ("c", "bit", ())]
    if kind in ("b2a", "muxc"):
        return [("rb", "bit", ()), ("ra", "ring", ())]
    if kind == "mux":
        return [("rb", "bit", ()), ("ra", "ring", ()), ("v", "ring", ()), ("w", "ring", ())]
    if kind == "cmp":
        return [("r", "ring", ()), ("rbits", "bit", (key[1] - 1,)), ("rmsb", "bit", ())]
    if kind == "trunc":
        return [("r", "ring", ()), ("rbits", "bit", (key[1],)), ("rhigh", "ring", ()), ("rmsb", "ring", ())]
    if kind == "mat":
        m, k, n = key[1:]
        return [("A", "ring", (m, k)), ("B", "ring", (k, n)), ("C", "ring", (m, n))]
    raise KeyError(f"unknown correlation kind {key!r}")


def _bits_of(r: np.ndarray, nbits: int) -> np.ndarray:
    shifts = np.arange(nbits, dtype=np.uint64)
    return ((r[..., None] >> shifts) & np.uint64(1)).astype(np.uint8)


def generate(key: tuple, n: int, rng: np.random.Generator, cfg: FixedConfig) -> dict[str, np.ndarray]:
    """Plaintext correlation values (before splitting into shares)."""
    kind = key[0]
    ring = lambda *shape: cfg.random(rng, (n, *shape))  # noqa: E731
    bits = lambda *shape: rng.integers(0, 2, size=(n, *shape), dtype=np.uint8)  # noqa: E731
    if kind == "beaver":
        a, b = ring(), ring()
        return {"a": a, "b": b, "c": cfg.reduce(a * b)}
    if kind == "and":
        a, b = bits(), bits()
        return {"a": a, "b": b, "c": a & b}
    if kind in ("b2a", "muxc"):
        rb = bits()
        return {"rb": rb, "ra": rb.astype(np.uint64)}
    if kind == "mux":
        rb, v = bits(), ring()
        ra = rb.astype(np.uint64)
        return {"rb": rb, "ra": ra, "v": v, "w": cfg.reduce(ra * v)}
    if kind == "cmp":
        ell = key[1]
        r = ring()
        return {"r": r, "rbits": _bits_of(r, ell - 1), "rmsb": (r >> np.uint64(ell - 1)).astype(np.uint8)}
    if kind == "trunc":
        k = key[1]
        r = ring()
        return {
            "r": r,
            "rbits": _bits_of(r, k),
            "rhigh": r >> np.uint64(k),
            "rmsb": r >> np.uint64(cfg.ell - 1),
        }
    if kind == "mat":
        m, k, nn = key[1:]
        A, B = ring(m, k), ring(k, nn)
        return {"A": A, "B": B, "C": cfg.reduce(np.matmul(A, B))}
    raise KeyError(key)


def split(values: dict, key: tuple, rng: np.random.Generator, cfg: FixedConfig):
    c_half, s_half = {}, {}
    for name, typ, _ in layout(key, cfg):
        val = values[name]
        if typ == "ring":
            mask = cfg.random(rng, val.shape)
            c_half[name], s_half[name] = mask, cfg.reduce(val - mask)
        else:
            mask = rng.integers(0, 2, size=val.shape, dtype=np.uint8)
            c_half[name], s_half[name] = mask, val ^ mask
    return c_half, s_half


class Budget(Counter):
    """Correlation counts per kind key."""

    def as_json(self) -> dict:
        return {key_str(k): int(v) for k, v in sorted(self.items())}

    def setup_bytes(self, cfg: FixedConfig = DEFAULT) -> int:
        """Modeled size of both parties' pools."""
        total = 0
        for key, n in self.items():
            ring_words = bits = 0
            for _, typ, shape in layout(key, cfg):
                size = int(np.prod(shape, dtype=np.int64)) if shape else 1
                if typ == "ring":
                    ring_words += size
                else:
                    bits += size
            total += n * ring_words * cfg.word_bytes + -(-n * bits // 8)
        return 2 * total


class CorrelationPool:
    """One party's supply of correlations. ``take`` hands out unused entries."""

    cfg: FixedConfig

    def take(self, key: tuple, n: int) -> dict[str, np.ndarray]:
        raise NotImplementedError


class CountingPool(CorrelationPool):
    """Dry-run pool: counts requests and hands out all-zero correlations.

    Zero satisfies every defining relation, so protocols still compute
    correct values while the budget is being measured.
    """

    def __init__(self, cfg: FixedConfig = DEFAULT):
        self.cfg = cfg
        self.budget = Budget()

    def take(self, key, n):
        self.budget[key] += n
        out = {}
        for name, typ, shape in layout(key, self.cfg):
            out[name] = np.zeros((n, *shape), dtype=np.uint64 if typ == "ring" else np.uint8)
        return out


class _BitBuf:
    def __init__(self, bits: np.ndarray):
        self.nbits = bits.size
        self.packed = np.packbits(bits.ravel())

    def slice(self, start: int, count: int) -> np.ndarray:
        b0 = start // 8
        b1 = -(-(start + count) // 8)
        chunk = np.unpackbits(self.packed[b0:b1])
        off = start - 8 * b0
        return chunk[off:off + count]

    def unpack(self) -> np.ndarray:
        return np.unpackbits(self.packed, count=self.nbits)


class PreparedPool(CorrelationPool):
    """Pre-dealt correlations consumed strictly in order."""

    def __init__(self, party: int, cfg: FixedConfig, halves: dict):
        self.party = party
        self.cfg = cfg
        self._fields: dict[tuple, dict] = {}
        self._count: dict[tuple, int] = {}
        self._cursor: dict[tuple, int] = {}
        for key, arrays in halves.items():
            n = None
            store = {}
            for name, typ, shape in layout(key, cfg):
                arr = arrays[name]
                n = arr.shape[0]
                store[name] = _BitBuf(arr) if typ == "bit" else np.ascontiguousarray(arr, dtype=np.uint64)
            self._fields[key] = store
            self._count[key] = n
            self._cursor[key] = 0

    def take(self, key, n):
        have = self._count.get(key, 0)
        cur = self._cursor.get(key, 0)
        if cur + n > have:
            raise RandomnessExhausted(f"{key_str(key)}: need {n}, {have - cur} left")
        out = {}
        for name, typ, shape in layout(key, self.cfg):
            buf = self._fields[key][name]
            if typ == "bit":
                per = int(np.prod(shape, dtype=np.int64)) if shape else 1
                out[name] = buf.slice(cur * per, n * per).reshape((n, *shape))
            else:
                out[name] = buf[cur:cur + n]
        self._cursor[key] = cur + n
        return out

    def remaining(self) -> dict:
        return {k: self._count[k] - self._cursor[k] for k in self._count}

    def keys(self):
        return list(self._fields)

    def field(self, key, name) -> np.ndarray:
        """Full array of one correlation field (used by audits)."""
        buf = self._fields[key][name]
        if isinstance(buf, _BitBuf):
            shape = dict((nm, sh) for nm, _, sh in layout(key, self.cfg))[name]
            return buf.unpack().reshape((self._count[key], *shape))
        return buf

    def tamper(self, key, name, index: int = 0):
        """Flip the low bit of one stored word or bit. Only for negative tests."""
        buf = self._fields[key][name]
        if isinstance(buf, _BitBuf):
            buf.packed[index // 8] ^= np.uint8(0x80 >> (index % 8))
        else:
            buf.reshape(-1)[index] ^= np.uint64(1)

    def nbytes(self) -> int:
        total = 0
        for store in self._fields.values():
            for buf in store.values():
                total += buf.packed.nbytes if isinstance(buf, _BitBuf) else buf.size * self.cfg.word_bytes
        return total

    # -- cache file ---------------------------------------------------------
    MAGIC = b"M2PCPOOL"
    VERSION = 1

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<IBBBI", self.VERSION, self.party, self.cfg.ell, self.cfg.scale_s, len(self._fields)))
            for key in sorted(self._fields):
                name = key_str(key).encode()
                fh.write(struct.pack("<I", len(name)) + name)
                fh.write(struct.pack("<Q", self._count[key]))
                for fname, typ, _ in layout(key, self.cfg):
                    buf = self._fields[key][fname]
                    raw = buf.packed.tobytes() if typ == "bit" else buf.astype("<u8").tobytes()
                    fh.write(struct.pack("<Q", len(raw)) + raw)

    @classmethod
    def load(cls, path) -> "PreparedPool":
        with open(path, "rb") as fh:
            data = fh.read()
        rd = io.BytesIO(data)

        def read(n):
            b = rd.read(n)
            if len(b) != n:
                raise ValueError("truncated pool file")
            return b

        if read(8) != cls.MAGIC:
            raise ValueError("not a correlation pool file")
        version, party, ell, s, nkeys = struct.unpack("<IBBBI", read(11))
        if version != cls.VERSION:
            raise ValueError(f"unsupported pool file version {version}")
        cfg = FixedConfig(ell, s)
        halves = {}
        for _ in range(nkeys):
            (ln,) = struct.unpack("<I", read(4))
            key = key_from_str(read(ln).decode())
            (count,) = struct.unpack("<Q", read(8))
            arrays = {}
            for fname, typ, shape in layout(key, cfg):
                (ln,) = struct.unpack("<Q", read(8))
                raw = read(ln)
                per = int(np.prod(shape, dtype=np.int64)) if shape else 1
                if typ == "bit":
                    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=count * per)
                    arrays[fname] = bits.reshape((count, *shape))
                else:
                    arrays[fname] = np.frombuffer(raw, dtype="<u8").astype(np.uint64).reshape((count, *shape))
            halves[key] = arrays
        return cls(party, cfg, halves)


def deal(budget: Budget, seed: int, cfg: FixedConfig = DEFAULT) -> tuple[PreparedPool, PreparedPool]:
    """Generate both parties' pools for ``budget``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    c_halves, s_halves = {}, {}
    for key in sorted(budget, key=key_str):
        n = int(budget[key])
        if n == 0:
            continue
        vals = generate(key, n, rng, cfg)
        c_halves[key], s_halves[key] = split(vals, key, rng, cfg)
    return PreparedPool(0, cfg, c_halves), PreparedPool(1, cfg, s_halves)


def ondemand_pools(seed: int, cfg: FixedConfig = DEFAULT) -> tuple[CorrelationPool, CorrelationPool]:
    """Lazily dealt pool pair for in-process use (tests, quick experiments).

    The i-th request of a kind is generated from (seed, kind, i), so results do
    not depend on which party asks first.
    """
    lock = threading.Lock()
    stash: dict = {}

    class _Lazy(CorrelationPool):
        def __init__(self, party):
            self.party = party
            self.cfg = cfg
            self.budget = Budget()
            self._idx = Counter()

        def take(self, key, n):
            idx = self._idx[key]
            self._idx[key] += 1
            self.budget[key] += n
            with lock:
                slot = (key, idx)
                if slot in stash:
                    got_n, halves = stash.pop(slot)
                    if got_n != n:
                        raise RuntimeError(f"parties disagree on request size for {key_str(key)}")
                    return halves[self.party]
                rng = np.random.default_rng([seed, zlib.crc32(key_str(key).encode()), idx])
                halves = split(generate(key, n, rng, cfg), key, rng, cfg)
                stash[slot] = (n, halves)
                return halves[self.party]

    return _Lazy(0), _Lazy(1)


def audit(pool_c: PreparedPool, pool_s: PreparedPool) -> dict[str, tuple[int, int]]:
    """Reconstruct every correlation and check its defining relation.

    Returns ``{kind: (checked, failed)}``.
    """
    cfg = pool_c.cfg
    report = {}
    for key in pool_c.keys():
        vals = {}
        for name, typ, _ in layout(key, cfg):
            a, b = pool_c.field(key, name), pool_s.field(key, name)
            vals[name] = cfg.reduce(a + b) if typ == "ring" else a ^ b
        kind = key[0]
        if kind == "beaver":
            ok = vals["c"] == cfg.reduce(vals["a"] * vals["b"])
        elif kind == "and":
            ok = vals["c"] == (vals["a"] & vals["b"])
        elif kind in ("b2a", "muxc"):
            ok = vals["ra"] == vals["rb"].astype(np.uint64)
        elif kind == "mux":
            ok = (vals["ra"] == vals["rb"].astype(np.uint64)) & (vals["w"] == cfg.reduce(vals["ra"] * vals["v"]))
        elif kind == "cmp":
            ell = key[1]
            ok = np.all(vals["rbits"] == _bits_of(vals["r"], ell - 1), axis=-1)
            ok &= vals["rmsb"] == (vals["r"] >> np.uint64(ell - 1)).astype(np.uint8)
        elif kind == "trunc":
            k = key[1]
            r = vals["r"]
            ok = np.all(vals["rbits"] == _bits_of(r, k), axis=-1)
            ok &= vals["rhigh"] == (r >> np.uint64(k))
            ok &= vals["rmsb"] == (r >> np.uint64(cfg.ell - 1))
        elif kind == "mat":
            ok = np.all(vals["C"] == cfg.reduce(np.matmul(vals["A"], vals["B"])), axis=(-2, -1))
        else:
            raise KeyError(key)
        ok = np.asarray(ok, dtype=bool)
        report[key_str(key)] = (int(ok.size), int(ok.size - ok.sum()))
    return report


def estimate(plan, cfg: FixedConfig = DEFAULT, **run_kwargs) -> Budget:
    """Exact correlation budget of ``plan`` from a counting-only dry run.

    ``plan`` is a ``(client_fn, server_fn)`` pair as accepted by
    :func:`moe2pc.runner.run_two_party`.
    """
    from .runner import dry_run

    return dry_run(plan, cfg=cfg, **run_kwargs)


def as_json(budget: Budget) -> str:
    return json.dumps(budget.as_json(), sort_keys=True)
