"""Additive homomorphic encryption engines over A = Z_t[X]/(X^N + 1), t = 2^bits.

Two interchangeable engines:

``SemanticEngine``
    Reference engine for protocol runs. Ciphertexts carry the plaintext
    polynomial internally and charge bytes from a size model (two 64-bit
    words per coefficient plus a 16-byte header). Supports one
    ciphertext-ciphertext multiplication level. Only the key holder can
    decrypt; the server side gets a :meth:`public_view` without the secret.

``RlweEngine``
    Real symmetric-key RLWE scheme with q = 2^64, Delta = q / t, ternary
    secret and centred-binomial noise. Supports add and plaintext multiply;
    ciphertext-ciphertext multiplication is not available.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .poly import negacyclic_mul

HEADER = struct.Struct("<HHIQ")
ENGINE_TAGS = {"semantic": 1, "rlwe": 2}
_TAG_NAMES = {v: k for k, v in ENGINE_TAGS.items()}


class HeError(RuntimeError):
    pass


class LevelExceeded(HeError):
    pass


class EngineUnsupported(HeError):
    pass


class NotKeyHolder(HeError):
    pass


class MalformedCiphertext(HeError, ValueError):
    pass


@dataclass(frozen=True)
class HeParams:
    ring_degree_N: int = 4096
    plaintext_bits: int = 64
    ciphertext_bits: int = 64
    # what-if factor for response ciphertexts in reports (1.0 = no compression)
    response_scale: float = 1.0

    def __post_init__(self):
        N = self.ring_degree_N
        if N < 1 or N & (N - 1):
            raise ValueError(f"ring degree must be a power of two, got {N}")
        if not 1 <= self.plaintext_bits <= 64:
            raise ValueError("plaintext bits must be in [1, 64]")

    @property
    def plaintext_modulus(self) -> int:
        return 1 << self.plaintext_bits

    @property
    def ciphertext_modulus_q(self) -> int:
        return 1 << self.ciphertext_bits

    @property
    def modeled_ct_bytes(self) -> int:
        return 2 * self.ring_degree_N * 8 + HEADER.size

    def reduce(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.uint64)
        if self.plaintext_bits == 64:
            return a
        return a & np.uint64((1 << self.plaintext_bits) - 1)


@dataclass
class HePlaintext:
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.ascontiguousarray(self.coeffs, dtype=np.uint64)
        if self.coeffs.ndim != 1:
            raise ValueError("plaintext must be a coefficient vector")


@dataclass
class HeCiphertext:
    engine: str
    level: int
    N: int
    _payload: object = field(repr=False)

    @property
    def byte_size(self) -> int:
        return HEADER.size + 2 * self.N * 8


@dataclass(frozen=True)
class HeKeys:
    secret: object | None
    public: object | None = None

    @property
    def has_secret(self) -> bool:
        return self.secret is not None


class _Engine:
    name = "?"

    def __init__(self, params: HeParams, keys: HeKeys | None = None):
        self.params = params
        self.keys = keys

    @property
    def N(self) -> int:
        return self.params.ring_degree_N

    def _pt(self, pt) -> np.ndarray:
        coeffs = pt.coeffs if isinstance(pt, HePlaintext) else np.asarray(pt, dtype=np.uint64)
        if coeffs.shape != (self.N,):
            raise ValueError(f"plaintext must have {self.N} coefficients, got {coeffs.shape}")
        return self.params.reduce(coeffs)

    def _need_secret(self):
        if self.keys is None or not self.keys.has_secret:
            raise NotKeyHolder("this party does not hold the secret key")

    def _check(self, ct: HeCiphertext):
        if ct.engine != self.name or ct.N != self.N:
            raise HeError(f"ciphertext from engine {ct.engine}/N={ct.N} used with {self.name}/N={self.N}")

    def public_view(self):
        return type(self)(self.params, HeKeys(None, self.keys.public if self.keys else None), **self._view_kwargs())

    def _view_kwargs(self) -> dict:
        return {}

    def serialize(self, ct: HeCiphertext) -> bytes:
        self._check(ct)
        words = self._payload_words(ct)
        raw = np.ascontiguousarray(words, dtype="<u8").tobytes()
        out = HEADER.pack(ENGINE_TAGS[self.name], ct.level, ct.N, len(raw)) + raw
        assert len(out) == ct.byte_size
        return out

    def deserialize(self, data: bytes) -> HeCiphertext:
        if len(data) < HEADER.size:
            raise MalformedCiphertext("ciphertext shorter than its header")
        tag, level, N, ln = HEADER.unpack_from(data)
        if _TAG_NAMES.get(tag) != self.name or N != self.N:
            raise MalformedCiphertext(f"header names engine {tag} / N={N}")
        if ln != 2 * N * 8 or len(data) != HEADER.size + ln:
            raise MalformedCiphertext("payload length does not match header")
        words = np.frombuffer(data, dtype="<u8", offset=HEADER.size).astype(np.uint64)
        return HeCiphertext(self.name, level, N, self._payload_from(words))

    def serialize_many(self, cts) -> bytes:
        return b"".join(self.serialize(c) for c in cts)

    def deserialize_many(self, data: bytes) -> list[HeCiphertext]:
        size = HEADER.size + 2 * self.N * 8
        if len(data) % size:
            raise MalformedCiphertext("byte string is not a whole number of ciphertexts")
        return [self.deserialize(data[i:i + size]) for i in range(0, len(data), size)]

    def select_sum(self, ct: HeCiphertext, offset: int, pts) -> HeCiphertext:
        raise EngineUnsupported(f"{self.name} engine cannot extract coefficients homomorphically")

    def mul_ct_ct(self, a: HeCiphertext, b: HeCiphertext) -> HeCiphertext:
        raise EngineUnsupported(f"{self.name} engine has no ciphertext-ciphertext multiplication")


class SemanticEngine(_Engine):
    """Size-modelled reference engine; see module docstring."""

    name = "semantic"

    def __init__(self, params: HeParams = HeParams(), keys: HeKeys | None = None, dry: bool = False):
        super().__init__(params, keys)
        self.dry = dry

    def _view_kwargs(self):
        return {"dry": self.dry}

    @classmethod
    def create(cls, params: HeParams = HeParams(), dry: bool = False) -> "SemanticEngine":
        return cls(params, HeKeys(secret=object(), public=None), dry=dry)

    def _new(self, poly, level) -> HeCiphertext:
        if level > 1:
            raise LevelExceeded("multiplicative depth 1 exceeded")
        return HeCiphertext(self.name, level, self.N, poly)

    def _val(self, ct):
        self._check(ct)
        return ct._payload

    def encrypt(self, pt, rng=None) -> HeCiphertext:
        self._need_secret()
        return self._new(None if self.dry else self._pt(pt).copy(), 0)

    def decrypt(self, ct: HeCiphertext) -> HePlaintext:
        self._need_secret()
        v = self._val(ct)
        return HePlaintext(np.zeros(self.N, dtype=np.uint64) if v is None else v.copy())

    def add_ct_ct(self, a, b):
        va, vb = self._val(a), self._val(b)
        poly = None if va is None or vb is None else self.params.reduce(va + vb)
        return self._new(poly, max(a.level, b.level))

    def sub_ct_ct(self, a, b):
        va, vb = self._val(a), self._val(b)
        poly = None if va is None or vb is None else self.params.reduce(va - vb)
        return self._new(poly, max(a.level, b.level))

    def add_ct_pt(self, ct, pt):
        v = self._val(ct)
        return self._new(None if v is None else self.params.reduce(v + self._pt(pt)), ct.level)

    def mul_ct_pt(self, ct, pt):
        v = self._val(ct)
        return self._new(None if v is None else self.params.reduce(negacyclic_mul(v, self._pt(pt))), ct.level)

    def mul_ct_ct(self, a, b):
        if a.level or b.level:
            raise LevelExceeded("ciphertext-ciphertext multiplication needs two fresh (level 0) operands")
        va, vb = self._val(a), self._val(b)
        poly = None if va is None or vb is None else self.params.reduce(negacyclic_mul(va, vb))
        return self._new(poly, 1)

    def select_sum(self, ct, offset, pts):
        """sum_i coeff_{offset+i}(ct) * pts[i]: plaintext-weighted sum of single coefficients.

        Models coefficient extraction followed by scalar-times-plaintext
        accumulation. Level is unchanged (no ciphertext product).
        """
        v = self._val(ct)
        if v is None:
            return self._new(None, ct.level)
        acc = np.zeros(self.N, dtype=np.uint64)
        for i, pt in enumerate(pts):
            acc += v[offset + i] * self._pt(pt)
        return self._new(self.params.reduce(acc), ct.level)

    def _payload_words(self, ct):
        v = ct._payload if ct._payload is not None else np.zeros(self.N, dtype=np.uint64)
        return np.concatenate([v, np.zeros(self.N, dtype=np.uint64)])

    def _payload_from(self, words):
        if np.any(words[self.N:]):
            raise MalformedCiphertext("semantic ciphertext has a non-zero second component")
        return None if self.dry else words[:self.N].copy()


class RlweEngine(_Engine):
    """Symmetric-key RLWE additive scheme, q = 2^64, t = 2^plaintext_bits."""

    name = "rlwe"
    MAX_T_BITS = 20
    ETA = 2

    def __init__(self, params: HeParams, keys: HeKeys | None = None, max_terms: int = 64):
        if params.ciphertext_bits != 64:
            raise ValueError("rlwe engine uses a single 64-bit ciphertext modulus")
        if not 1 <= params.plaintext_bits <= self.MAX_T_BITS:
            raise ValueError(f"rlwe plaintext modulus must be 2^b with b <= {self.MAX_T_BITS}")
        super().__init__(params, keys)
        self.max_terms = max_terms

    def _view_kwargs(self):
        return {"max_terms": self.max_terms}

    @property
    def delta_bits(self) -> int:
        return 64 - self.params.plaintext_bits

    def noise_budget_ok(self) -> bool:
        """Worst-case check: max_terms products of fresh ciphertexts with centred plaintexts."""
        t = self.params.plaintext_modulus
        worst = self.max_terms * self.N * (t // 2) * self.ETA
        return worst < (1 << (self.delta_bits - 1))

    @classmethod
    def keygen(cls, params: HeParams, rng: np.random.Generator, max_terms: int = 64) -> "RlweEngine":
        eng = cls(params, None, max_terms)
        if not eng.noise_budget_ok():
            raise HeError("parameters leave no noise margin for decryption")
        s = rng.integers(-1, 2, size=params.ring_degree_N).astype(np.int64).view(np.uint64)
        eng.keys = HeKeys(secret=s, public=None)
        eng._rng = rng
        return eng

    def _noise(self, rng) -> np.ndarray:
        b = rng.integers(0, 2, size=(2 * self.ETA, self.N))
        return (b[:self.ETA].sum(0) - b[self.ETA:].sum(0)).astype(np.int64).view(np.uint64)

    def encrypt(self, pt, rng: np.random.Generator | None = None) -> HeCiphertext:
        self._need_secret()
        rng = rng or self._rng
        m = self._pt(pt)
        a = rng.integers(0, 2**64, size=self.N, dtype=np.uint64)
        c0 = np.uint64(0) - negacyclic_mul(a, self.keys.secret) + self._noise(rng) + (m << np.uint64(self.delta_bits))
        return HeCiphertext(self.name, 0, self.N, (c0, a))

    def decrypt(self, ct: HeCiphertext) -> HePlaintext:
        self._need_secret()
        self._check(ct)
        c0, c1 = ct._payload
        v = c0 + negacyclic_mul(c1, self.keys.secret)
        half = np.uint64(1 << (self.delta_bits - 1))
        return HePlaintext(self.params.reduce((v + half) >> np.uint64(self.delta_bits)))

    def add_ct_ct(self, a, b):
        self._check(a)
        self._check(b)
        return HeCiphertext(self.name, max(a.level, b.level), self.N,
                            (a._payload[0] + b._payload[0], a._payload[1] + b._payload[1]))

    def sub_ct_ct(self, a, b):
        self._check(a)
        self._check(b)
        return HeCiphertext(self.name, max(a.level, b.level), self.N,
                            (a._payload[0] - b._payload[0], a._payload[1] - b._payload[1]))

    def add_ct_pt(self, ct, pt):
        self._check(ct)
        c0, c1 = ct._payload
        return HeCiphertext(self.name, ct.level, self.N, (c0 + (self._pt(pt) << np.uint64(self.delta_bits)), c1.copy()))

    def _centred(self, pt) -> np.ndarray:
        m = self._pt(pt).astype(np.int64)
        t = self.params.plaintext_modulus
        return np.where(m >= t // 2, m - t, m).astype(np.int64).view(np.uint64)

    def mul_ct_pt(self, ct, pt):
        self._check(ct)
        p = self._centred(pt)
        c0, c1 = ct._payload
        return HeCiphertext(self.name, ct.level, self.N, (negacyclic_mul(c0, p), negacyclic_mul(c1, p)))

    def _payload_words(self, ct):
        return np.concatenate(ct._payload)

    def _payload_from(self, words):
        return (words[:self.N].copy(), words[self.N:].copy())


def make_engine(name: str, params: HeParams | None = None, seed: int = 0, dry: bool = False):
    """Key-holding engine by name ('semantic' or 'rlwe')."""
    if name == "semantic":
        return SemanticEngine.create(params or HeParams(), dry=dry)
    if name == "rlwe":
        return RlweEngine.keygen(params or HeParams(plaintext_bits=16), np.random.default_rng([seed, 7]))
    raise ValueError(f"unknown HE engine {name!r}")


__all__ = [
    "HeParams", "HePlaintext", "HeCiphertext", "HeKeys", "SemanticEngine", "RlweEngine",
    "HeError", "LevelExceeded", "EngineUnsupported", "NotKeyHolder", "MalformedCiphertext",
    "make_engine",
]
