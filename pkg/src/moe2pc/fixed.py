"""Fixed-point arithmetic over the ring Z_{2^ell}.

Ring elements live in ``np.uint64`` arrays. For ``ell < 64`` every result is
masked back into the low ``ell`` bits; for ``ell == 64`` numpy's wrapping
unsigned arithmetic does the reduction for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class FixedPointOverflow(OverflowError):
    """Raised when a real value does not fit the fixed-point range."""


@dataclass(frozen=True)
class FixedConfig:
    ell: int = 64
    scale_s: int = 18

    def __post_init__(self):
        # Protocol code runs at 64 bits; small rings are only for exhaustive tests.
        if not 2 <= self.ell <= 64:
            raise ValueError(f"ring bit width must be in [2, 64], got {self.ell}")
        if not 0 < self.scale_s < self.ell:
            raise ValueError(f"need 0 < scale_s < ell, got s={self.scale_s}, ell={self.ell}")

    @property
    def modulus(self) -> int:
        return 1 << self.ell

    @property
    def mask(self) -> np.uint64:
        return np.uint64((1 << self.ell) - 1)

    @property
    def half(self) -> int:
        return 1 << (self.ell - 1)

    @property
    def word_bytes(self) -> int:
        """Bytes used to put one ring element on the wire."""
        if self.ell <= 8:
            return 1
        if self.ell <= 16:
            return 2
        if self.ell <= 32:
            return 4
        return 8

    @property
    def wire_dtype(self):
        return {1: np.uint8, 2: np.uint16, 4: np.uint32, 8: np.uint64}[self.word_bytes]

    def reduce(self, a):
        a = np.asarray(a, dtype=np.uint64)
        if self.ell == 64:
            return a
        return a & self.mask

    def to_signed(self, a) -> np.ndarray:
        """Two's-complement interpretation as int64."""
        a = self.reduce(a)
        if self.ell == 64:
            return a.view(np.int64)
        s = a.astype(np.int64)
        return np.where(s >= self.half, s - (1 << self.ell), s)

    def from_signed(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.int64)
        return self.reduce(v.view(np.uint64))

    def random(self, rng: np.random.Generator, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return self.reduce(rng.bit_generator.random_raw(n).astype(np.uint64)).reshape(shape)


DEFAULT = FixedConfig()


def encode(value, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    """Map reals to ring elements: round(v * 2^s) mod 2^ell, half away from zero."""
    v = np.asarray(value, dtype=np.float64)
    bound = 2.0 ** (cfg.ell - cfg.scale_s - 1)
    if not np.all(np.abs(v) < bound):
        raise FixedPointOverflow(f"|value| must be < 2^{cfg.ell - cfg.scale_s - 1}")
    scaled = np.ldexp(np.abs(v), cfg.scale_s)
    mag = np.floor(scaled + 0.5)
    signed = (np.sign(v) * mag).astype(np.int64)
    return cfg.from_signed(signed)


def decode(e, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    return np.ldexp(cfg.to_signed(e).astype(np.float64), -cfg.scale_s)


def truncate_plain(e, shift: int, cfg: FixedConfig = DEFAULT) -> np.ndarray:
    """Arithmetic right shift on the two's-complement interpretation."""
    return cfg.from_signed(cfg.to_signed(e) >> shift)


def ring_add(a, b, cfg: FixedConfig = DEFAULT):
    return cfg.reduce(np.asarray(a, dtype=np.uint64) + np.asarray(b, dtype=np.uint64))


def ring_sub(a, b, cfg: FixedConfig = DEFAULT):
    return cfg.reduce(np.asarray(a, dtype=np.uint64) - np.asarray(b, dtype=np.uint64))


def ring_mul(a, b, cfg: FixedConfig = DEFAULT):
    return cfg.reduce(np.asarray(a, dtype=np.uint64) * np.asarray(b, dtype=np.uint64))


def ring_matmul(a, b, cfg: FixedConfig = DEFAULT):
    return cfg.reduce(np.matmul(np.asarray(a, dtype=np.uint64), np.asarray(b, dtype=np.uint64)))


def fixed_mul(a, b, cfg: FixedConfig = DEFAULT):
    """Fixed-point product: ring multiply then truncate by s."""
    return truncate_plain(ring_mul(a, b, cfg), cfg.scale_s, cfg)


def fixed_matmul(a, b, cfg: FixedConfig = DEFAULT):
    return truncate_plain(ring_matmul(a, b, cfg), cfg.scale_s, cfg)


@dataclass
class FixedTensor:
    """A row-major tensor of ring elements encoding reals at scale 2^s."""

    data: np.ndarray
    config: FixedConfig = field(default=DEFAULT)

    def __post_init__(self):
        self.data = self.config.reduce(np.ascontiguousarray(self.data, dtype=np.uint64))

    @classmethod
    def from_real(cls, values, config: FixedConfig = DEFAULT) -> "FixedTensor":
        return cls(encode(values, config), config)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def to_real(self) -> np.ndarray:
        return decode(self.data, self.config)

    def __eq__(self, other):
        if not isinstance(other, FixedTensor):
            return NotImplemented
        return self.config == other.config and np.array_equal(self.data, other.data)
