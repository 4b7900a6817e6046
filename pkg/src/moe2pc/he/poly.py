"""Negacyclic polynomial arithmetic in Z_{2^64}[X]/(X^N + 1) and the matmul encodings.

Coefficient vectors are ``np.uint64`` arrays of length N; reduction modulo a
smaller power of two is left to the caller (it commutes with everything here).
"""

from __future__ import annotations

import numpy as np

_LIMB = 11
_NLIMBS = 6  # 6 * 11 = 66 >= 64 bits
_SPARSE_MAX = 128


class DimensionOverflow(ValueError):
    """k*m*n exceeds the ring degree, so the product would wrap."""


def negacyclic_schoolbook(a, b) -> np.ndarray:
    """Reference O(N^2) product; used as a test oracle."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    n = a.size
    out = np.zeros(n, dtype=np.uint64)
    for i in np.flatnonzero(a):
        rolled = np.roll(b, i)
        rolled[:i] = np.uint64(0) - rolled[:i]
        out += a[i] * rolled
    return out


def _sparse_mul(a, b) -> np.ndarray:
    # a has few nonzeros: shift-and-add with sign flip on wrap
    n = b.size
    out = np.zeros(n, dtype=np.uint64)
    neg_b = np.uint64(0) - b
    for i in np.flatnonzero(a):
        ai = a[i]
        out[i:] += ai * b[:n - i]
        out[:i] += ai * neg_b[n - i:]
    return out


def _limbs(a) -> np.ndarray:
    mask = np.uint64((1 << _LIMB) - 1)
    return np.stack([((a >> np.uint64(_LIMB * j)) & mask).astype(np.float64) for j in range(_NLIMBS)])


def _fft_mul(a, b) -> np.ndarray:
    n = a.size
    size = 2 * n
    fa = np.fft.rfft(_limbs(a), size)
    fb = np.fft.rfft(_limbs(b), size)
    out = np.zeros(n, dtype=np.uint64)
    # limb pairs with i + j >= 6 only touch bits >= 66, which vanish mod 2^64
    for s in range(_NLIMBS):
        acc = sum(fa[i] * fb[s - i] for i in range(s + 1))
        lin = np.rint(np.fft.irfft(acc, size)).astype(np.int64).view(np.uint64)
        folded = lin[:n] - lin[n:]
        out += folded << np.uint64(_LIMB * s)
    return out


def negacyclic_mul(a, b) -> np.ndarray:
    """Product in Z_{2^64}[X]/(X^N + 1), exact."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("operands must be equal-length 1-D coefficient vectors")
    na, nb = np.count_nonzero(a), np.count_nonzero(b)
    if min(na, nb) <= _SPARSE_MAX:
        return _sparse_mul(a, b) if na <= nb else _sparse_mul(b, a)
    return _fft_mul(a, b)


def _check_dims(k, m, n, N):
    if min(k, m, n) < 1:
        raise ValueError("matrix dims must be positive")
    if k * m * n > N:
        raise DimensionOverflow(f"k*m*n = {k * m * n} exceeds ring degree {N}")


def encode_left(x, n: int, N: int) -> np.ndarray:
    """Pack a k x m matrix as x_hat[i*m*n + m-1-j] = x[i, j]."""
    x = np.asarray(x, dtype=np.uint64)
    k, m = x.shape
    _check_dims(k, m, n, N)
    out = np.zeros(N, dtype=np.uint64)
    idx = (np.arange(k)[:, None] * m * n + (m - 1 - np.arange(m))[None, :])
    out[idx.ravel()] = x.ravel()
    return out


def encode_right(w, k: int, N: int) -> np.ndarray:
    """Pack an m x n matrix as w_hat[j*m + i] = W[i, j]."""
    w = np.asarray(w, dtype=np.uint64)
    m, n = w.shape
    _check_dims(k, m, n, N)
    out = np.zeros(N, dtype=np.uint64)
    out[:m * n] = w.T.ravel()
    return out


def extract_indices(k: int, m: int, n: int) -> np.ndarray:
    return (np.arange(k)[:, None] * m * n + np.arange(n)[None, :] * m + (m - 1)).ravel()


def matmul_extract(prod, k: int, m: int, n: int) -> np.ndarray:
    """Read the k x n product matrix out of encode_left(x) * encode_right(W)."""
    prod = np.asarray(prod, dtype=np.uint64)
    _check_dims(k, m, n, prod.size)
    return prod[extract_indices(k, m, n)].reshape(k, n)
