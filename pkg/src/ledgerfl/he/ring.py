"""RNS polynomial arithmetic in Z_q[X]/(X^N + 1) with a negacyclic NTT.

A ring element is an ``int64`` array of shape ``(rows, N)``; row ``i`` holds the
residues modulo the ``i``-th selected prime. All moduli are below 2**50 so a
float64 quotient estimate is enough to reduce a 100-bit product.
"""
from __future__ import annotations

from functools import lru_cache

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _mulmod1(a, b, q, qinv):
    quot = np.int64(np.floor(np.float64(a) * np.float64(b) * qinv))
    # int64 arithmetic wraps; the exact remainder lies in (-q, 2q)
    r = a * b - quot * q
    if r < 0:
        r += q
    elif r >= q:
        r -= q
    return r


@numba.njit(cache=True)
def _ntt_inplace(a, psi_rev, q, qinv):
    rows, n = a.shape
    for r in range(rows):
        qq = q[r]
        qi = qinv[r]
        m = 1
        t = n
        while m < n:
            t //= 2
            for i in range(m):
                j1 = 2 * i * t
                s = psi_rev[r, m + i]
                for j in range(j1, j1 + t):
                    u = a[r, j]
                    v = _mulmod1(a[r, j + t], s, qq, qi)
                    x = u + v
                    if x >= qq:
                        x -= qq
                    y = u - v
                    if y < 0:
                        y += qq
                    a[r, j] = x
                    a[r, j + t] = y
            m *= 2


@numba.njit(cache=True)
def _intt_inplace(a, psi_inv_rev, n_inv, q, qinv):
    rows, n = a.shape
    for r in range(rows):
        qq = q[r]
        qi = qinv[r]
        m = n
        t = 1
        while m > 1:
            h = m // 2
            j1 = 0
            for i in range(h):
                s = psi_inv_rev[r, h + i]
                for j in range(j1, j1 + t):
                    u = a[r, j]
                    v = a[r, j + t]
                    x = u + v
                    if x >= qq:
                        x -= qq
                    y = u - v
                    if y < 0:
                        y += qq
                    a[r, j] = x
                    a[r, j + t] = _mulmod1(y, s, qq, qi)
                j1 += 2 * t
            t *= 2
            m = h
        ni = n_inv[r]
        for j in range(n):
            a[r, j] = _mulmod1(a[r, j], ni, qq, qi)


@numba.njit(cache=True)
def _mul_rows(a, b, q, qinv):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        for j in range(n):
            out[r, j] = _mulmod1(a[r, j], b[r, j], q[r], qinv[r])
    return out


@numba.njit(cache=True)
def _mul_scalar_rows(a, s, q, qinv):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        for j in range(n):
            out[r, j] = _mulmod1(a[r, j], s[r], q[r], qinv[r])
    return out


@numba.njit(cache=True)
def _add_rows(a, b, q):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        qq = q[r]
        for j in range(n):
            x = a[r, j] + b[r, j]
            out[r, j] = x - qq if x >= qq else x
    return out


@numba.njit(cache=True)
def _sub_rows(a, b, q):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        qq = q[r]
        for j in range(n):
            x = a[r, j] - b[r, j]
            out[r, j] = x + qq if x < 0 else x
    return out


def mulmod(a: np.ndarray, b: np.ndarray, q: np.ndarray, qinv: np.ndarray) -> np.ndarray:
    """Vectorised ``a * b mod q`` for operands already in ``[0, q)``."""
    quot = np.floor(a.astype(np.float64) * b.astype(np.float64) * qinv).astype(np.int64)
    r = a * b - quot * q
    r = np.where(r < 0, r + q, r)
    return np.where(r >= q, r - q, r)


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.int64)


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _primitive_2n_root(q: int, n: int) -> int:
    for g in range(2, q):
        psi = pow(g, (q - 1) // (2 * n), q)
        if pow(psi, n, q) == q - 1:
            return psi
    raise ValueError(f"no primitive 2N-th root modulo {q}")


def _twiddles(q: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    psi = _primitive_2n_root(q, n)
    psi_inv = pow(psi, -1, q)
    fwd = np.empty(n, dtype=object)
    inv = np.empty(n, dtype=object)
    fwd[0] = inv[0] = 1
    for i in range(1, n):
        fwd[i] = fwd[i - 1] * psi % q
        inv[i] = inv[i - 1] * psi_inv % q
    rev = _bit_reverse(n)
    return fwd[rev].astype(np.int64), inv[rev].astype(np.int64)


class RingContext:
    """NTT tables for every prime of a modulus chain.

    Methods take ``rows``, a list of indices into ``moduli``, naming which primes
    the rows of the operand correspond to.
    """

    def __init__(self, moduli: tuple[int, ...], n: int):
        self.n = n
        self.moduli = tuple(moduli)
        tw = [_twiddles(q, n) for q in moduli]
        self.q = np.array(moduli, dtype=np.int64)
        self.qinv = 1.0 / self.q.astype(np.float64)
        self.psi_rev = np.stack([f for f, _ in tw])
        self.psi_inv_rev = np.stack([i for _, i in tw])
        self.n_inv = np.array([pow(n, -1, q) for q in moduli], dtype=np.int64)

    def ntt(self, a: np.ndarray, rows) -> np.ndarray:
        rows = list(rows)
        out = np.ascontiguousarray(a, dtype=np.int64).copy()
        _ntt_inplace(out, self.psi_rev[rows], self.q[rows], self.qinv[rows])
        return out

    def intt(self, a: np.ndarray, rows) -> np.ndarray:
        rows = list(rows)
        out = np.ascontiguousarray(a, dtype=np.int64).copy()
        _intt_inplace(out, self.psi_inv_rev[rows], self.n_inv[rows], self.q[rows],
                      self.qinv[rows])
        return out

    def mul(self, a: np.ndarray, b: np.ndarray, rows) -> np.ndarray:
        rows = list(rows)
        return _mul_rows(_c(a), _c(b), self.q[rows], self.qinv[rows])

    def mul_scalar(self, a: np.ndarray, scalars, rows) -> np.ndarray:
        """Multiply row ``i`` by ``scalars[i]`` (already reduced)."""
        rows = list(rows)
        return _mul_scalar_rows(_c(a), np.asarray(scalars, dtype=np.int64),
                                self.q[rows], self.qinv[rows])

    def add(self, a: np.ndarray, b: np.ndarray, rows) -> np.ndarray:
        return _add_rows(_c(a), _c(b), self.q[list(rows)])

    def sub(self, a: np.ndarray, b: np.ndarray, rows) -> np.ndarray:
        return _sub_rows(_c(a), _c(b), self.q[list(rows)])

    def neg(self, a: np.ndarray, rows) -> np.ndarray:
        q = self.q[list(rows), None]
        return np.where(a == 0, a, q - a)

    def reduce(self, values: np.ndarray, rows) -> np.ndarray:
        """Reduce signed int64 coefficients into every selected row."""
        rows = list(rows)
        v = np.asarray(values, dtype=np.int64)
        return np.mod(np.broadcast_to(v, (len(rows), self.n)), self.q[rows, None])

    def polymul(self, a: np.ndarray, b: np.ndarray, rows) -> np.ndarray:
        """Negacyclic product of two coefficient-form elements."""
        rows = list(rows)
        return self.intt(self.mul(self.ntt(a, rows), self.ntt(b, rows), rows), rows)


@lru_cache(maxsize=16)
def ring_context(moduli: tuple[int, ...], n: int) -> RingContext:
    return RingContext(moduli, n)
