"""Textbook CKKS restricted to what the two-contract protocol needs.

Supported: encode/encrypt of real slot vectors, addition, one ciphertext
multiplication with relinearisation and rescaling, power-of-two slot rotations
and rotate-and-add summation of all slots. No bootstrapping.

Ciphertext parts are kept in coefficient form, one RNS row per active data prime.
Key-switching keys are stored in NTT form over all primes including the special
one.
"""
from __future__ import annotations

import base64
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .params import HEParams, ParameterError
from .ring import RingContext, ring_context

SERIAL_VERSION = 1
_HEADER = struct.Struct("<HIIdI")


class HEError(ValueError):
    """Raised on malformed or incompatible ciphertexts."""


# ---------------------------------------------------------------- encoding

@lru_cache(maxsize=8)
def _slot_layout(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluation-array positions of each slot and its conjugate, plus the twist."""
    two_n = 2 * n
    k = np.array([pow(5, j, two_n) for j in range(n // 2)], dtype=np.int64)
    pos = (k - 1) // 2
    conj_pos = (two_n - k - 1) // 2
    twist = np.exp(1j * np.pi * np.arange(n) / n)
    return pos, conj_pos, twist


def encode(values, scale: float, n: int) -> np.ndarray:
    """Map up to N/2 reals to signed integer coefficients via the canonical embedding."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) > n // 2:
        raise HEError(f"slot vector must be 1-D with at most {n // 2} entries")
    if not np.all(np.isfinite(values)):
        raise HEError("slot vector contains non-finite values")
    pos, conj_pos, twist = _slot_layout(n)
    z = np.zeros(n // 2, dtype=np.complex128)
    z[:len(values)] = values * scale
    evals = np.empty(n, dtype=np.complex128)
    evals[pos] = z
    evals[conj_pos] = np.conj(z)
    coeffs = (np.fft.fft(evals) / n * np.conj(twist)).real
    if np.max(np.abs(coeffs), initial=0.0) >= 2.0 ** 62:
        raise HEError("encoded magnitude overflows the coefficient range")
    return np.rint(coeffs).astype(np.int64)


def decode(coeffs: np.ndarray, scale: float) -> np.ndarray:
    """Inverse of :func:`encode`; takes real-valued (float) coefficients."""
    n = len(coeffs)
    pos, _, twist = _slot_layout(n)
    evals = n * np.fft.ifft(np.asarray(coeffs, dtype=np.float64) * twist)
    return evals[pos].real / scale


# ---------------------------------------------------------------- keys

@dataclass(frozen=True, eq=False)
class SecretKey:
    params: HEParams
    coeffs: np.ndarray  # ternary, int64

    def to_bytes(self) -> bytes:
        head = struct.pack("<HI", SERIAL_VERSION, self.params.poly_degree)
        return head + self.coeffs.astype(np.int8).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, params: HEParams) -> "SecretKey":
        version, n = struct.unpack_from("<HI", data)
        if version != SERIAL_VERSION or n != params.poly_degree:
            raise HEError("secret key does not match parameters")
        coeffs = np.frombuffer(data, dtype=np.int8, offset=6).astype(np.int64)
        return cls(params, coeffs)


@dataclass(frozen=True, eq=False)
class PublicKey:
    params: HEParams
    b: np.ndarray  # NTT form over data primes
    a: np.ndarray

    def to_bytes(self) -> bytes:
        return _pack_arrays(self.params, [self.b, self.a])


@dataclass(frozen=True, eq=False)
class SwitchingKey:
    """One (b_i, a_i) pair per data prime, NTT form over data primes + special prime."""

    params: HEParams
    b: np.ndarray  # shape (digits, rows, N)
    a: np.ndarray

    def to_bytes(self) -> bytes:
        return _pack_arrays(self.params, [self.b.reshape(-1, self.params.poly_degree),
                                          self.a.reshape(-1, self.params.poly_degree)])


@dataclass(frozen=True, eq=False)
class GaloisKeys:
    params: HEParams
    keys: dict[int, SwitchingKey] = field(default_factory=dict)

    @property
    def steps(self) -> list[int]:
        return sorted(self.keys)

    def to_bytes(self) -> bytes:
        out = b""
        for step in self.steps:
            out += struct.pack("<I", step) + self.keys[step].to_bytes()
        return out


@dataclass(frozen=True, eq=False)
class KeyMaterial:
    public_key: PublicKey
    secret_key: SecretKey
    relin_key: SwitchingKey
    galois_keys: GaloisKeys

    @property
    def params(self) -> HEParams:
        return self.public_key.params

    def to_bytes(self) -> bytes:
        return b"".join([self.public_key.to_bytes(), self.secret_key.to_bytes(),
                         self.relin_key.to_bytes(), self.galois_keys.to_bytes()])


def _pack_arrays(params: HEParams, arrays) -> bytes:
    head = struct.pack("<HI", SERIAL_VERSION, params.poly_degree)
    return head + b"".join(np.ascontiguousarray(a, dtype="<i8").tobytes() for a in arrays)


# ---------------------------------------------------------------- context

class _Context:
    """Precomputed tables shared by every operation on one parameter set."""

    def __init__(self, params: HEParams):
        self.params = params
        self.n = params.poly_degree
        self.ring: RingContext = ring_context(params.modulus_chain, self.n)
        self.special = len(params.modulus_chain) - 1
        chain = params.modulus_chain
        p = chain[-1]
        self.p_mod_q = [p % q for q in chain[:-1]]
        self.p_inv_mod_q = [pow(p, -1, q) for q in chain[:-1]]
        # q_l^{-1} mod q_j for rescaling
        self.q_inv = {(l, j): pow(chain[l], -1, chain[j])
                      for l in range(len(chain) - 1) for j in range(l)}
        self._perm_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def data_rows(self, level: int) -> list[int]:
        return list(range(level + 1))

    def ext_rows(self, level: int) -> list[int]:
        return list(range(level + 1)) + [self.special]

    def galois_perm(self, g: int) -> tuple[np.ndarray, np.ndarray]:
        if g not in self._perm_cache:
            i = np.arange(self.n, dtype=np.int64)
            dest = (i * g) % (2 * self.n)
            neg = dest >= self.n
            self._perm_cache[g] = (dest % self.n, neg)
        return self._perm_cache[g]

    def automorphism(self, a: np.ndarray, g: int, rows) -> np.ndarray:
        """Apply X -> X^g to coefficient-form rows."""
        dest, neg = self.galois_perm(g)
        q = self.ring.q[list(rows), None]
        src = np.where(neg[None, :] & (a != 0), q - a, a)
        out = np.empty_like(a)
        out[:, dest] = src
        return out


@lru_cache(maxsize=8)
def _context(params: HEParams) -> _Context:
    return _Context(params)


def _ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, size=n, dtype=np.int64)


def _gaussian(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    e = np.rint(rng.normal(0.0, sigma, size=n))
    bound = math.ceil(6 * sigma)
    return np.clip(e, -bound, bound).astype(np.int64)


def _uniform(rng: np.random.Generator, ctx: _Context, rows) -> np.ndarray:
    return np.stack([rng.integers(0, ctx.ring.moduli[r], size=ctx.n, dtype=np.int64)
                     for r in rows])


# ---------------------------------------------------------------- keygen

def galois_element(step: int, n: int) -> int:
    return pow(5, step, 2 * n)


def _switching_key(ctx: _Context, s_ntt: np.ndarray, target: np.ndarray,
                   rng: np.random.Generator) -> SwitchingKey:
    """Key that turns a term ``d * target`` into a ciphertext under ``s``.

    ``s_ntt`` covers all primes; ``target`` is a coefficient-form ternary-like
    element given as a signed vector.
    """
    params = ctx.params
    rows = list(range(len(params.modulus_chain)))
    n_digits = len(params.data_moduli)
    target_ntt = ctx.ring.ntt(ctx.ring.reduce(target, rows), rows)
    bs, as_ = [], []
    for i in range(n_digits):
        a = _uniform(rng, ctx, rows)
        e = ctx.ring.ntt(ctx.ring.reduce(_gaussian(rng, ctx.n, params.noise_stddev), rows), rows)
        b = ctx.ring.sub(e, ctx.ring.mul(a, s_ntt, rows), rows)
        # + P * g_i * target, where g_i is 1 mod q_i and 0 mod every other prime
        gadget = np.zeros(len(rows), dtype=np.int64)
        gadget[i] = ctx.p_mod_q[i]
        b = ctx.ring.add(b, ctx.ring.mul_scalar(target_ntt, gadget, rows), rows)
        bs.append(b)
        as_.append(a)
    return SwitchingKey(params, np.stack(bs), np.stack(as_))


def _ring_square(ctx: _Context, s: np.ndarray) -> np.ndarray:
    """Signed coefficients of s^2 in Z[X]/(X^N+1) (exact, |coeff| <= N)."""
    rows = [0]
    sq = ctx.ring.polymul(ctx.ring.reduce(s, rows), ctx.ring.reduce(s, rows), rows)[0]
    q = ctx.ring.moduli[0]
    return np.where(sq > q // 2, sq - q, sq)


def keygen(params: HEParams, seed: int) -> KeyMaterial:
    """Deterministic key generation: secret, public, relinearisation and rotation keys."""
    ctx = _context(params)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4B45]))
    n = params.poly_degree
    all_rows = list(range(len(params.modulus_chain)))
    data_rows = ctx.data_rows(params.top_level)

    s = _ternary(rng, n)
    s_ntt = ctx.ring.ntt(ctx.ring.reduce(s, all_rows), all_rows)

    a = _uniform(rng, ctx, data_rows)
    e = ctx.ring.ntt(ctx.ring.reduce(_gaussian(rng, n, params.noise_stddev), data_rows), data_rows)
    b = ctx.ring.sub(e, ctx.ring.mul(a, s_ntt[data_rows], data_rows), data_rows)
    pk = PublicKey(params, b, a)

    relin = _switching_key(ctx, s_ntt, _ring_square(ctx, s), rng)

    galois = {}
    step = 1
    while step < params.slot_count:
        g = galois_element(step, n)
        s_rot = ctx.automorphism(ctx.ring.reduce(s, [0]), g, [0])[0]
        q0 = ctx.ring.moduli[0]
        s_rot = np.where(s_rot > q0 // 2, s_rot - q0, s_rot)
        galois[step] = _switching_key(ctx, s_ntt, s_rot, rng)
        step *= 2
    return KeyMaterial(pk, SecretKey(params, s), relin, GaloisKeys(params, galois))


# ---------------------------------------------------------------- ciphertexts

@dataclass(frozen=True, eq=False)
class Ciphertext:
    parts: tuple[np.ndarray, ...]
    level: int
    scale: float
    params: HEParams

    @property
    def slot_count(self) -> int:
        return self.params.slot_count

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(SERIAL_VERSION, self.params.poly_degree, self.level,
                            float(self.scale), len(self.parts))
        return head + b"".join(np.ascontiguousarray(p, dtype="<i8").tobytes()
                               for p in self.parts)

    @classmethod
    def from_bytes(cls, data: bytes, params: HEParams) -> "Ciphertext":
        try:
            version, n, level, scale, nparts = _HEADER.unpack_from(data)
        except struct.error as exc:
            raise HEError("truncated ciphertext header") from exc
        if version != SERIAL_VERSION or n != params.poly_degree:
            raise HEError("ciphertext does not match parameters")
        if level > params.top_level or nparts not in (2, 3):
            raise HEError("ciphertext header out of range")
        rows = level + 1
        expected = _HEADER.size + nparts * rows * n * 8
        if len(data) != expected:
            raise HEError(f"ciphertext body has {len(data)} bytes, expected {expected}")
        flat = np.frombuffer(data, dtype="<i8", offset=_HEADER.size).astype(np.int64)
        parts = tuple(flat[i * rows * n:(i + 1) * rows * n].reshape(rows, n)
                      for i in range(nparts))
        return cls(parts, level, scale, params)

    def to_base64(self) -> str:
        return base64.b64encode(self.to_bytes()).decode("ascii")

    @classmethod
    def from_base64(cls, text: str, params: HEParams) -> "Ciphertext":
        return cls.from_bytes(base64.b64decode(text), params)


def encrypt(values, pk: PublicKey, params: HEParams | None = None,
            rng: np.random.Generator | None = None) -> Ciphertext:
    """Encrypt a real vector of at most ``slot_count`` entries under ``pk``.

    Encryption is randomised; pass a seeded ``rng`` for reproducible runs.
    """
    params = params or pk.params
    if len(np.atleast_1d(values)) > params.slot_count:
        raise HEError(f"vector longer than {params.slot_count} slots")
    ctx = _context(params)
    rng = rng if rng is not None else np.random.default_rng()
    level = params.top_level
    rows = ctx.data_rows(level)
    n = params.poly_degree
    m = ctx.ring.reduce(encode(values, params.scale, n), rows)
    u = ctx.ring.ntt(ctx.ring.reduce(_ternary(rng, n), rows), rows)
    e0 = ctx.ring.reduce(_gaussian(rng, n, params.noise_stddev), rows)
    e1 = ctx.ring.reduce(_gaussian(rng, n, params.noise_stddev), rows)
    c0 = ctx.ring.intt(ctx.ring.mul(pk.b, u, rows), rows)
    c1 = ctx.ring.intt(ctx.ring.mul(pk.a, u, rows), rows)
    c0 = ctx.ring.add(ctx.ring.add(c0, e0, rows), m, rows)
    c1 = ctx.ring.add(c1, e1, rows)
    return Ciphertext((c0, c1), level, params.scale, params)


def _crt_centered(residues: np.ndarray, moduli: tuple[int, ...]) -> np.ndarray:
    """Combine RNS rows into centered integers, returned as float64."""
    if len(moduli) == 1:
        q = moduli[0]
        r = residues[0]
        return np.where(r > q // 2, r - q, r).astype(np.float64)
    big_q = math.prod(moduli)
    acc = np.zeros(residues.shape[1], dtype=object)
    for r, q in zip(residues, moduli):
        m = big_q // q
        coef = pow(m % q, -1, q)
        y = [(int(v) * coef) % q for v in r]
        acc = acc + np.array(y, dtype=object) * m
    acc = acc % big_q
    half = big_q // 2
    centered = np.where(acc > half, acc - big_q, acc)
    return centered.astype(np.float64)


def decrypt(c: Ciphertext, sk: SecretKey, params: HEParams | None = None) -> np.ndarray:
    """Decrypt to the full slot vector (length ``slot_count``)."""
    params = params or sk.params
    _check(c, params)
    if not (math.isfinite(c.scale) and c.scale > 0):
        raise HEError("ciphertext scale is not a positive finite number")
    ctx = _context(params)
    rows = ctx.data_rows(c.level)
    s = ctx.ring.ntt(ctx.ring.reduce(sk.coeffs, rows), rows)
    acc = ctx.ring.ntt(c.parts[-1], rows)
    for part in reversed(c.parts[:-1]):
        acc = ctx.ring.add(ctx.ring.mul(acc, s, rows), ctx.ring.ntt(part, rows), rows)
    m = ctx.ring.intt(acc, rows)
    coeffs = _crt_centered(m, params.data_moduli[:c.level + 1])
    return decode(coeffs, c.scale)


def _check(c: Ciphertext, params: HEParams) -> None:
    if c.params != params:
        raise HEError("ciphertext was produced under different parameters")
    if not 0 <= c.level <= params.top_level:
        raise HEError(f"level {c.level} is exhausted or invalid")
    for p in c.parts:
        if p.shape != (c.level + 1, params.poly_degree):
            raise HEError("ciphertext part has the wrong shape")


def _same_shape(a: Ciphertext, b: Ciphertext) -> None:
    if a.params != b.params:
        raise HEError("operands use different parameters")
    if a.level != b.level:
        raise HEError(f"level mismatch: {a.level} vs {b.level}")
    if not math.isclose(a.scale, b.scale, rel_tol=1e-9):
        raise HEError(f"scale mismatch: {a.scale} vs {b.scale}")


# ---------------------------------------------------------------- arithmetic

def add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _same_shape(a, b)
    ctx = _context(a.params)
    rows = ctx.data_rows(a.level)
    n_parts = max(len(a.parts), len(b.parts))
    zero = np.zeros_like(a.parts[0])
    pa = list(a.parts) + [zero] * (n_parts - len(a.parts))
    pb = list(b.parts) + [zero] * (n_parts - len(b.parts))
    parts = tuple(ctx.ring.add(x, y, rows) for x, y in zip(pa, pb))
    return Ciphertext(parts, a.level, a.scale, a.params)


def negate(a: Ciphertext) -> Ciphertext:
    ctx = _context(a.params)
    rows = ctx.data_rows(a.level)
    return Ciphertext(tuple(ctx.ring.neg(p, rows) for p in a.parts), a.level, a.scale, a.params)


def sub(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    return add(a, negate(b))


def multiply_int(a: Ciphertext, k: int) -> Ciphertext:
    """Multiply every slot by a public integer; no level or scale change."""
    ctx = _context(a.params)
    rows = ctx.data_rows(a.level)
    scalars = [int(k) % ctx.ring.moduli[r] for r in rows]
    parts = tuple(ctx.ring.mul_scalar(p, scalars, rows) for p in a.parts)
    return Ciphertext(parts, a.level, a.scale, a.params)


def _key_switch(ctx: _Context, d: np.ndarray, key: SwitchingKey, level: int):
    """Return (k0, k1) over data rows with k0 + k1*s ~= d * target."""
    rows = ctx.ext_rows(level)
    ring = ctx.ring
    n_digits = level + 1
    q_ext = ring.q[rows, None]
    # every digit lifted to every extended prime, transformed in one batch
    lifted = np.concatenate([np.mod(np.broadcast_to(d[i], (len(rows), ctx.n)), q_ext)
                             for i in range(n_digits)])
    lifted = ring.ntt(lifted, rows * n_digits).reshape(n_digits, len(rows), ctx.n)
    key_rows = rows[:-1] + [len(ctx.params.modulus_chain) - 1]
    kb = key.b[:n_digits][:, key_rows, :]
    ka = key.a[:n_digits][:, key_rows, :]
    acc0 = ring.mul(lifted.reshape(-1, ctx.n), kb.reshape(-1, ctx.n), rows * n_digits)
    acc1 = ring.mul(lifted.reshape(-1, ctx.n), ka.reshape(-1, ctx.n), rows * n_digits)
    acc0 = acc0.reshape(n_digits, len(rows), ctx.n)
    acc1 = acc1.reshape(n_digits, len(rows), ctx.n)
    s0 = acc0[0]
    s1 = acc1[0]
    for i in range(1, n_digits):
        s0 = ring.add(s0, acc0[i], rows)
        s1 = ring.add(s1, acc1[i], rows)
    both = ring.intt(np.concatenate([s0, s1]), rows + rows)
    return _mod_down(ctx, both[:len(rows)], level), _mod_down(ctx, both[len(rows):], level)


def _mod_down(ctx: _Context, x: np.ndarray, level: int) -> np.ndarray:
    """Divide by the special prime with rounding, dropping its row."""
    p = ctx.ring.moduli[ctx.special]
    last = x[-1]
    last = np.where(last > p // 2, last - p, last)
    rows = ctx.data_rows(level)
    q = ctx.ring.q[rows, None]
    diff = ctx.ring.sub(x[:-1], np.mod(last, q), rows)
    return ctx.ring.mul_scalar(diff, [ctx.p_inv_mod_q[r] for r in rows], rows)


def _rescale(ctx: _Context, x: np.ndarray, level: int) -> np.ndarray:
    q_l = ctx.ring.moduli[level]
    last = x[level]
    last = np.where(last > q_l // 2, last - q_l, last)
    rows = ctx.data_rows(level - 1)
    q = ctx.ring.q[rows, None]
    diff = ctx.ring.sub(x[:level], np.mod(last, q), rows)
    return ctx.ring.mul_scalar(diff, [ctx.q_inv[(level, j)] for j in rows], rows)


def multiply(a: Ciphertext, b: Ciphertext, relin_key: SwitchingKey) -> Ciphertext:
    """Slot-wise product, relinearised and rescaled (drops one level)."""
    _same_shape(a, b)
    if len(a.parts) != 2 or len(b.parts) != 2:
        raise HEError("multiply expects relinearised operands")
    if a.level < 1:
        raise HEError("no level left for a multiplication")
    ctx = _context(a.params)
    level = a.level
    rows = ctx.data_rows(level)
    ring = ctx.ring
    fa = ring.ntt(np.concatenate(a.parts), rows + rows)
    fb = ring.ntt(np.concatenate(b.parts), rows + rows)
    a0, a1 = fa[:len(rows)], fa[len(rows):]
    b0, b1 = fb[:len(rows)], fb[len(rows):]
    d0 = ring.mul(a0, b0, rows)
    d1 = ring.add(ring.mul(a0, b1, rows), ring.mul(a1, b0, rows), rows)
    d2 = ring.mul(a1, b1, rows)
    coeff = ring.intt(np.concatenate([d0, d1, d2]), rows * 3)
    d0, d1, d2 = coeff[:len(rows)], coeff[len(rows):2 * len(rows)], coeff[2 * len(rows):]
    k0, k1 = _key_switch(ctx, d2, relin_key, level)
    c0 = _rescale(ctx, ring.add(d0, k0, rows), level)
    c1 = _rescale(ctx, ring.add(d1, k1, rows), level)
    scale = a.scale * b.scale / ring.moduli[level]
    return Ciphertext((c0, c1), level - 1, scale, a.params)


def _rotate_pow2(c: Ciphertext, step: int, galois_keys: GaloisKeys) -> Ciphertext:
    key = galois_keys.keys.get(step)
    if key is None:
        raise HEError(f"no Galois key for rotation by {step}")
    ctx = _context(c.params)
    rows = ctx.data_rows(c.level)
    g = galois_element(step, ctx.n)
    c0 = ctx.automorphism(c.parts[0], g, rows)
    c1 = ctx.automorphism(c.parts[1], g, rows)
    k0, k1 = _key_switch(ctx, c1, key, c.level)
    return Ciphertext((ctx.ring.add(c0, k0, rows), k1), c.level, c.scale, c.params)


def rotate(c: Ciphertext, k: int, galois_keys: GaloisKeys) -> Ciphertext:
    """Cyclic left shift of the slots by ``k``, composed from power-of-two steps."""
    if len(c.parts) != 2:
        raise HEError("rotate expects a relinearised ciphertext")
    k %= c.slot_count
    out = c
    bit = 1
    while k:
        if k & 1:
            out = _rotate_pow2(out, bit, galois_keys)
        k >>= 1
        bit <<= 1
    return out


def sum_slots(c: Ciphertext, galois_keys: GaloisKeys) -> Ciphertext:
    """Rotate-and-add folding: afterwards every slot holds the total of all slots."""
    step = 1
    out = c
    while step < c.slot_count:
        out = add(out, rotate(out, step, galois_keys))
        step *= 2
    return out


def cipher_count(param_count: int, poly_degree: int) -> int:
    """Ciphers needed for a flat model: ``floor(len / capacity) + 1``.

    The trailing ``+ 1`` is applied even when the length divides evenly.
    """
    if param_count < 1:
        raise ParameterError("param_count must be positive")
    if poly_degree < 2 or poly_degree & (poly_degree - 1):
        raise ParameterError("poly_degree must be a power of two")
    return param_count // (poly_degree // 2) + 1


def chunk_vector(values, poly_degree: int) -> list[np.ndarray]:
    """Split into ``cipher_count`` chunks of at most N/2 entries (last may be empty)."""
    values = np.asarray(values, dtype=np.float64)
    cap = poly_degree // 2
    n = cipher_count(len(values), poly_degree)
    return [values[j * cap:(j + 1) * cap] for j in range(n)]
