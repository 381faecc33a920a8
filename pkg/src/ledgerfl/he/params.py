"""Parameter sets for the approximate homomorphic encryption engine."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from sympy import isprime

# Modular products are reduced with a float64 quotient estimate, which is exact
# enough only while every modulus stays below this bound.
MAX_MODULUS_BITS = 50


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class HEParams:
    """Ring dimension, modulus chain, scale and noise width.

    The last entry of ``modulus_chain`` is the special prime used only for key
    switching; the others are data primes. A fresh ciphertext lives modulo the
    product of all data primes and every multiplication drops the highest one.
    """

    poly_degree: int
    modulus_chain: tuple[int, ...]
    scale: float
    noise_stddev: float = 3.2

    def __post_init__(self):
        object.__setattr__(self, "modulus_chain", tuple(int(q) for q in self.modulus_chain))
        validate(self)

    @property
    def slot_count(self) -> int:
        return self.poly_degree // 2

    @property
    def data_moduli(self) -> tuple[int, ...]:
        return self.modulus_chain[:-1]

    @property
    def special_modulus(self) -> int:
        return self.modulus_chain[-1]

    @property
    def top_level(self) -> int:
        return len(self.modulus_chain) - 2


def validate(params: HEParams) -> None:
    n = params.poly_degree
    if n < 1024 or n & (n - 1):
        raise ParameterError(f"poly_degree must be a power of two >= 1024, got {n}")
    chain = params.modulus_chain
    if len(chain) < 3:
        raise ParameterError("modulus_chain needs at least 3 primes")
    if len(set(chain)) != len(chain):
        raise ParameterError("moduli must be distinct")
    for q in chain:
        if q.bit_length() > MAX_MODULUS_BITS:
            raise ParameterError(f"modulus {q} exceeds {MAX_MODULUS_BITS} bits")
        if (q - 1) % (2 * n):
            raise ParameterError(f"modulus {q} is not 1 mod 2N")
        if not isprime(q):
            raise ParameterError(f"modulus {q} is not prime")
    if not 0 < params.scale < min(chain):
        raise ParameterError("scale must be positive and below the smallest modulus")
    if params.noise_stddev <= 0:
        raise ParameterError("noise_stddev must be positive")


def find_primes(bits: int, count: int, poly_degree: int, *, above: bool = False,
                exclude: tuple[int, ...] = ()) -> list[int]:
    """Primes ``p = 1 mod 2N`` just below ``2**bits`` (or just above with ``above``)."""
    step = 2 * poly_degree
    if above:
        p = (1 << bits) + 1
        p += (-(p - 1)) % step
    else:
        p = (1 << bits) - step + 1
        p -= (p - 1) % step
    found: list[int] = []
    while len(found) < count:
        if p not in exclude and isprime(p):
            found.append(p)
        p = p + step if above else p - step
    return found


@lru_cache(maxsize=None)
def default_params(poly_degree: int = 4096, scale_bits: int = 45,
                   base_primes: int = 2) -> HEParams:
    """Depth-one parameter set.

    ``base_primes`` 50-bit primes keep the precision after rescaling, one prime just
    above the scale is consumed by the single multiplication, and a 50-bit special
    prime serves key switching. Not chosen for any security level.
    """
    base = find_primes(MAX_MODULUS_BITS, base_primes + 1, poly_degree)
    rescale = find_primes(scale_bits, 1, poly_degree, above=True)
    chain = tuple(base[:base_primes]) + tuple(rescale) + (base[base_primes],)
    return HEParams(poly_degree, chain, float(2 ** scale_bits))


def small_params(poly_degree: int = 1024) -> HEParams:
    """Three-prime chain for quick unit tests: one base, one rescale, one special.

    The scale stays at 2^40 so the single 50-bit base prime leaves 2^10 of headroom.
    """
    return default_params(poly_degree, scale_bits=40, base_primes=1)
