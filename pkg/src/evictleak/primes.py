"""Seeded prime and RSA-modulus generation for victim key material.

Probabilistic primality is plenty here — these keys protect nothing;
they only need to be deterministic per seed and quick to mint up to
2048-bit primes on one core.
"""

from __future__ import annotations

import random

__all__ = ["is_probable_prime", "random_prime", "rsa_keypair"]

_SMALL_PRIMES: list[int] = []
_sieve = bytearray([1]) * 2048
_sieve[0] = _sieve[1] = 0
for _n in range(2, 2048):
    if _sieve[_n]:
        _SMALL_PRIMES.append(_n)
        for _m in range(_n * _n, 2048, _n):
            _sieve[_m] = 0


def is_probable_prime(n: int, *, rng: random.Random, rounds: int = 16) -> bool:
    """Miller-Rabin with small-prime trial division up front."""
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(bits: int, rng: random.Random) -> int:
    """A ``bits``-bit prime with both top bits set (so products fill out)."""
    if bits < 8:
        raise ValueError("at least 8 bits")
    while True:
        candidate = rng.getrandbits(bits)
        candidate |= (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        if is_probable_prime(candidate, rng=rng):
            return candidate


def rsa_keypair(modulus_bits: int, rng: random.Random) -> tuple[int, int, int]:
    """Distinct primes ``(p, q)`` and ``n = p*q`` with ``n`` full-width."""
    half = modulus_bits // 2
    p = random_prime(half, rng)
    while True:
        q = random_prime(half, rng)
        if q != p:
            break
    return p, q, p * q
