"""Deterministic RSA key material for experiments and tests."""
from __future__ import annotations

from dataclasses import dataclass

import gmpy2
import numpy as np


@dataclass(frozen=True)
class RsaKey:
    p: int
    q: int

    @property
    def modulus(self) -> int:
        return self.p * self.q

    @property
    def factor_bits(self) -> int:
        return max(self.p.bit_length(), self.q.bit_length())


def _random_prime(rng: np.random.Generator, bits: int) -> int:
    raw = int.from_bytes(rng.bytes((bits + 7) // 8), "big") >> (-bits % 8)
    # top two bits set so p*q has exactly 2*bits bits
    raw |= (3 << (bits - 2)) | 1
    return int(gmpy2.next_prime(raw))


def generate_rsa_key(modulus_bits: int, rng: np.random.Generator | int) -> RsaKey:
    if modulus_bits < 8 or modulus_bits % 2:
        raise ValueError("modulus_bits must be an even number >= 8")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    half = modulus_bits // 2
    while True:
        p, q = _random_prime(rng, half), _random_prime(rng, half)
        if p != q and (p * q).bit_length() == modulus_bits:
            return RsaKey(min(p, q), max(p, q))
